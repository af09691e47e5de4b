"""Metric CSVs, run manifests and the cross-method comparison report."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import DomainError, SchemaError
from .orchestrator import LOSS_KEYS, RoundRecord

BASE_COLUMNS = ("method", "seed", "t", "local_phase", "global_margin")


def metric_columns(num_classes: int, num_clients: int) -> list[str]:
    return [
        *BASE_COLUMNS,
        *(f"margin_c{c}" for c in range(num_classes)),
        *(f"proto_margin_c{c}" for c in range(num_classes)),
        "server_acc",
        "mean_client_acc",
        *(f"client_acc_{i}" for i in range(num_clients)),
        *LOSS_KEYS,
    ]


def _fmt(value: float) -> str:
    value = float(value)
    if math.isnan(value):
        return "nan"
    return format(value, ".17g")


def emit_metrics(records: Sequence[RoundRecord], path: str | Path, method: str = "", seed: int = 0) -> Path:
    """Write one row per round with a fixed column order."""
    if not records:
        raise DomainError("no records to write")
    path = Path(path)
    s = len(records[0].margins)
    c = len(records[0].client_accs)
    columns = metric_columns(s, c)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL)
        writer.writerow(columns)
        for r in records:
            writer.writerow([
                method, seed, r.t, r.local_phase, _fmt(r.global_margin),
                *(_fmt(m) for m in r.margins),
                *(_fmt(m) for m in r.prototype_margins),
                _fmt(r.server_acc), _fmt(r.mean_client_acc),
                *(_fmt(a) for a in r.client_accs),
                *(_fmt(r.losses.get(k, math.nan)) for k in LOSS_KEYS),
            ])
    return path


@dataclass
class MetricsFile:
    path: Path
    columns: list[str]
    method: str
    seed: int
    records: list[RoundRecord]


def _count_prefixed(columns: Sequence[str], prefix: str) -> int:
    n = 0
    while f"{prefix}{n}" in columns:
        n += 1
    return n


def read_metrics(path: str | Path) -> MetricsFile:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            columns = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty metrics file") from None
        rows = list(reader)
    s = _count_prefixed(columns, "margin_c")
    c = _count_prefixed(columns, "client_acc_")
    expected = metric_columns(s, c)
    for name in expected:
        if name not in columns:
            raise SchemaError(f"{path}: missing column {name!r}")
    if columns != expected:
        extra = [name for name in columns if name not in expected]
        raise SchemaError(f"{path}: unexpected column(s) {extra}" if extra else f"{path}: columns out of order")
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    pos = {name: i for i, name in enumerate(columns)}
    records = []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(columns):
            raise SchemaError(f"{path}: row has {len(row)} cells, header has {len(columns)}", lineno)

        def val(name: str) -> float:
            return float(row[pos[name]])

        records.append(RoundRecord(
            t=int(row[pos["t"]]),
            margins=[val(f"margin_c{k}") for k in range(s)],
            prototype_margins=[val(f"proto_margin_c{k}") for k in range(s)],
            global_margin=val("global_margin"),
            server_acc=val("server_acc"),
            client_accs=[val(f"client_acc_{i}") for i in range(c)],
            losses={k: val(k) for k in LOSS_KEYS},
            local_phase=row[pos["local_phase"]],
        ))
    return MetricsFile(path, columns, rows[0][pos["method"]], int(rows[0][pos["seed"]]), records)


def _label(m: MetricsFile) -> str:
    return f"{m.method or m.path.stem} (seed {m.seed})"


def compare_report(paths: Sequence[str | Path]) -> str:
    """Final/best margin and accuracy per file, then pairwise deltas against the first file."""
    if len(paths) < 2:
        raise DomainError("compare needs at least two metrics files")
    files = [read_metrics(p) for p in paths]
    ref_columns = files[0].columns
    for f in files[1:]:
        if f.columns != ref_columns:
            missing = [c for c in ref_columns if c not in f.columns] or [c for c in f.columns if c not in ref_columns]
            raise SchemaError(f"{f.path}: schema differs from {files[0].path} (column {missing[0]!r})")

    def stats(f: MetricsFile) -> dict[str, float]:
        rs = f.records
        return {
            "final_margin": rs[-1].global_margin,
            "best_margin": max(r.global_margin for r in rs),
            "final_server_acc": rs[-1].server_acc,
            "best_server_acc": max(r.server_acc for r in rs),
            "final_client_acc": rs[-1].mean_client_acc,
        }

    table = [(f, stats(f)) for f in files]
    lines = ["method                          rounds  final_margin  best_margin  final_S_acc  best_S_acc  final_c_acc"]
    for f, st in table:
        lines.append(f"{_label(f):<32}{len(f.records):>6}  {st['final_margin']:>12.4f}  {st['best_margin']:>11.4f}"
                     f"  {st['final_server_acc']:>11.4f}  {st['best_server_acc']:>10.4f}  {st['final_client_acc']:>11.4f}")
    lines.append("")
    for i in range(len(table)):
        for j in range(i + 1, len(table)):
            (fa, a), (fb, b) = table[i], table[j]
            d_margin = a["final_margin"] - b["final_margin"]
            d_acc = a["final_server_acc"] - b["final_server_acc"]
            d_cacc = a["final_client_acc"] - b["final_client_acc"]
            lines.append(f"{_label(fa)} - {_label(fb)}: margin {d_margin:+.4f}, "
                         f"server_acc {d_acc:+.4f}, client_acc {d_cacc:+.4f}")
            if d_margin > 0:
                verdict = f"{_label(fa)} keeps the larger final prototype margin"
            elif d_margin < 0:
                verdict = f"{_label(fb)} keeps the larger final prototype margin"
            else:
                verdict = "final prototype margins are equal"
            lines.append(f"  verdict: {verdict}")
    return "\n".join(lines) + "\n"


def write_json(payload, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")
