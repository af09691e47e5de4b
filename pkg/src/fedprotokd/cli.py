"""Command line: ``fedprotokd run|compare|validate``.

``run`` writes into ``--out``, else ``$FEDPROTOKD_OUTPUT_DIR``, else
``runs/<config name>``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import parse_config, write_config
from .errors import ConfigurationError, FedProtoKDError, ParseError
from .orchestrator import run_experiment
from .reports import compare_report, emit_metrics, write_json

OUTPUT_ENV = "FEDPROTOKD_OUTPUT_DIR"

EXIT_OK, EXIT_RUN_ERROR, EXIT_USAGE = 0, 1, 2


def _output_dir(config_path: Path, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    if os.environ.get(OUTPUT_ENV):
        return Path(os.environ[OUTPUT_ENV])
    return Path("runs") / config_path.stem


def cmd_run(args: argparse.Namespace) -> int:
    config_path = Path(args.config)
    config = parse_config(config_path)
    if args.seed is not None:
        config = config.replace(seed=args.seed, seeds=())
    out = _output_dir(config_path, args.out)
    out.mkdir(parents=True, exist_ok=True)

    outputs: list[Path] = []
    timings: dict[str, dict[str, float]] = {}
    summaries: dict[str, dict] = {}
    config_copy = out / "config.ini"
    write_config(config, config_copy)
    outputs.append(config_copy)
    for seed in config.seed_list:
        cfg = config.replace(seed=seed, seeds=())
        start = time.perf_counter()
        result = run_experiment(cfg)
        wall = time.perf_counter() - start
        stem = f"{cfg.method}_seed{seed}"
        outputs.append(emit_metrics(result.records, out / f"metrics_{stem}.csv", cfg.method, seed))
        outputs.append(write_json(result.summary, out / f"summary_{stem}.json"))
        if cfg.audit:
            outputs.append(write_json(result.audit, out / f"audit_{stem}.json"))
        timings[str(seed)] = {**result.timings, "total": wall}
        summaries[str(seed)] = {k: result.summary[k] for k in
                                ("initial_server_acc", "final_server_acc", "best_server_acc",
                                 "final_mean_client_acc", "final_global_margin")}
        print(f"{stem}: final server acc {result.summary['final_server_acc']:.4f}, "
              f"final global margin {result.summary['final_global_margin']:.4f}")
    manifest = out / "manifest.json"
    write_json({
        "version": __version__,
        "config": config.to_dict(),
        "timings_seconds": timings,
        "summaries": summaries,
        "outputs": [str(p) for p in outputs + [manifest]],
    }, manifest)
    missing = [p for p in outputs if not p.exists()]
    if missing:
        print(f"error: outputs not written: {missing}", file=sys.stderr)
        return EXIT_RUN_ERROR
    print(f"wrote {len(outputs) + 1} files to {out}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    sys.stdout.write(compare_report(args.metrics))
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    config = parse_config(args.config)
    if args.echo:
        sys.stdout.write(config.to_ini())
    else:
        print(f"{args.config}: ok ({config.method}, {config.clients} clients, {config.rounds} rounds)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedprotokd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--out", help=f"output directory (overrides ${OUTPUT_ENV})")
    run.add_argument("--seed", type=int, help="override the config seed(s) with one seed")
    run.set_defaults(func=cmd_run)

    compare = sub.add_parser("compare", help="compare two or more metrics CSVs")
    compare.add_argument("metrics", nargs="+")
    compare.set_defaults(func=cmd_compare)

    validate = sub.add_parser("validate", help="parse and validate a config")
    validate.add_argument("config")
    validate.add_argument("--echo", action="store_true", help="print the config with defaults filled in")
    validate.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FedProtoKDError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN_ERROR


if __name__ == "__main__":
    sys.exit(main())
