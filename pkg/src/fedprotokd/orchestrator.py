"""Round loop: clients train and share logits + prototypes, the server
aggregates, updates its global prototypes, scores the public set, trains,
and sends logits + prototypes back for client distillation."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence, TypeVar

import numpy as np

from . import client as cl
from . import server as sv
from .config import ExperimentConfig
from .data import (
    Dataset,
    PartitionPlan,
    dirichlet_partition,
    generate_mixture,
    load_csv,
    pathological_partition,
    split_public,
    stratified_split,
)
from .errors import DomainError, FedProtoKDError
from .nn_core import no_grad
from .protocol import ClientLogits, ClientPrototypes, ServerLogits, ServerPrototypes

log = logging.getLogger(__name__)

T = TypeVar("T")

LOSS_KEYS = (
    "local_ce", "local_mse", "actsp",
    "server_kl", "server_ce", "server_pl",
    "distill_kl", "distill_ce",
)

# seed-derivation tags
_DATA, _TEST, _PUBLIC, _PARTITION, _CLIENT_INIT, _SERVER_INIT, _TSP_INIT = range(7)
_LOCAL, _DISTILL, _ACTSP, _SERVER = range(10, 14)


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from integer parts (global seed, client id, round, phase)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class RoundRecord:
    t: int
    margins: list[float]               # class-wise margin from client-prototype centers, nan if class absent
    prototype_margins: list[float]     # per-class nearest-neighbour distance among global prototypes
    global_margin: float
    server_acc: float
    client_accs: list[float]
    losses: dict[str, float]
    local_phase: str = "initial"

    @property
    def mean_client_acc(self) -> float:
        return float(np.mean(self.client_accs))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list[RoundRecord]
    summary: dict
    timings: dict[str, float] = field(default_factory=dict)
    audit: list[dict] = field(default_factory=list)
    messages: list[tuple[int, str, str, str]] = field(default_factory=list)


def evaluate(model: cl.ClientModel, test: Dataset) -> float:
    """Fraction of test rows whose argmax logit equals the label."""
    if test.n == 0:
        raise DomainError("cannot evaluate on an empty test set")
    with no_grad():
        predictions = cl.pseudo_labels(model.logits(test.features).data)
    return float(np.mean(predictions == test.evaluation_labels))


def prototype_margin(prototypes: Mapping[int, np.ndarray] | np.ndarray) -> tuple[dict[int, float], float]:
    """Per class the distance to the nearest other prototype, and the minimum of those."""
    if isinstance(prototypes, Mapping):
        classes = sorted(prototypes)
        points = np.stack([np.asarray(prototypes[c], dtype=np.float64) for c in classes]) if classes else np.zeros((0, 0))
    else:
        points = np.asarray(prototypes, dtype=np.float64)
        classes = list(range(points.shape[0]))
    if len(classes) < 2:
        raise DomainError("a prototype margin needs at least two prototypes")
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    per_class = {c: float(d) for c, d in zip(classes, dist.min(axis=1))}
    return per_class, min(per_class.values())


def _with_context(exc: FedProtoKDError, t: int, phase: str) -> FedProtoKDError:
    try:
        wrapped = type(exc)(f"round {t}, {phase}: {exc}")
    except TypeError:
        return exc
    return wrapped


class Simulation:
    """Owns every client, the server model and the global prototype state.

    ``release_counts`` controls whether clients agree to send per-class
    sample counts at all; only the weighted-average baseline asks for them.
    """

    def __init__(self, config: ExperimentConfig, release_counts: bool = True,
                 execution_order: Sequence[int] | None = None) -> None:
        config.validate()
        self.config = config
        self.timings: dict[str, float] = {}
        self.messages: list[tuple[int, str, str, str]] = []
        self.audit: list[dict] = []
        self.generator_calls = 0
        with self._timed("setup"):
            self._build(release_counts)
        self.execution_order = list(execution_order) if execution_order is not None else list(range(len(self.clients)))

    # -- setup -------------------------------------------------------------

    def _build(self, release_counts: bool) -> None:
        cfg = self.config
        seed = cfg.seed
        if cfg.source == "csv":
            source = load_csv(cfg.path)
        else:
            source = generate_mixture(cfg.classes, cfg.features, cfg.n_per_class, cfg.spread,
                                      derive_seed(seed, _DATA), separation=cfg.separation)
        self.source = source
        self.num_classes = source.num_classes
        n_test = max(self.num_classes, int(round(cfg.test_fraction * source.n)))
        test_rows, pool_rows = stratified_split(source, n_test, derive_seed(seed, _TEST))
        self.test = source.subset(test_rows)
        pool = source.subset(pool_rows)
        self.public, private = split_public(pool, cfg.public_n, derive_seed(seed, _PUBLIC))
        if cfg.partition == "dirichlet":
            plan = dirichlet_partition(private, cfg.clients, cfg.alpha, derive_seed(seed, _PARTITION))
        else:
            plan = pathological_partition(private, cfg.clients, cfg.k_classes, derive_seed(seed, _PARTITION))
        self.plan: PartitionPlan = plan.with_public(self.public.index)

        self.clients: list[cl.ClientNode] = []
        families = cl.ARCHITECTURE_FAMILIES
        for cid, rows in enumerate(self.plan.client_indices):
            train = source.select_source_rows(rows)
            local_classes = np.unique(train.labels)
            test = self.test.subset(np.flatnonzero(np.isin(self.test.evaluation_labels, local_classes)))
            rng = np.random.default_rng(derive_seed(seed, _CLIENT_INIT, cid))
            model = cl.ClientModel.build(source.dim, families[cid % len(families)], cfg.feature_dim,
                                         self.num_classes, rng)
            self.clients.append(cl.ClientNode(cid, model, train, test, release_counts=release_counts))

        self.server_model = cl.ClientModel.build(source.dim, families[-1], cfg.feature_dim, self.num_classes,
                                                 np.random.default_rng(derive_seed(seed, _SERVER_INIT)))
        self.tsp = sv.TrainableServerPrototypes(self.num_classes, cfg.feature_dim,
                                                np.random.default_rng(derive_seed(seed, _TSP_INIT)))
        self.global_prototypes: np.ndarray | None = None
        self.initial_server_acc = evaluate(self.server_model, self.test)

    # -- helpers -----------------------------------------------------------

    @contextmanager
    def _timed(self, phase: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[phase] = self.timings.get(phase, 0.0) + time.perf_counter() - start

    def _fan_out(self, fn: Callable[[cl.ClientNode], T]) -> list[T]:
        """Run ``fn`` on every client; results come back in client-id order."""
        ordered = [self.clients[i] for i in self.execution_order]
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                outputs = list(pool.map(fn, ordered))
        else:
            outputs = [fn(c) for c in ordered]
        by_id = {c.client_id: out for c, out in zip(ordered, outputs)}
        return [by_id[c.client_id] for c in self.clients]

    def _log_message(self, t: int, sender: str, receiver: str, message) -> None:
        self.messages.append((t, sender, receiver, type(message).__name__))

    # -- one round ---------------------------------------------------------

    def run_round(self, t: int) -> RoundRecord:
        phase = "setup"
        try:
            phase = "local training"
            with self._timed(phase):
                local = self._local_phase(t)
            phase = "client upload"
            with self._timed(phase):
                logit_msgs, proto_msgs = self._upload(t)
            phase = "logit aggregation"
            with self._timed(phase):
                agg = sv.aggregate_logits(logit_msgs)
            phase = "margins"
            with self._timed(phase):
                centers = sv.class_centers(proto_msgs)
                schedule = sv.adaptive_margins(centers, self.config.zeta)
            phase = "prototype update"
            with self._timed(phase):
                protos, actsp_trace = self._update_prototypes(t, proto_msgs, schedule)
            phase = "importance scoring"
            with self._timed(phase):
                with no_grad():
                    server_feats = self.server_model.features(self.public.features).data
                scores = sv.importance_scores(agg, server_feats, protos, self.config.phi,
                                              self.config.k_steepness, self.config.epsilon_guard)
            phase = "server training"
            with self._timed(phase):
                server_trace = sv.server_kd_train(
                    self.server_model, self.public.features, agg, scores, protos,
                    upsilon=self.config.upsilon, epochs=self.config.ep_s, batch_size=self.config.bs,
                    seed=derive_seed(self.config.seed, _SERVER, t),
                    lr=self.config.lr_server, momentum=self.config.momentum)
            phase = "client distillation"
            with self._timed(phase):
                distill = self._distill_phase(t)
            phase = "evaluation"
            with self._timed(phase):
                record = self._record(t, local, actsp_trace, server_trace, distill, schedule, protos)
            if self.config.audit:
                self.audit.append({
                    "t": t,
                    "prototypes": protos.tolist(),
                    "margins": {str(c): m for c, m in schedule.margins.items()},
                    "importance": scores.weights.tolist(),
                    "pseudo_labels": scores.pseudo_labels.tolist(),
                    "importance_degenerate": scores.degenerate,
                })
            return record
        except FedProtoKDError as exc:
            raise _with_context(exc, t, phase) from exc

    def _local_phase(self, t: int) -> list[dict[str, float]]:
        cfg = self.config

        def train(node: cl.ClientNode) -> dict[str, float]:
            seed = derive_seed(cfg.seed, node.client_id, t, _LOCAL)
            if t == 0 or self.global_prototypes is None:
                return cl.local_train_initial(node.model, node.train, cfg.ep_c, cfg.bs, seed,
                                              cfg.lr_client, cfg.momentum)
            return cl.local_train_regularized(node.model, node.train, self.global_prototypes, cfg.epsilon,
                                              cfg.ep_c, cfg.bs, seed, cfg.lr_client, cfg.momentum)

        return self._fan_out(train)

    def _upload(self, t: int) -> tuple[list[ClientLogits], list[ClientPrototypes]]:
        include_counts = self.config.method == "fedpkd_weightedavg"
        pairs = self._fan_out(lambda node: (node.share_logits(self.public),
                                            node.share_prototypes(include_counts=include_counts)))
        for logits_msg, proto_msg in pairs:
            self._log_message(t, f"client{logits_msg.client_id}", "server", logits_msg)
            self._log_message(t, f"client{proto_msg.client_id}", "server", proto_msg)
        return [p[0] for p in pairs], [p[1] for p in pairs]

    def _update_prototypes(self, t: int, proto_msgs: list[ClientPrototypes],
                           schedule: sv.MarginSchedule) -> tuple[np.ndarray, dict[str, float]]:
        cfg = self.config
        s = self.num_classes
        trace: dict[str, float] = {}
        if cfg.method in ("fedprotokd", "fedprotokd_zeta"):
            margins = schedule if cfg.method == "fedprotokd" else sv.fixed_margin(schedule)
            self.generator_calls += 1
            emitted, trace = sv.actsp_train(self.tsp, proto_msgs, margins, cfg.ep_tsp, cfg.bs_tsp,
                                            derive_seed(cfg.seed, _ACTSP, t), cfg.lr_tsp, cfg.momentum)
            fresh = {c: emitted[c] for c in range(s)}
        elif cfg.method == "fedpkd_weightedavg":
            fresh = sv.weighted_average_prototypes(proto_msgs)
        else:
            fresh = sv.plain_average_prototypes(proto_msgs)

        present = set(schedule.margins)
        previous = self.global_prototypes
        out = np.full((s, cfg.feature_dim), np.nan)
        for c in range(s):
            if c in present or previous is None or not np.isfinite(previous[c]).all():
                if c in fresh:
                    out[c] = fresh[c]
            else:
                out[c] = previous[c]
        if not np.isfinite(out).all():
            missing = [c for c in range(s) if not np.isfinite(out[c]).all()]
            raise DomainError(f"no global prototype available yet for classes {missing}")
        self.global_prototypes = out
        return out, trace

    def _distill_phase(self, t: int) -> list[dict[str, float]]:
        cfg = self.config
        with no_grad():
            server_logits = self.server_model.logits(self.public.features).data
        logits_msg = ServerLogits(server_logits)
        proto_msg = ServerPrototypes(self.global_prototypes)
        for node in self.clients:
            self._log_message(t, "server", f"client{node.client_id}", logits_msg)
            self._log_message(t, "server", f"client{node.client_id}", proto_msg)

        def distill(node: cl.ClientNode) -> dict[str, float]:
            return cl.distill_from_server(node.model, self.public, logits_msg.logits, cfg.eta, cfg.ep_distill,
                                          cfg.bs, derive_seed(cfg.seed, node.client_id, t, _DISTILL),
                                          cfg.lr_client, cfg.momentum)

        return self._fan_out(distill)

    def _record(self, t, local, actsp_trace, server_trace, distill, schedule, protos) -> RoundRecord:
        losses = {k: math.nan for k in LOSS_KEYS}
        for traces in (local, distill):
            keys = {k for tr in traces for k in tr}
            for k in keys:
                vals = [tr[k] for tr in traces if k in tr]
                losses[k] = float(np.mean(vals))
        for tr in (actsp_trace, server_trace):
            losses.update({k: float(v) for k, v in tr.items()})
        per_class, global_margin = prototype_margin(protos)
        return RoundRecord(
            t=t,
            margins=[schedule.margins.get(c, math.nan) for c in range(self.num_classes)],
            prototype_margins=[per_class[c] for c in range(self.num_classes)],
            global_margin=global_margin,
            server_acc=evaluate(self.server_model, self.test),
            client_accs=[evaluate(node.model, node.test) for node in self.clients],
            losses=losses,
            local_phase="initial" if t == 0 else "regularized",
        )

    # -- whole run ---------------------------------------------------------

    def run(self) -> ExperimentResult:
        records = []
        for t in range(self.config.rounds):
            records.append(self.run_round(t))
            log.debug("round %d: server_acc=%.4f margin=%.4f", t, records[-1].server_acc,
                      records[-1].global_margin)
        return ExperimentResult(self.config, records, summarize(records, self.initial_server_acc),
                                dict(self.timings), list(self.audit), list(self.messages))


def summarize(records: Sequence[RoundRecord], initial_server_acc: float | None = None) -> dict:
    if not records:
        raise DomainError("no rounds were run")
    server = [r.server_acc for r in records]
    clients = [r.mean_client_acc for r in records]
    return {
        "rounds": len(records),
        "initial_server_acc": initial_server_acc,
        "final_server_acc": server[-1],
        "best_server_acc": max(server),
        "final_mean_client_acc": clients[-1],
        "best_mean_client_acc": max(clients),
        "final_global_margin": records[-1].global_margin,
        "global_margin_trajectory": [r.global_margin for r in records],
        "class_margin_trajectory": [list(r.margins) for r in records],
    }


def run_experiment(config: ExperimentConfig, **kwargs) -> ExperimentResult:
    """Validate ``config`` and run all of its rounds."""
    return Simulation(config, **kwargs).run()


def synthetic_benchmark(method: str = "fedprotokd", seed: int = 0, alpha: float = 0.1,
                        rounds: int = 20, **overrides) -> ExperimentConfig:
    """Desk-scale benchmark: 6 Gaussian classes in 8-D, 10 clients, K = 8."""
    base = dict(
        method=method, seed=seed, rounds=rounds, clients=10,
        classes=6, features=8, n_per_class=250, spread=1.0, separation=3.0,
        test_fraction=0.2, public_n=300, partition="dirichlet", alpha=alpha, feature_dim=8,
    )
    base.update(overrides)
    return ExperimentConfig(**base)
