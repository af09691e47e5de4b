"""Server side: logit aggregation, prototype aggregation baselines, the
trainable margin-based prototype generator, public-sample importance and
dual-distillation training of the server model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .client import ClientModel, pseudo_labels, run_sgd
from .errors import ConfigurationError, DomainError, ShapeError
from .nn_core import (
    DenseNet,
    Tensor,
    cross_entropy,
    kl_divergence,
    mse,
    neg,
    no_grad,
    reshape,
    sqrt,
    square,
    sub,
    tsum,
)
from .protocol import ClientLogits, ClientPrototypes

# ---------------------------------------------------------------------------
# logits
# ---------------------------------------------------------------------------


@dataclass
class AggregatedLogits:
    logits: np.ndarray          # [n x S]
    weights: np.ndarray         # [n x C], rows sum to 1
    uniform_fallback: np.ndarray  # [n] bool, rows whose variance sum was zero


def aggregate_logits(per_client: Sequence[ClientLogits | np.ndarray]) -> AggregatedLogits:
    """Per sample, weight each client's row by its population variance share."""
    if not per_client:
        raise DomainError("need logits from at least one client")
    mats = [np.asarray(m.logits if isinstance(m, ClientLogits) else m, dtype=np.float64) for m in per_client]
    shape = mats[0].shape
    if any(m.shape != shape for m in mats) or len(shape) != 2:
        raise ShapeError(f"client logit matrices differ in shape: {[m.shape for m in mats]}")
    stack = np.stack(mats)                      # [C, n, S]
    var = stack.var(axis=2)                     # [C, n]
    total = var.sum(axis=0)                     # [n]
    fallback = total <= 0
    safe = np.where(fallback, 1.0, total)
    weights = np.where(fallback[None, :], 1.0 / len(mats), var / safe[None, :])
    logits = np.einsum("cn,cns->ns", weights, stack)
    return AggregatedLogits(logits, weights.T.copy(), fallback)


# ---------------------------------------------------------------------------
# prototype aggregation
# ---------------------------------------------------------------------------

def weighted_average_prototypes(protos: Sequence[ClientPrototypes]) -> dict[int, np.ndarray]:
    """Sample-count weighted mean per class. Needs released counts."""
    sums: dict[int, np.ndarray] = {}
    totals: dict[int, int] = {}
    for p in protos:
        counts = p.counts
        for cls, vec in p.vectors.items():
            n = counts[cls]
            sums[cls] = sums.get(cls, 0.0) + n * vec
            totals[cls] = totals.get(cls, 0) + n
    return {cls: sums[cls] / totals[cls] for cls in sorted(sums)}


def class_centers(protos: Sequence[ClientPrototypes]) -> dict[int, np.ndarray]:
    """Unweighted mean over the clients holding each class."""
    grouped: dict[int, list[np.ndarray]] = {}
    for p in protos:
        for cls, vec in p.vectors.items():
            grouped.setdefault(cls, []).append(vec)
    return {cls: np.mean(grouped[cls], axis=0) for cls in sorted(grouped)}


# Plain averaging of client prototypes is the same computation.
plain_average_prototypes = class_centers


@dataclass
class MarginSchedule:
    margins: dict[int, float]
    zeta: float
    centers: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def max_margin(self) -> float:
        return max(self.margins.values())


def _pairwise_distances(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def adaptive_margins(centers: Mapping[int, np.ndarray], zeta: float) -> MarginSchedule:
    """Per class, distance to the nearest other class center, clamped at ``zeta``."""
    if not zeta > 0:
        raise DomainError(f"zeta must be positive, got {zeta}")
    classes = sorted(centers)
    if len(classes) < 2:
        raise DomainError("margins need at least two classes")
    dist = _pairwise_distances(np.stack([np.asarray(centers[c], dtype=np.float64) for c in classes]))
    np.fill_diagonal(dist, np.inf)
    nearest = dist.min(axis=1)
    margins = {c: float(min(m, zeta)) for c, m in zip(classes, nearest)}
    return MarginSchedule(margins, float(zeta), {c: np.asarray(centers[c]) for c in classes})


def fixed_margin(schedule: MarginSchedule) -> float:
    """Single margin shared by all classes: the largest class-wise one (already clamped)."""
    return schedule.max_margin


# ---------------------------------------------------------------------------
# trainable server prototypes
# ---------------------------------------------------------------------------


class TrainableServerPrototypes:
    """Trainable base vectors pushed through a shared two-layer generator."""

    def __init__(self, num_classes: int, dim: int, rng: np.random.Generator, hidden: int | None = None) -> None:
        self.num_classes = num_classes
        self.dim = dim
        self.base = Tensor(rng.standard_normal((num_classes, dim)), requires_grad=True)
        self.generator = DenseNet.build([dim, hidden or dim, dim], rng)

    def parameters(self) -> list[Tensor]:
        return [self.base, *self.generator.parameters()]

    def forward(self) -> Tensor:
        return self.generator(self.base)

    def emit(self) -> np.ndarray:
        with no_grad():
            return self.forward().data.copy()


def stack_prototypes(protos: Sequence[ClientPrototypes]) -> tuple[np.ndarray, np.ndarray]:
    vectors, labels = [], []
    for p in protos:
        for cls in p.classes:
            vectors.append(p.vectors[cls])
            labels.append(cls)
    if not vectors:
        raise DomainError("no client prototypes received")
    return np.stack(vectors), np.asarray(labels, dtype=np.int64)


def margin_vector(margins, num_classes: int) -> np.ndarray:
    """Per-class margins as a length-S array; classes without a margin get 0."""
    if isinstance(margins, MarginSchedule):
        margins = margins.margins
    if isinstance(margins, Mapping):
        out = np.zeros(num_classes)
        for c, m in margins.items():
            out[int(c)] = m
        return out
    if np.isscalar(margins):
        return np.full(num_classes, float(margins))
    out = np.asarray(margins, dtype=np.float64)
    if out.shape != (num_classes,):
        raise ShapeError(f"margin vector must have length {num_classes}")
    return out


def actsp_loss(emitted, vectors: np.ndarray, labels: np.ndarray, margins: np.ndarray) -> Tensor:
    """Margin contrastive loss averaged over the given client prototypes.

    For a prototype of class c the score of class c is ``-(dist + margin_c)``
    and every other class scores ``-dist``; the loss is the cross-entropy of
    these scores against c.
    """
    emitted = emitted if isinstance(emitted, Tensor) else Tensor(emitted)
    n_classes, dim = emitted.shape
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if vectors.ndim != 2 or vectors.shape[1] != dim:
        raise ShapeError(f"prototype dim {vectors.shape} does not match emitted {emitted.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ConfigurationError(f"received prototypes for classes outside [0, {n_classes})")
    diff = sub(vectors[:, None, :], reshape(emitted, (1, n_classes, dim)))
    dist = sqrt(tsum(square(diff), axis=2))                     # [B, S]
    penalty = np.zeros((labels.size, n_classes))
    penalty[np.arange(labels.size), labels] = margins[labels]
    scores = neg(dist) - penalty
    return cross_entropy(scores, labels)


def actsp_train(
    tsp: TrainableServerPrototypes,
    protos: Sequence[ClientPrototypes],
    margins,
    epochs: int = 100,
    batch_size: int = 32,
    seed: int = 0,
    lr: float = 0.01,
    momentum: float = 0.9,
) -> tuple[np.ndarray, dict[str, float]]:
    """Train base vectors and generator on all received prototypes.

    ``margins`` is a :class:`MarginSchedule`, a class->margin mapping, an
    array of length S, or one scalar shared by every class.
    """
    vectors, labels = stack_prototypes(protos)
    if labels.max() >= tsp.num_classes:
        raise ConfigurationError(f"prototype class {labels.max()} has no trainable server prototype")
    m = margin_vector(margins, tsp.num_classes)

    def loss_fn(idx):
        loss = actsp_loss(tsp.forward(), vectors[idx], labels[idx], m)
        return loss, {"actsp": loss.item()}

    trace = run_sgd(tsp.parameters(), labels.size, loss_fn, epochs, batch_size, seed, lr, momentum)
    return tsp.emit(), trace


def fixed_margin_loss(tsp: TrainableServerPrototypes, protos: Sequence[ClientPrototypes], xi_fixed: float) -> float:
    vectors, labels = stack_prototypes(protos)
    with no_grad():
        return actsp_loss(tsp.forward(), vectors, labels, margin_vector(xi_fixed, tsp.num_classes)).item()


def classwise_margin_loss(tsp: TrainableServerPrototypes, protos: Sequence[ClientPrototypes], margins) -> float:
    vectors, labels = stack_prototypes(protos)
    with no_grad():
        return actsp_loss(tsp.forward(), vectors, labels, margin_vector(margins, tsp.num_classes)).item()


# ---------------------------------------------------------------------------
# public-sample importance
# ---------------------------------------------------------------------------


@dataclass
class ImportanceScores:
    pseudo_labels: np.ndarray
    distance: np.ndarray
    inverse_distance: np.ndarray
    normalized: np.ndarray
    median: float
    sigmoid_factor: np.ndarray
    weights: np.ndarray
    phi: float
    steepness: float
    epsilon_guard: float
    degenerate: bool = False


def prototype_matrix(prototypes, num_classes: int) -> np.ndarray:
    """Class-indexed ``[S x K]`` array from a mapping or array; every class must be present."""
    if isinstance(prototypes, Mapping):
        missing = [c for c in range(num_classes) if c not in prototypes]
        if missing:
            raise ConfigurationError(f"no global prototype for classes {missing}")
        return np.stack([np.asarray(prototypes[c], dtype=np.float64) for c in range(num_classes)])
    mat = np.asarray(prototypes, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != num_classes or not np.isfinite(mat).all():
        raise ConfigurationError(f"global prototypes of shape {mat.shape} do not cover {num_classes} classes")
    return mat


def importance_scores(
    agg,
    features: np.ndarray,
    prototypes,
    phi: float = 0.8,
    steepness: float = 10.0,
    epsilon_guard: float = 1e-8,
) -> ImportanceScores:
    """Per-sample weights from the distance of each public feature to the
    prototype of its pseudo-label.

    Pipeline: argmax of aggregated logits -> Euclidean distance -> inverse
    distance ``1/(d + eps)`` -> min-max normalisation -> sigmoid factor
    centred on the median -> ``phi*(1 + dhat) + (1 - phi)*E``.
    """
    logits = agg.logits if isinstance(agg, AggregatedLogits) else np.asarray(agg, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if not 0 <= phi <= 1:
        raise DomainError(f"phi must lie in [0, 1], got {phi}")
    if logits.ndim != 2 or features.ndim != 2 or logits.shape[0] != features.shape[0]:
        raise ShapeError(f"logits {logits.shape} and features {features.shape} are not aligned")
    if not np.isfinite(logits).all():
        raise DomainError("aggregated logits contain non-finite entries")
    protos = prototype_matrix(prototypes, logits.shape[1])
    if protos.shape[1] != features.shape[1]:
        raise ShapeError(f"prototype dim {protos.shape[1]} != feature dim {features.shape[1]}")

    labels = pseudo_labels(logits)
    diff = features - protos[labels]
    distance = np.sqrt((diff * diff).sum(axis=1))
    inverse = 1.0 / (distance + epsilon_guard)
    lo, hi = inverse.min(), inverse.max()
    degenerate = not hi > lo
    if degenerate:
        normalized = np.full_like(inverse, 0.5)
    else:
        normalized = (inverse - lo) / (hi - lo)
    median = float(np.median(normalized))
    sigmoid_factor = 1.0 - 1.0 / (1.0 + np.exp(-steepness * (normalized - median)))
    weights = phi * (1.0 + normalized) + (1.0 - phi) * sigmoid_factor
    return ImportanceScores(labels, distance, inverse, normalized, median, sigmoid_factor,
                            weights, phi, steepness, epsilon_guard, degenerate)


# ---------------------------------------------------------------------------
# server model
# ---------------------------------------------------------------------------


def server_kd_train(
    model: ClientModel,
    public_features: np.ndarray,
    agg,
    scores: ImportanceScores,
    prototypes,
    upsilon: float = 0.5,
    epochs: int = 10,
    batch_size: int = 32,
    seed: int = 0,
    lr: float = 0.01,
    momentum: float = 0.9,
) -> dict[str, float]:
    """``upsilon`` x (KL(agg || server) + importance-weighted pseudo-label CE)
    + (1 - upsilon) x MSE(server feature, prototype of the pseudo-label)."""
    x = np.asarray(public_features, dtype=np.float64)
    teacher = agg.logits if isinstance(agg, AggregatedLogits) else np.asarray(agg, dtype=np.float64)
    n = x.shape[0]
    if teacher.shape[0] != n or scores.weights.shape != (n,) or scores.pseudo_labels.shape != (n,):
        raise ShapeError("public features, aggregated logits and importance scores are misaligned")
    protos = prototype_matrix(prototypes, teacher.shape[1])
    labels = scores.pseudo_labels
    weights = scores.weights
    targets = protos[labels]

    def loss_fn(idx):
        feats, logits = model.forward(x[idx])
        kl = kl_divergence(teacher[idx], logits)
        ce = cross_entropy(logits, labels[idx], sample_weights=weights[idx])
        pl = mse(feats, targets[idx])
        kd = kl + ce
        if upsilon == 1.0:
            loss = kd
        elif upsilon == 0.0:
            loss = pl
        else:
            loss = upsilon * kd + (1.0 - upsilon) * pl
        return loss, {"server_kl": kl.item(), "server_ce": ce.item(), "server_pl": pl.item()}

    return run_sgd(model.parameters(), n, loss_fn, epochs, batch_size, seed, lr, momentum)


def server_objective(model: ClientModel, public_features, agg, scores: ImportanceScores, prototypes,
                     upsilon: float = 0.5) -> dict[str, float]:
    """Full-set value of the server objective and its terms (no tape)."""
    teacher = agg.logits if isinstance(agg, AggregatedLogits) else np.asarray(agg, dtype=np.float64)
    protos = prototype_matrix(prototypes, teacher.shape[1])
    with no_grad():
        feats, logits = model.forward(np.asarray(public_features, dtype=np.float64))
        kl = kl_divergence(teacher, logits).item()
        ce = cross_entropy(logits, scores.pseudo_labels, sample_weights=scores.weights).item()
        pl = mse(feats, protos[scores.pseudo_labels]).item()
    return {"kl": kl, "ce": ce, "pl": pl, "total": upsilon * (kl + ce) + (1 - upsilon) * pl}

