"""Client side: heterogeneous models with a projection layer, local training,
prototype extraction, public-set inference and distillation from the server."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, DomainError, PrivacyError, ShapeError
from .nn_core import (
    SGD,
    DenseNet,
    Tensor,
    cross_entropy,
    kl_divergence,
    minibatches,
    mse,
    no_grad,
)
from .protocol import ClientLogits, ClientPrototypes


@dataclass(frozen=True)
class ArchitectureFamily:
    name: str
    hidden: tuple[int, ...]
    native_dim: int


# Five toy families; native feature dims differ so the projection layer matters.
ARCHITECTURE_FAMILIES: tuple[ArchitectureFamily, ...] = (
    ArchitectureFamily("tiny", (16,), 8),
    ArchitectureFamily("small", (32,), 16),
    ArchitectureFamily("medium", (32, 32), 24),
    ArchitectureFamily("wide", (64,), 32),
    ArchitectureFamily("deep", (64, 64), 48),
)


class ClientModel:
    """Extractor (relu) -> projection to K -> linear head to S.

    ``features`` is the projected activation used for prototypes.
    """

    def __init__(self, extractor: DenseNet, projection: DenseNet, head: DenseNet) -> None:
        if extractor.output_dim != projection.input_dim:
            raise ShapeError("projection input must match the extractor's native dim")
        if projection.output_dim != head.input_dim:
            raise ShapeError("head input must match the projection dim")
        self.extractor = extractor
        self.projection = projection
        self.head = head

    @classmethod
    def build(
        cls,
        input_dim: int,
        family: ArchitectureFamily,
        feature_dim: int,
        num_classes: int,
        rng: np.random.Generator,
    ) -> "ClientModel":
        extractor = DenseNet.build([input_dim, *family.hidden, family.native_dim], rng,
                                   output_activation="relu")
        projection = DenseNet.build([family.native_dim, feature_dim], rng)
        head = DenseNet.build([feature_dim, num_classes], rng)
        return cls(extractor, projection, head)

    @property
    def input_dim(self) -> int:
        return self.extractor.input_dim

    @property
    def feature_dim(self) -> int:
        return self.projection.output_dim

    @property
    def native_dim(self) -> int:
        return self.extractor.output_dim

    @property
    def num_classes(self) -> int:
        return self.head.output_dim

    def forward(self, x) -> tuple[Tensor, Tensor]:
        feats = self.projection(self.extractor(x))
        return feats, self.head(feats)

    def features(self, x) -> Tensor:
        return self.projection(self.extractor(x))

    def logits(self, x) -> Tensor:
        return self.forward(x)[1]

    def parameters(self) -> list[Tensor]:
        return self.extractor.parameters() + self.projection.parameters() + self.head.parameters()

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        n_ext = len(self.extractor.parameters())
        n_proj = len(self.projection.parameters())
        self.extractor.load_state(arrays[:n_ext])
        self.projection.load_state(arrays[n_ext:n_ext + n_proj])
        self.head.load_state(arrays[n_ext + n_proj:])


LossFn = Callable[[np.ndarray], tuple[Tensor, dict[str, float]]]


def run_sgd(
    params: Sequence[Tensor],
    n: int,
    loss_fn: LossFn,
    epochs: int,
    batch_size: int,
    seed: int,
    lr: float,
    momentum: float,
) -> dict[str, float]:
    """Minibatch momentum-SGD loop; returns the mean of every logged term."""
    opt = SGD(params, lr=lr, momentum=momentum)
    rng = np.random.default_rng(seed)
    totals: dict[str, float] = {}
    steps = 0
    for _ in range(epochs):
        for idx in minibatches(n, batch_size, rng):
            loss, terms = loss_fn(idx)
            loss.backward()
            opt.step()
            for key, value in terms.items():
                totals[key] = totals.get(key, 0.0) + value
            steps += 1
    return {key: value / steps for key, value in totals.items()} if steps else {}


def _prototype_matrix(prototypes, num_classes: int, needed: Sequence[int]) -> np.ndarray:
    if isinstance(prototypes, Mapping):
        missing = [c for c in needed if c not in prototypes]
        if missing:
            raise ConfigurationError(f"no server prototype for local classes {missing}")
        dim = len(next(iter(prototypes.values())))
        mat = np.full((num_classes, dim), np.nan)
        for c, v in prototypes.items():
            mat[int(c)] = v
        return mat
    mat = np.asarray(prototypes, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < num_classes:
        raise ConfigurationError(f"server prototypes of shape {mat.shape} do not cover {num_classes} classes")
    bad = [c for c in needed if not np.isfinite(mat[c]).all()]
    if bad:
        raise ConfigurationError(f"no server prototype for local classes {bad}")
    return mat


def local_train_initial(
    model: ClientModel,
    data: Dataset,
    epochs: int = 5,
    batch_size: int = 32,
    seed: int = 0,
    lr: float = 0.01,
    momentum: float = 0.9,
) -> dict[str, float]:
    """Cross-entropy training on private data. Updates ``model`` in place."""
    if data.n == 0:
        raise DomainError("local dataset is empty")
    x, y = data.features, data.labels

    def loss_fn(idx):
        loss = cross_entropy(model.logits(x[idx]), y[idx])
        return loss, {"local_ce": loss.item()}

    return run_sgd(model.parameters(), data.n, loss_fn, epochs, batch_size, seed, lr, momentum)


def local_train_regularized(
    model: ClientModel,
    data: Dataset,
    server_prototypes,
    epsilon: float = 0.5,
    epochs: int = 5,
    batch_size: int = 32,
    seed: int = 0,
    lr: float = 0.01,
    momentum: float = 0.9,
    params: Sequence[Tensor] | None = None,
) -> dict[str, float]:
    """CE plus ``epsilon`` x MSE between projected features and the sample's
    class prototype from the server.

    ``params`` restricts which tensors are updated (default: all of them).
    """
    if data.n == 0:
        raise DomainError("local dataset is empty")
    x, y = data.features, data.labels
    protos = _prototype_matrix(server_prototypes, model.num_classes, np.unique(y).tolist())
    if protos.shape[1] != model.feature_dim:
        raise ShapeError(f"prototype dim {protos.shape[1]} != feature dim {model.feature_dim}")
    targets = protos[y]

    def loss_fn(idx):
        feats, logits = model.forward(x[idx])
        ce = cross_entropy(logits, y[idx])
        reg = mse(feats, targets[idx])
        loss = ce + epsilon * reg
        return loss, {"local_ce": ce.item(), "local_mse": reg.item()}

    trainable = model.parameters() if params is None else params
    return run_sgd(trainable, data.n, loss_fn, epochs, batch_size, seed, lr, momentum)


def compute_prototypes(model: ClientModel, data: Dataset, client_id: int = -1) -> ClientPrototypes:
    """Per-class mean of projected features; absent classes are omitted."""
    if data.n == 0:
        raise DomainError("cannot compute prototypes of an empty dataset")
    with no_grad():
        feats = model.features(data.features).data
    labels = data.labels
    vectors, counts = {}, {}
    for cls in np.unique(labels):
        mask = labels == cls
        vectors[int(cls)] = feats[mask].mean(axis=0)
        counts[int(cls)] = int(mask.sum())
    return ClientPrototypes(client_id, vectors, counts)


def infer_public(model: ClientModel, public: Dataset | np.ndarray) -> np.ndarray:
    """Logits on the public set (no tape)."""
    x = public.features if isinstance(public, Dataset) else np.asarray(public, dtype=np.float64)
    with no_grad():
        return model.logits(x).data


def pseudo_labels(logits: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=1)


def distill_from_server(
    model: ClientModel,
    public: Dataset | np.ndarray,
    server_logits: np.ndarray,
    eta: float = 0.5,
    epochs: int = 1,
    batch_size: int = 32,
    seed: int = 0,
    lr: float = 0.01,
    momentum: float = 0.9,
) -> dict[str, float]:
    """``eta`` x KL(server || client) + (1 - eta) x CE(client, argmax server) on the public set."""
    x = public.features if isinstance(public, Dataset) else np.asarray(public, dtype=np.float64)
    server_logits = np.asarray(server_logits, dtype=np.float64)
    if server_logits.shape[0] != x.shape[0]:
        raise ShapeError(f"server logits have {server_logits.shape[0]} rows, public set has {x.shape[0]}")
    if server_logits.shape[1] != model.num_classes:
        raise ShapeError("server logits class count differs from the client head")
    targets = pseudo_labels(server_logits)

    def loss_fn(idx):
        logits = model.logits(x[idx])
        kl = kl_divergence(server_logits[idx], logits)
        ce = cross_entropy(logits, targets[idx])
        if eta == 1.0:
            loss = kl
        elif eta == 0.0:
            loss = ce
        else:
            loss = eta * kl + (1.0 - eta) * ce
        return loss, {"distill_kl": kl.item(), "distill_ce": ce.item()}

    return run_sgd(model.parameters(), x.shape[0], loss_fn, epochs, batch_size, seed, lr, momentum)


class ClientNode:
    """One simulated participant. Owns its model and private data exclusively."""

    def __init__(
        self,
        client_id: int,
        model: ClientModel,
        train: Dataset,
        test: Dataset,
        release_counts: bool = True,
    ) -> None:
        if train.n == 0:
            raise DomainError(f"client {client_id} has no training data")
        self.client_id = client_id
        self.model = model
        self.train = train
        self.test = test
        self.release_counts = release_counts

    @property
    def classes(self) -> list[int]:
        return np.unique(self.train.labels).tolist()

    def share_logits(self, public: Dataset) -> ClientLogits:
        return ClientLogits(self.client_id, infer_public(self.model, public))

    def share_prototypes(self, include_counts: bool = False) -> ClientPrototypes:
        protos = compute_prototypes(self.model, self.train, self.client_id)
        if not include_counts:
            return protos.without_counts()
        if not self.release_counts:
            raise PrivacyError(f"client {self.client_id} refuses to release per-class sample counts")
        return protos
