"""Immutable messages exchanged between clients and the server at round barriers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import PrivacyError


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ClientLogits:
    """Pre-softmax scores of one client on the public set, ``[|D_p| x S]``."""

    client_id: int
    logits: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "logits", _frozen(self.logits))


@dataclass(frozen=True)
class ClientPrototypes:
    """Per-class mean projected features of one client.

    Sample counts travel only when the client agreed to release them;
    otherwise reading :attr:`counts` raises :class:`PrivacyError`.
    """

    client_id: int
    vectors: Mapping[int, np.ndarray]
    _counts: Mapping[int, int] | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vectors", {int(c): _frozen(v) for c, v in self.vectors.items()})
        if self._counts is not None:
            object.__setattr__(self, "_counts", {int(c): int(n) for c, n in self._counts.items()})

    @property
    def classes(self) -> list[int]:
        return sorted(self.vectors)

    @property
    def has_counts(self) -> bool:
        return self._counts is not None

    @property
    def counts(self) -> Mapping[int, int]:
        if self._counts is None:
            raise PrivacyError(f"client {self.client_id} did not release per-class sample counts")
        return self._counts

    def without_counts(self) -> "ClientPrototypes":
        return ClientPrototypes(self.client_id, self.vectors)


@dataclass(frozen=True)
class ServerLogits:
    logits: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "logits", _frozen(self.logits))


@dataclass(frozen=True)
class ServerPrototypes:
    """Global prototypes, one row per class."""

    vectors: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "vectors", _frozen(self.vectors))
