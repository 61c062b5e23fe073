"""Dense LoRA arithmetic: merged, unmerged and multi-adapter batched forward.

Matrices are plain 2-D ``float64`` numpy arrays. A batch of inputs is laid out
column-wise, shape ``(d, batch)``, so the shared base term is a single
``W @ X`` product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .exceptions import ShapeError


def as_matrix(m, name="matrix"):
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(m1, m2):
    """Matrix product with explicit shape checking.

    A zero inner dimension is rejected rather than silently producing zeros.
    """
    a = as_matrix(m1, "m1")
    b = as_matrix(m2, "m2")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if a.shape[1] == 0:
        raise ShapeError("zero inner dimension")
    return a @ b


@dataclass(frozen=True)
class LoraPair:
    """Low-rank update ``scale * B @ A`` for one ``d x d`` weight."""

    a: np.ndarray  # (rank, d)
    b: np.ndarray  # (d, rank)
    scale: float = 1.0

    def __post_init__(self):
        a = as_matrix(self.a, "A")
        b = as_matrix(self.b, "B")
        rank, d = a.shape
        if b.shape != (d, rank):
            raise ShapeError(f"B must be {(d, rank)}, got {b.shape}")
        if not 0 < rank < d:
            raise ShapeError(f"rank must satisfy 0 < r < d, got r={rank}, d={d}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def rank(self):
        return self.a.shape[0]

    @property
    def dim(self):
        return self.a.shape[1]

    def delta(self):
        return self.scale * (self.b @ self.a)


@dataclass(frozen=True)
class UBatch:
    """Samples of one batch that share an adapter."""

    adapter_id: Hashable
    sample_indices: list[int] = field(default_factory=list)


def _check_square(w, p):
    w = as_matrix(w, "W")
    if w.shape != (p.dim, p.dim):
        raise ShapeError(f"W must be {(p.dim, p.dim)} to match adapter, got {w.shape}")
    return w


def merge_adapter(w, p: LoraPair):
    """Return ``W + scale * B @ A`` as a new array."""
    w = _check_square(w, p)
    return w + p.delta()


def unmerge_adapter(w, p: LoraPair):
    """Inverse of :func:`merge_adapter`, by subtraction (exact up to rounding)."""
    w = _check_square(w, p)
    return w - p.delta()


def unmerged_forward(w, p: LoraPair, x):
    """``W @ x + scale * B @ (A @ x)`` without materialising ``B @ A``."""
    w = _check_square(w, p)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != p.dim:
        raise ShapeError(f"x must have leading dimension {p.dim}, got {x.shape}")
    return w @ x + p.scale * (p.b @ (p.a @ x))


def group_by_adapter(assignments: Sequence[Hashable]) -> list[UBatch]:
    """Group sample positions by adapter id, in order of first occurrence."""
    groups: dict[Hashable, list[int]] = {}
    for i, adapter_id in enumerate(assignments):
        groups.setdefault(adapter_id, []).append(i)
    return [UBatch(k, v) for k, v in groups.items()]


def batch_lora_forward(
    w,
    adapters: Mapping[Hashable, LoraPair],
    assignments: Sequence[Hashable],
    x,
):
    """Forward a column batch where each sample may use a different adapter.

    The base term is one ``W @ X`` over the whole batch. LoRA terms are
    computed once per u-batch: inputs are gathered, pushed through ``A`` then
    ``B``, and scattered back to their original columns. A ``None`` assignment
    means "base weights only" for that sample.
    """
    w = as_matrix(w, "W")
    x = as_matrix(x, "X")
    d = w.shape[1]
    if x.shape[0] != d:
        raise ShapeError(f"X must have {d} rows, got {x.shape[0]}")
    if len(assignments) != x.shape[1]:
        raise ShapeError(
            f"{len(assignments)} assignments for a batch of {x.shape[1]} samples"
        )
    y = w @ x
    for ub in group_by_adapter(assignments):
        if ub.adapter_id is None:
            continue
        try:
            p = adapters[ub.adapter_id]
        except KeyError:
            raise KeyError(f"unknown adapter id {ub.adapter_id!r}") from None
        if p.dim != d or w.shape[0] != d:
            raise ShapeError(f"adapter {ub.adapter_id!r} has dim {p.dim}, W is {w.shape}")
        idx = ub.sample_indices
        xg = x[:, idx]
        y[:, idx] += p.scale * (p.b @ (p.a @ xg))
    return y
