"""Caption-to-image reconstruction: pool the hidden trace, map it back to
feature space, and score the result against target image features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capforge.errors import ContractError
from capforge.numerics import Tensor, ops

POOLINGS = ("mean", "max", "last")


@dataclass
class ReconstructorParams:
    w: Tensor
    b: Tensor
    pooling: str = "mean"

    @classmethod
    def init(cls, rng: np.random.Generator, d_h: int = 64, d_v: int = 64, pooling: str = "mean"):
        if pooling not in POOLINGS:
            raise ContractError(f"pooling must be one of {POOLINGS}")
        bound = 1.0 / np.sqrt(d_h)
        return cls(Tensor(rng.uniform(-bound, bound, size=(d_h, d_v)), True, "rec.w"),
                   Tensor(np.zeros(d_v), True, "rec.b"), pooling)

    @property
    def d_v(self) -> int:
        return self.w.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b]


@dataclass
class ReconstructionResult:
    h_c: np.ndarray
    i_r: np.ndarray
    score: float


def pool_hidden(tag: str, trace) -> np.ndarray:
    """Summarize a ``(N_s, d_h)`` trace as one vector: mean, elementwise max, or last state."""
    states = np.asarray(getattr(trace, "states", trace), dtype=np.float64)
    if states.ndim != 2 or len(states) == 0:
        raise ContractError("hidden trace must be a non-empty (steps, d_h) array")
    if tag == "mean":
        return states.mean(axis=0)
    if tag == "max":
        return states.max(axis=0)
    if tag == "last":
        return states[-1].copy()
    raise ContractError(f"unknown pooling {tag!r}")


def pool_batch(tag: str, hidden: Tensor, mask: np.ndarray, lengths: np.ndarray) -> Tensor:
    """Batched pooling of ``(T, B, d_h)`` states where ``mask`` marks real steps."""
    if tag == "mean":
        weights = (mask / lengths[None, :]).astype(np.float64)[:, :, None]
        return ops.sum(hidden * weights, axis=0)
    if tag == "max":
        return ops.masked_max(hidden, mask[:, :, None], axis=0)
    if tag == "last":
        return ops.getitem(hidden, (lengths - 1, np.arange(len(lengths))))
    raise ContractError(f"unknown pooling {tag!r}")


def reconstruct_feature(p: ReconstructorParams, h_c):
    h = h_c if isinstance(h_c, Tensor) else Tensor(h_c)
    if h.shape[-1] != p.w.shape[0]:
        raise ContractError(f"h_c length {h.shape[-1]} != d_h {p.w.shape[0]}")
    out = ops.matmul(h, p.w) + p.b
    return out if isinstance(h_c, Tensor) else out.data


def reconstruction_score(i_r, targets) -> float:
    """R = -(1/|targets|) Σ_j ||I_r - F_j||² / D_v.  Zero only for an exact match of every target."""
    i_r = np.asarray(i_r, dtype=np.float64)
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    if not targets:
        raise ContractError("reconstruction needs at least one target feature")
    if any(t.shape != i_r.shape for t in targets):
        raise ContractError("targets must match the reconstructed feature shape")
    d = i_r.shape[-1]
    return -float(np.mean([np.sum((i_r - t) ** 2) / d for t in targets]))


def score_batch(i_r: Tensor, targets) -> Tensor:
    """Per-row R for a ``(B, D_v)`` reconstruction against a list of ``(B, D_v)`` targets."""
    if not targets:
        raise ContractError("reconstruction needs at least one target feature")
    d = i_r.shape[-1]
    total = None
    for t in targets:
        sq = ops.sum(ops.square(i_r - t), axis=1)
        total = sq if total is None else total + sq
    return total * (-1.0 / (d * len(targets)))


def reconstruct(p: ReconstructorParams, trace, targets) -> ReconstructionResult:
    h_c = pool_hidden(p.pooling, trace)
    i_r = reconstruct_feature(p, h_c)
    return ReconstructionResult(h_c, i_r, reconstruction_score(i_r, targets))
