"""Exhaustive cosine-similarity index over image feature vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from capforge.errors import ContractError


@dataclass
class FeatureIndex:
    ids: list[str]
    vectors: np.ndarray
    metric: str = "cosine"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ContractError("need one feature vector per id")
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("index ids must be unique")
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        self._unit = np.divide(self.vectors, norms, out=np.zeros_like(self.vectors), where=norms > 0)
        self._position = {k: i for i, k in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def vector(self, sample_id: str) -> np.ndarray:
        return self.vectors[self._position[sample_id]]


def nearest_images(index: FeatureIndex, query, k: int, query_id: str | None = None) -> list[str]:
    """Ids of the ``k`` most cosine-similar entries, best first, ties by ascending id.

    The query's own entry is skipped: the entry named ``query_id`` if given,
    otherwise any entry whose vector equals ``query`` exactly.
    """
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ContractError(f"query has shape {query.shape}, index dimension is {index.dim}")
    if k < 0:
        raise ContractError("k must be >= 0")
    norm = np.linalg.norm(query)
    if norm == 0:
        raise ContractError("zero-norm query has no cosine similarity")
    if k == 0 or len(index) == 0:
        return []
    sims = index._unit @ (query / norm)
    if query_id is not None:
        keep = np.array([i != query_id for i in index.ids])
    else:
        keep = ~np.all(index.vectors == query, axis=1)
    cand = np.flatnonzero(keep)
    ids = np.array(index.ids, dtype=object)[cand]
    order = sorted(range(len(cand)), key=lambda j: (-sims[cand[j]], ids[j]))
    return [ids[j] for j in order[:k]]
