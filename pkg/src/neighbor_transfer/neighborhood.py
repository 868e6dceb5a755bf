"""Similarity kernel, exact k-NN index over projected embeddings, batch assembly."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tensor, apply


class StaleIndexError(RuntimeError):
    pass


class ProjectionCollapseError(ValueError):
    """An embedding has zero norm, so cosine similarity is undefined."""


def similarity(e_i, e_j) -> float:
    """K_ij = max(0, cos(e_i, e_j))."""
    u = np.asarray(e_i, dtype=np.float64)
    v = np.asarray(e_j, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"similarity: width mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ProjectionCollapseError("zero-norm embedding")
    return max(0.0, float(u @ v) / (nu * nv))


def similarity_tensor(e_i: Tensor, e_j: Tensor) -> Tensor:
    """Differentiable K for matching rows of two embedding tensors."""
    try:
        cos = apply("cosine", e_i, e_j)
    except ValueError as err:
        if "zero-norm" in str(err):
            raise ProjectionCollapseError(str(err)) from err
        raise
    return apply("clamp_min", cos, floor=0.0)


@dataclass
class NeighborIndex:
    neighbors: np.ndarray  # (M, N) example ids, best first
    weights: np.ndarray  # (M, N) cached K used for selection only
    version: int = 0

    @property
    def n(self) -> int:
        return self.neighbors.shape[1]

    def __eq__(self, other):
        return (isinstance(other, NeighborIndex)
                and np.array_equal(self.neighbors, other.neighbors)
                and np.array_equal(self.weights, other.weights))

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["example_id", "rank", "neighbor_id", "K"])
            for i, (ids, ks) in enumerate(zip(self.neighbors, self.weights)):
                for rank, (j, k) in enumerate(zip(ids, ks)):
                    w.writerow([i, rank, int(j), repr(float(k))])


@dataclass(frozen=True)
class RefreshPolicy:
    period: int = 100
    n: int = 5
    adaptive: bool = True
    strict: bool = False

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("refresh period must be >= 1")
        if self.n < 0:
            raise ValueError("neighborhood size must be >= 0")


def _unit_rows(embeddings: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(embeddings, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ProjectionCollapseError(f"zero-norm embedding for example {int(bad[0])}")
    return embeddings / norms[:, None]


def build_index(embeddings: np.ndarray, n: int, version: int = 0, chunk: int = 1024) -> NeighborIndex:
    """Exact top-``n`` neighbors by clamped cosine, self excluded, ties to lower id."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    m = embeddings.shape[0]
    if not 1 <= n <= m - 1:
        raise ValueError(f"neighborhood size {n} outside [1, {m - 1}]")
    unit = _unit_rows(embeddings)
    nbrs = np.empty((m, n), dtype=np.int64)
    ks = np.empty((m, n))
    for start in range(0, m, chunk):
        rows = np.arange(start, min(start + chunk, m))
        sims = np.maximum(unit[rows] @ unit.T, 0.0)
        sims[np.arange(rows.size), rows] = -np.inf
        order = np.argsort(-sims, axis=1, kind="stable")[:, :n]
        nbrs[rows] = order
        ks[rows] = np.take_along_axis(sims, order, axis=1)
    return NeighborIndex(nbrs, ks, version)


def refresh(index: NeighborIndex, embeddings: np.ndarray, step: int, policy: RefreshPolicy) -> NeighborIndex:
    if not policy.adaptive or step % policy.period != 0:
        return index
    return build_index(embeddings, index.n, version=step)


@dataclass
class Batch:
    ids: np.ndarray
    neighbor_ids: np.ndarray  # (B, N); N may be 0
    cached_k: np.ndarray
    features: np.ndarray
    neighbor_features: np.ndarray
    annotations: list
    neighbor_annotations: list  # B lists of N annotation lists
    negatives: list | None = None
    extras: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def n(self) -> int:
        return self.neighbor_ids.shape[1]

    @property
    def pairings(self) -> int:
        """Example-annotation pairings materialized: B * (1 + N)."""
        return self.size * (1 + self.n)


def assemble_batch(dataset, index: NeighborIndex | None, ids, step: int | None = None,
                   policy: RefreshPolicy | None = None) -> Batch:
    """Gather each example with its own labels and its N neighbors' labels.

    Similarities are not attached here: the loss recomputes them from the
    current projection so gradients reach r(.).
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= len(dataset.features)):
        raise IndexError("example id out of range")
    if index is not None and policy is not None and policy.strict and policy.adaptive and step is not None:
        if step - index.version >= policy.period:
            raise StaleIndexError(f"index version {index.version} is stale at step {step}")
    if index is None or index.n == 0:
        nbr = np.zeros((ids.size, 0), dtype=np.int64)
        cached = np.zeros((ids.size, 0))
    else:
        nbr = index.neighbors[ids]
        cached = index.weights[ids]
    feats = dataset.features
    return Batch(
        ids=ids,
        neighbor_ids=nbr,
        cached_k=cached,
        features=feats[ids],
        neighbor_features=feats[nbr],
        annotations=[dataset.annotations[i] for i in ids],
        neighbor_annotations=[[dataset.annotations[j] for j in row] for row in nbr],
    )
