"""Weighted coresets via k-medoids over pairwise gradient-distance matrices.

Distance matrices come in three kinds: exact per-sample gradient distances,
raw-feature Euclidean distances (valid proxy for convex models, independent of
the parameters), and last-layer gradient distances (neural-network proxy).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

EXACT = "exact"
EUCLID_PROXY = "euclid_proxy"
LASTLAYER_PROXY = "lastlayer_proxy"
DIST_KINDS = (EXACT, EUCLID_PROXY, LASTLAYER_PROXY)


@dataclass(frozen=True)
class DistMatrix:
    values: np.ndarray  # (n, n) symmetric, nonnegative, zero diagonal
    kind: str

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def validate(self) -> None:
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("distance matrix must be square")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("distances must be finite and nonnegative")
        if not np.allclose(v, v.T):
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.diagonal(v) != 0):
            raise ValueError("diagonal must be zero")


@dataclass(frozen=True)
class Coreset:
    medoids: np.ndarray  # (k,) sample indices, in solver order
    weights: np.ndarray  # (k,) cluster sizes aligned with medoids
    assignment: np.ndarray  # (n,) position into medoids per sample
    objective: float
    kind: str

    def view(self):
        from .models import WeightedView

        # Duplicate points can leave a medoid with zero assigned samples; it
        # contributes nothing to the weighted gradient, so drop it here.
        keep = self.weights > 0
        return WeightedView(
            self.medoids[keep].astype(np.int64), self.weights[keep].astype(np.float64)
        )


def budget(m: int, c: float, tau: float, e_epochs: int) -> int:
    """Coreset size affordable after one full-set epoch: floor((c*tau - m)/(E-1)).

    Capped at m; a nonpositive result signals the extreme-straggler fallback.
    """
    if e_epochs < 2:
        raise ValueError("budget requires E >= 2")
    if c <= 0 or tau <= 0:
        raise ValueError("c and tau must be positive")
    if math.isinf(tau):
        return m
    return min(int(math.floor((c * tau - m) / (e_epochs - 1))), m)


def _pairwise(arr: np.ndarray, kind: str) -> DistMatrix:
    arr = np.ascontiguousarray(np.atleast_2d(np.asarray(arr, dtype=np.float64)))
    d = cdist(arr, arr)
    np.fill_diagonal(d, 0.0)
    return DistMatrix(d, kind)


def dist_exact(grads) -> DistMatrix:
    """Pairwise 2-norm distances between per-sample gradients."""
    return _pairwise(grads, EXACT)


def dist_euclid_proxy(features) -> DistMatrix:
    """Pairwise feature distances; parameter-independent, so precomputable."""
    return _pairwise(features, EUCLID_PROXY)


def dist_lastlayer_proxy(llgrads) -> DistMatrix:
    """Pairwise distances between last-layer gradients (c1=1, c2=0 scaling).

    The medoid argmin is invariant to any affine rescaling c1>0, c2>=0 of the
    entries, so only the unscaled base distances matter for selection.
    """
    return _pairwise(llgrads, LASTLAYER_PROXY)


def _chunked_colsum(d: np.ndarray, row_fn, chunk: int = 512) -> np.ndarray:
    """Accumulate row_fn(D[block], block_index_range) column sums over row blocks."""
    n = d.shape[0]
    out = np.zeros(n)
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        out += row_fn(d[lo:hi], lo, hi)
    return out


def _build_greedy(d: np.ndarray, k: int) -> tuple[list[int], np.ndarray]:
    """Greedy initialization: repeatedly add the point minimizing the objective."""
    n = d.shape[0]
    first = int(np.argmin(d.sum(axis=1)))
    medoids = [first]
    nearest = d[first].copy()
    if k == 1:
        return medoids, nearest
    # gains[c] = objective drop if c were added; kept incrementally up to date.
    gains = _chunked_colsum(d, lambda blk, lo, hi: np.maximum(nearest[lo:hi, None] - blk, 0.0).sum(axis=0))
    while len(medoids) < k:
        gains[medoids] = -np.inf
        # exact gain ties are generic (two points improving only each other);
        # break them to the lowest index despite float accumulation noise
        gmax = float(gains.max())
        c = int(np.flatnonzero(gains >= gmax - 1e-11 * max(1.0, abs(gmax)))[0])
        new_near = d[c]
        changed = np.flatnonzero(new_near < nearest)
        if len(changed):
            old = nearest[changed, None]
            new = new_near[changed, None]
            gains += (np.maximum(new - d[changed], 0.0) - np.maximum(old - d[changed], 0.0)).sum(axis=0)
            nearest[changed] = new_near[changed]
        medoids.append(c)
    return medoids, nearest


def _nearest_two(d: np.ndarray, medoids: list[int]):
    cols = d[:, medoids]
    pos = np.argmin(cols, axis=1)
    d1 = cols[np.arange(len(cols)), pos]
    if len(medoids) == 1:
        d2 = np.full(len(cols), np.inf)
    else:
        d2 = np.partition(cols, 1, axis=1)[:, 1]
    return pos, d1, d2


def kmedoids(dist: DistMatrix, k: int, rng=None) -> Coreset:
    """Greedy-build k-medoids refined by first-improvement swap local search.

    Scans (medoid, candidate) pairs in ascending index order and applies the
    first strictly improving swap until none exists; the solver is fully
    deterministic (``rng`` is accepted for interface stability and unused).
    """
    d = dist.values
    n = d.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")

    if k == n:  # every point is its own medoid; objective is exactly zero
        weights, pos = assign_to_medoids(d)
        return Coreset(
            medoids=np.arange(n, dtype=np.int64),
            weights=weights,
            assignment=pos,
            objective=float(d[np.arange(n), pos].sum()),
            kind=dist.kind,
        )

    medoids, _ = _build_greedy(d, k)
    pos, d1, d2 = _nearest_two(d, medoids)
    objective = float(d1.sum())

    while True:
        tol = 1e-10 * max(1.0, objective)
        # shared candidate term: sum_j min(D[j,c] - d1_j, 0)
        base = _chunked_colsum(
            d, lambda blk, lo, hi: np.minimum(blk - d1[lo:hi, None], 0.0).sum(axis=0)
        )
        in_set = np.zeros(n, dtype=bool)
        in_set[medoids] = True
        applied = False
        for r_pos in sorted(range(k), key=lambda p: medoids[p]):
            rows = pos == r_pos
            if rows.any():
                reassigned = (
                    np.minimum(d[rows], d2[rows, None]).sum(axis=0) - d1[rows].sum()
                )
                others = base - np.minimum(d[rows] - d1[rows, None], 0.0).sum(axis=0)
            else:
                reassigned = 0.0
                others = base
            delta = others + reassigned
            delta[in_set] = np.inf
            improving = delta < -tol
            if improving.any():
                c = int(np.argmax(improving))
                medoids[r_pos] = c
                pos, d1, d2 = _nearest_two(d, medoids)
                objective = float(d1.sum())
                applied = True
                break
        if not applied:
            break

    weights = np.bincount(pos, minlength=k).astype(np.int64)
    return Coreset(
        medoids=np.asarray(medoids, dtype=np.int64),
        weights=weights,
        assignment=pos.astype(np.int64),
        objective=objective,
        kind=dist.kind,
    )


def assign_to_medoids(dist_cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-medoid assignment from an (n, k) distance block.

    Ties go to the lowest medoid position; weights are cluster cardinalities.
    """
    pos = np.argmin(dist_cols, axis=1)
    weights = np.bincount(pos, minlength=dist_cols.shape[1]).astype(np.int64)
    return weights, pos.astype(np.int64)


def coreset_weights(dist: DistMatrix, medoids) -> tuple[np.ndarray, np.ndarray]:
    """Cluster cardinalities and assignment for a fixed medoid set."""
    medoids = np.asarray(medoids, dtype=np.int64)
    if len(medoids) == 0:
        raise ValueError("medoids must be nonempty")
    return assign_to_medoids(dist.values[:, medoids])


def coreset_error(full_grads, cs: Coreset) -> float:
    """Normalized gradient error (1/m) * ||sum_j g_j - sum_k delta_k g_k||."""
    grads = np.asarray(full_grads, dtype=np.float64)
    m = grads.shape[0]
    total = grads.sum(axis=0)
    core = (cs.weights[:, None] * grads[cs.medoids]).sum(axis=0)
    return float(np.linalg.norm(total - core)) / m


def dump_dist(dist: DistMatrix) -> str:
    """Human-readable debug dump; not a load-bearing format."""
    rows = "\n".join(
        " ".join(f"{v:.6g}" for v in row) for row in dist.values
    )
    return f"distmatrix kind={dist.kind} n={dist.n}\n{rows}\n"


def dump_coreset(cs: Coreset) -> str:
    """Human-readable debug dump; not a load-bearing format."""
    pairs = " ".join(f"{m}:{w}" for m, w in zip(cs.medoids, cs.weights))
    return (
        f"coreset kind={cs.kind} k={len(cs.medoids)} objective={cs.objective!r}\n"
        f"medoid:weight {pairs}\n"
        f"assignment {' '.join(map(str, cs.assignment))}\n"
    )
