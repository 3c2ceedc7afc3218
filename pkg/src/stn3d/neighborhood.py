"""Exact k-nearest-neighbor affinity graphs over (3, N) coordinates.

Rows are ordered by ascending squared distance with ties broken by ascending
point index, and a point is never its own neighbor.  The total order makes
graphs reproducible across platforms, so invariance tests can demand exact
index-level equality.

``knn_graph`` selects with a partial partition; ``knn_oracle`` full-sorts each
distance row and shares no code with that selection path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InsufficientPointsError(ValueError):
    """k is out of range for the number of points."""


@dataclass
class AffinityGraph:
    """N x k neighbor-index table defining each point's local neighborhood."""

    idx: np.ndarray

    def __post_init__(self):
        self.idx = np.asarray(self.idx, dtype=np.int64)
        if self.idx.ndim != 2:
            raise ValueError(f"neighbor table must be (N, k), got {self.idx.shape}")

    @property
    def n_points(self) -> int:
        return self.idx.shape[0]

    @property
    def k(self) -> int:
        return self.idx.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, AffinityGraph) and np.array_equal(self.idx, other.idx)


def _as_coords(coords) -> np.ndarray:
    g = np.asarray(getattr(coords, "data", coords), dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != 3:
        raise ValueError(f"coordinates must be (3, N), got {g.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("coordinates contain non-finite values")
    return g


def _sq_dist_rows(g: np.ndarray) -> np.ndarray:
    """Squared distances with the diagonal pre-set to +inf for selection.

    Skips the symmetrization/clipping of the public ``pairwise_sq_dist``;
    row-wise orderings are all the selection paths need, and both knn_graph
    and knn_oracle rank on this same matrix.
    """
    sq = np.einsum("ij,ij->j", g, g)
    d = g.T @ g
    d *= -2.0
    d += sq[:, None]
    d += sq[None, :]
    np.fill_diagonal(d, np.inf)
    return d


def pairwise_sq_dist(coords) -> np.ndarray:
    """All squared Euclidean distances: D[i, j] = ||g_i - g_j||^2.

    Symmetrized and clipped so that D == D.T exactly and the diagonal is zero.
    """
    g = _as_coords(coords)
    sq = (g * g).sum(axis=0)
    d = sq[:, None] + sq[None, :] - 2.0 * (g.T @ g)
    d = 0.5 * (d + d.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _check_k(k: int, n: int) -> None:
    if not 1 <= k <= n - 1:
        raise InsufficientPointsError(f"k={k} requires 1 <= k <= N-1 with N={n} points")


def knn_graph(coords, k: int) -> AffinityGraph:
    """The k nearest other points of each point, in (distance, index) order."""
    g = _as_coords(coords)
    n = g.shape[1]
    _check_k(k, n)
    d = _sq_dist_rows(g)

    part = np.argpartition(d, k - 1, axis=1)[:, :k]
    part.sort(axis=1)  # ascending index, so a stable distance sort tie-breaks by index
    dv = np.take_along_axis(d, part, axis=1)
    order = np.argsort(dv, axis=1, kind="stable")
    idx = np.take_along_axis(part, order, axis=1)

    # argpartition splits distance ties at the selection boundary arbitrarily;
    # redo any row where candidates beyond the chosen k share the cutoff.
    cutoff = np.take_along_axis(dv, order[:, -1:], axis=1)
    ambiguous = np.nonzero((d <= cutoff).sum(axis=1) > k)[0]
    for i in ambiguous:
        row_order = np.argsort(d[i], kind="stable")  # index-ascending among ties
        idx[i] = row_order[:k]
    return AffinityGraph(idx)


def knn_oracle(coords, k: int) -> AffinityGraph:
    """Reference implementation: full stable sort of every distance row."""
    g = _as_coords(coords)
    n = g.shape[1]
    _check_k(k, n)
    return AffinityGraph(np.argsort(_sq_dist_rows(g), axis=1, kind="stable")[:, :k])


def graph_to_text(graph: AffinityGraph) -> str:
    """One line per point: space-separated neighbor indices."""
    return "\n".join(" ".join(str(j) for j in row) for row in graph.idx) + "\n"


def graph_from_text(text: str) -> AffinityGraph:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    return AffinityGraph(np.array([[int(v) for v in row] for row in rows], dtype=np.int64))
