"""Segmentation quality and local-distribution statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud, normalize_cloud
from .neighborhood import knn_graph, pairwise_sq_dist


class DegenerateSamplesError(ValueError):
    """Samples too small or without variance for a t-test."""


def miou(pred_labels, true_labels, num_parts: int) -> float:
    """Mean intersection-over-union across parts for one shape.

    Parts absent from both prediction and truth contribute IoU 1, the usual
    part-segmentation convention, so shapes that genuinely lack a part are
    not penalized.
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"label lengths differ: {pred.shape} vs {true.shape}")
    for name, arr in (("prediction", pred), ("truth", true)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_parts):
            raise ValueError(f"{name} labels outside [0, {num_parts})")
    ious = []
    for part in range(num_parts):
        in_pred, in_true = pred == part, true == part
        union = np.logical_or(in_pred, in_true).sum()
        if union == 0:
            ious.append(1.0)
        else:
            ious.append(np.logical_and(in_pred, in_true).sum() / union)
    return float(np.mean(ious))


def accuracy(pred_labels, true_labels) -> float:
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError(f"label lengths differ: {pred.shape} vs {true.shape}")
    return float(np.mean(pred == true))


@dataclass
class NeighborhoodStats:
    """Local-spread comparison between two versions of a cloud."""

    std_before: float
    std_after: float
    reduction: float             # (before - after) / before, as a fraction
    whole_cloud_std_before: float
    whole_cloud_std_after: float


def _per_point_neighbor_std(points: np.ndarray, k: int) -> np.ndarray:
    """Std of each point's distances to its k nearest neighbors."""
    coords = points.T
    graph = knn_graph(coords, k)
    dists = np.sqrt(pairwise_sq_dist(coords))
    neighbor_d = np.take_along_axis(dists, graph.idx, axis=1)
    return neighbor_d.std(axis=1)


def neighborhood_std_stats(before, after, k: int) -> NeighborhoodStats:
    """Mean per-neighborhood distance spread before vs after a transformation.

    Both clouds are re-normalized (centroid at origin, unit max radius) so the
    comparison is invariant to rigid motion and uniform scaling.  The
    whole-cloud coordinate std is reported as a secondary figure.
    """

    def as_points(x):
        pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
        return normalize_cloud(PointCloud(pts)).points

    pts_before, pts_after = as_points(before), as_points(after)
    per_point_before = _per_point_neighbor_std(pts_before, k)
    per_point_after = _per_point_neighbor_std(pts_after, k)
    std_before = float(per_point_before.mean())
    std_after = float(per_point_after.mean())
    if std_before == 0.0:
        raise DegenerateSamplesError("zero neighborhood spread in the reference cloud")
    return NeighborhoodStats(
        std_before=std_before,
        std_after=std_after,
        reduction=(std_before - std_after) / std_before,
        whole_cloud_std_before=float(pts_before.std()),
        whole_cloud_std_after=float(pts_after.std()),
    )


def per_point_neighbor_std(cloud, k: int) -> np.ndarray:
    """Per-point neighborhood spread of a (re-normalized) cloud; t-test fodder."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return _per_point_neighbor_std(normalize_cloud(PointCloud(pts)).points, k)


def welch_t_test(sample_a, sample_b) -> tuple[float, float]:
    """Welch's t statistic and Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DegenerateSamplesError("both samples need at least 2 values")
    var_a, var_b = a.var(ddof=1), b.var(ddof=1)
    if var_a == 0.0 and var_b == 0.0:
        raise DegenerateSamplesError("both samples have zero variance")
    se_a, se_b = var_a / a.size, var_b / b.size
    t = (a.mean() - b.mean()) / np.sqrt(se_a + se_b)
    dof = (se_a + se_b) ** 2 / (se_a**2 / (a.size - 1) + se_b**2 / (b.size - 1))
    return float(t), float(dof)
