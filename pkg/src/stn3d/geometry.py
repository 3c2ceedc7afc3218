"""Point clouds and the three learnable global transformation families.

Transformed coordinates are returned as (3, N) tensors so they can feed
directly into graph construction and the coordinate-append step of the point
convolution.  Every applied transform matrix is divided by its Frobenius norm
first; k-NN graphs are invariant to the uniform scaling this introduces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    Tensor,
    clamp_away_from_zero,
    concat,
    div,
    frobenius_norm,
    matmul,
    slice_axis,
)

NORM_EPS = 1e-12        # Frobenius norms below this are degenerate
HOMOGENEOUS_EPS = 1e-6  # |w| floor for the projective divide


class DegenerateTransformError(ValueError):
    """Transform matrix has (numerically) zero Frobenius norm."""


class DegenerateCloudError(ValueError):
    """Cloud cannot be normalized (all points coincide)."""


@dataclass(eq=False)  # identity semantics: clouds are treated as immutable values
class PointCloud:
    """N x 3 coordinates with optional per-point part labels and a category."""

    points: np.ndarray
    part_labels: np.ndarray | None = None
    category: int | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 2:
            raise ValueError(f"point cloud must be (N, 3) with N >= 2, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.part_labels is not None:
            self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
            if self.part_labels.shape != (self.points.shape[0],):
                raise ValueError("part_labels length must equal point count")
            if self.part_labels.size and self.part_labels.min() < 0:
                raise ValueError("part labels must be non-negative")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def coords(self) -> Tensor:
        """The (3, N) coordinate tensor, as a gradient-free constant."""
        return Tensor(self.points.T.copy())


@dataclass
class AffineParams:
    """Learnable 3x3 matrix; applied after unit-Frobenius normalization."""

    matrix: Tensor

    def __post_init__(self):
        if self.matrix.shape != (3, 3):
            raise ValueError(f"affine matrix must be 3x3, got {self.matrix.shape}")


@dataclass
class ProjectiveParams:
    """Learnable 4x4 matrix acting on homogeneous coordinates."""

    matrix: Tensor

    def __post_init__(self):
        if self.matrix.shape != (4, 4):
            raise ValueError(f"projective matrix must be 4x4, got {self.matrix.shape}")


@dataclass
class DeformableParams:
    """Learnable 3 x (3 + f) matrix: a 3x3 coordinate block next to a 3xf feature block."""

    matrix: Tensor
    feature_width: int = field(init=False)

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != 3 or self.matrix.shape[1] < 3:
            raise ValueError(f"deformable matrix must be 3x(3+f), got {self.matrix.shape}")
        self.feature_width = self.matrix.shape[1] - 3


def _coords(p) -> Tensor:
    """Accept a PointCloud or a (3, N) tensor/array."""
    if isinstance(p, PointCloud):
        return p.coords()
    t = p if isinstance(p, Tensor) else Tensor(p)
    if t.ndim != 2 or t.shape[0] != 3:
        raise ValueError(f"coordinates must be (3, N), got {t.shape}")
    return t


def _normalized_matrix(matrix: Tensor) -> Tensor:
    norm = frobenius_norm(matrix)
    if float(norm.data) < NORM_EPS:
        raise DegenerateTransformError(
            f"transform matrix has Frobenius norm {float(norm.data):.3e} < {NORM_EPS:.0e}")
    return div(matrix, norm)


def apply_affine(params: AffineParams, p) -> Tensor:
    """G = (A / ||A||_F) P, differentiable w.r.t. both A and P."""
    return matmul(_normalized_matrix(params.matrix), _coords(p))


def apply_projective(params: ProjectiveParams, p) -> Tensor:
    """Lift to homogeneous coordinates, apply B / ||B||_F, divide by the last row.

    The homogeneous divisor is sign-preservingly clamped to |w| >= 1e-6 so a
    point crossing the plane at infinity cannot blow up the gradients.
    """
    coords = _coords(p)
    n = coords.shape[1]
    lifted = concat([coords, Tensor(np.ones((1, n)))], axis=0)
    q = matmul(_normalized_matrix(params.matrix), lifted)
    xyz = slice_axis(q, 0, 0, 3)
    w = clamp_away_from_zero(slice_axis(q, 0, 3, 4), HOMOGENEOUS_EPS)
    return div(xyz, concat([w, w, w], axis=0))


def apply_deformable(params: DeformableParams, p, features: Tensor) -> Tensor:
    """G = (C / ||C||_F) [P; F] for C = [A | feature block]."""
    coords = _coords(p)
    if features.ndim != 2 or features.shape[0] != params.feature_width:
        raise ValueError(f"feature map {features.shape} does not match deformable width "
                         f"{params.feature_width}")
    if features.shape[1] != coords.shape[1]:
        raise ValueError(f"feature map has {features.shape[1]} columns for {coords.shape[1]} points")
    stacked = concat([coords, features], axis=0)
    return matmul(_normalized_matrix(params.matrix), stacked)


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center the cloud at the origin and scale the farthest point to radius 1."""
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((pts * pts).sum(axis=1).max())
    if radius < NORM_EPS:
        raise DegenerateCloudError("cloud has zero spread; cannot normalize")
    return PointCloud(pts / radius, part_labels=cloud.part_labels, category=cloud.category)


def random_rigid(seed: int) -> tuple[np.ndarray, np.ndarray]:
    """A uniformly random proper rotation and a translation vector, per seed."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))  # make the factorization unique
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    t = rng.normal(size=3)
    return q, t


def apply_rigid(points: np.ndarray, rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    """Apply (R, t) to (N, 3) points."""
    return points @ rotation.T + translation
