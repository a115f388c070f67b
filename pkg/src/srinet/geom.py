"""Rotation-invariant point projection features.

A centered point cloud defines its own axis frame: the largest-norm point,
the smallest-norm point, and their cross product. Projecting every point
onto those axes yields a 4D feature per point (three cosines plus the norm)
that does not change when the cloud is rotated, because the axes rotate
with it. This module provides the centering, axis selection, projection,
its inverse, and the rotation / point pair utilities that the rest of the
package builds on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateInputError,
    InconsistentFeatureError,
    InvalidInputError,
)

ZERO_NORM_TOL = 1e-12


@dataclass(frozen=True)
class PointCloud:
    """N points with optional unit normals and labels.

    points : (N, 3) float array, model units
    normals : optional (N, 3) unit vectors
    label : optional class id
    part_labels : optional (N,) integer part ids
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    label: int | None = None
    part_labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError(f"points must be (N, 3), got {pts.shape}")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise InvalidInputError(
                    f"normals shape {nrm.shape} does not match points {pts.shape}"
                )
            lengths = np.linalg.norm(nrm, axis=1)
            if not np.allclose(lengths, 1.0, atol=1e-6):
                raise InvalidInputError("normals must be unit length within 1e-6")
            object.__setattr__(self, "normals", nrm)
        if self.part_labels is not None:
            pl = np.asarray(self.part_labels, dtype=np.int64)
            if pl.shape != (pts.shape[0],):
                raise InvalidInputError("part_labels must be one id per point")
            object.__setattr__(self, "part_labels", pl)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        """Same cloud with replaced coordinates (normals/labels kept)."""
        return replace(self, points=points)


@dataclass(frozen=True)
class AxisFrame:
    """Three unit, linearly independent axes selected from a cloud."""

    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray

    def __post_init__(self):
        for name in ("a1", "a2", "a3"):
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise InvalidInputError(f"{name} must be unit length within 1e-9")
            object.__setattr__(self, name, v)
        if abs(np.linalg.det(self.matrix())) <= 1e-6:
            raise DegenerateInputError("axes are not linearly independent")

    def matrix(self) -> np.ndarray:
        """Rows a1, a2, a3 as a 3x3 matrix."""
        return np.stack([self.a1, self.a2, self.a3])


@dataclass(frozen=True)
class ProjectionFeature:
    """Cosines of a point against the three axes, plus its norm."""

    c1: float
    c2: float
    c3: float
    r: float

    def as_array(self) -> np.ndarray:
        return np.array([self.c1, self.c2, self.c3, self.r])


@dataclass(frozen=True)
class Rotation:
    """Proper rotation, stored as a 3x3 matrix."""

    matrix: np.ndarray = field()

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise InvalidInputError("rotation matrix must be 3x3")
        if not np.allclose(m.T @ m, np.eye(3), atol=1e-9):
            raise InvalidInputError("matrix is not orthogonal within 1e-9")
        if abs(np.linalg.det(m) - 1.0) > 1e-9:
            raise InvalidInputError("matrix determinant must be +1")
        object.__setattr__(self, "matrix", m)

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate a (..., 3) array of vectors."""
        return np.asarray(vectors) @ self.matrix.T

    def apply_cloud(self, cloud: PointCloud) -> PointCloud:
        """Rotate points and normals jointly."""
        normals = self.apply(cloud.normals) if cloud.normals is not None else None
        return PointCloud(self.apply(cloud.points), normals,
                          cloud.label, cloud.part_labels)


def center_cloud(cloud: PointCloud) -> tuple[PointCloud, np.ndarray]:
    """Shift the mass center to the origin.

    Returns the shifted cloud and the removed centroid. Normals and labels
    pass through unchanged.
    """
    if cloud.n == 0:
        raise InvalidInputError("cannot center an empty cloud")
    centroid = cloud.points.mean(axis=0)
    return cloud.with_points(cloud.points - centroid), centroid


def normalize_scale(cloud: PointCloud) -> PointCloud:
    """Divide coordinates by the max point norm so the farthest point sits
    at distance 1. Expects a centered cloud."""
    norms = np.linalg.norm(cloud.points, axis=1)
    top = norms.max(initial=0.0)
    if top <= ZERO_NORM_TOL:
        raise InvalidInputError("cloud has zero extent, cannot normalize scale")
    return cloud.with_points(cloud.points / top)


def _resolve_tie(candidates: np.ndarray, units: np.ndarray, ref_unit: np.ndarray,
                 cos_tol: float, what: str) -> int:
    """Among norm-tied candidate indices, pick the one most orthogonal to the
    reference direction. |cos| is rotation-invariant, so this keeps axis
    selection equivariant; anything still tied is genuinely ambiguous."""
    scores = np.abs(units[candidates] @ ref_unit)
    best = scores.min()
    close = candidates[scores <= best + cos_tol]
    if len(close) > 1:
        raise DegenerateInputError(
            f"unresolvable norm tie for {what}: {len(close)} candidates "
            "remain after the cosine tie-break"
        )
    return int(close[0])


def select_axes(cloud: PointCloud | np.ndarray, eps: float = 1e-6) -> AxisFrame:
    """Select the three axes of a centered cloud.

    Axis 1 is the max-norm point, axis 2 the min-norm point, axis 3 their
    cross product, all normalized. `eps` is relative to the cloud scale and
    controls three things: which points count as nonzero, when two norms are
    considered tied, and when a candidate axis 2 counts as collinear with
    axis 1. Norm ties are broken by the candidate most orthogonal to the
    opposite extreme point; a tie that survives that is reported as
    degenerate rather than broken arbitrarily, since any coordinate-based
    choice would destroy rotation invariance.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 3:
        raise InvalidInputError("axis selection needs at least 3 points of shape (N, 3)")
    norms = np.linalg.norm(pts, axis=1)
    scale = norms.max()
    tol = eps * scale
    usable = np.flatnonzero(norms > tol)
    if len(usable) < 2:
        raise InvalidInputError("need at least two points away from the origin")

    u_norms = norms[usable]
    with np.errstate(invalid="ignore"):
        units = pts / norms[:, None]
    units[norms <= ZERO_NORM_TOL] = 0.0

    max_cands = usable[u_norms >= u_norms.max() - tol]
    min_cands = usable[u_norms <= u_norms.min() + tol]
    if len(max_cands) == 1:
        i1 = int(max_cands[0])
    else:
        if len(min_cands) != 1:
            raise DegenerateInputError(
                "both extreme norms are tied; axis selection is ambiguous")
        i1 = _resolve_tie(max_cands, units, units[min_cands[0]], eps, "axis 1")
    a1 = units[i1]

    # Axis 2: walk tie groups in ascending norm order until one contains a
    # point not collinear with axis 1.
    order = usable[np.argsort(u_norms, kind="stable")]
    sorted_norms = norms[order]
    i2 = None
    start = 0
    while start < len(order):
        stop = start
        while stop < len(order) and sorted_norms[stop] <= sorted_norms[start] + tol:
            stop += 1
        group = order[start:stop]
        cross_mag = np.linalg.norm(np.cross(np.broadcast_to(a1, (len(group), 3)),
                                            units[group]), axis=1)
        group = group[cross_mag > eps]
        if len(group) == 1:
            i2 = int(group[0])
            break
        if len(group) > 1:
            i2 = _resolve_tie(group, units, a1, eps, "axis 2")
            break
        start = stop
    if i2 is None:
        raise DegenerateInputError("every candidate for axis 2 is collinear with axis 1")

    a2 = units[i2]
    a3 = np.cross(a1, a2)
    a3 = a3 / np.linalg.norm(a3)
    return AxisFrame(a1, a2, a3)


def project_point(axes: AxisFrame, x: np.ndarray) -> ProjectionFeature:
    """Map a point to (cos against a1, cos against a2, cos against a3, norm).

    A zero vector maps to (0, 0, 0, 0) by convention; the cosine of nothing
    is undefined.
    """
    x = np.asarray(x, dtype=np.float64).reshape(3)
    r = float(np.linalg.norm(x))
    if r <= ZERO_NORM_TOL:
        return ProjectionFeature(0.0, 0.0, 0.0, 0.0)
    c = np.clip(axes.matrix() @ x / r, -1.0, 1.0)
    return ProjectionFeature(float(c[0]), float(c[1]), float(c[2]), r)


def project_cloud(axes: AxisFrame, cloud: PointCloud | np.ndarray) -> np.ndarray:
    """Project every point; returns the (N, 4) feature matrix in input order."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, float)
    return project_offsets(axes, pts)


def project_offsets(axes: AxisFrame, vectors: np.ndarray) -> np.ndarray:
    """Vectorized projection of a (..., 3) array of vectors to (..., 4)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    r = np.linalg.norm(vectors, axis=-1)
    safe_r = np.where(r > ZERO_NORM_TOL, r, 1.0)
    cos = np.clip(vectors @ axes.matrix().T / safe_r[..., None], -1.0, 1.0)
    cos[r <= ZERO_NORM_TOL] = 0.0
    out = np.concatenate([cos, np.where(r > ZERO_NORM_TOL, r, 0.0)[..., None]],
                         axis=-1)
    return out


def reconstruct_point(axes: AxisFrame, f: ProjectionFeature) -> np.ndarray:
    """Invert the projection: recover the unique point with the given feature.

    Solves the 3x3 system [a1; a2; a3] x_n = (c1, c2, c3) for the unit
    direction and rescales by the stored norm. Features whose solution is
    far from unit length have no consistent preimage.
    """
    if f.r <= ZERO_NORM_TOL:
        return np.zeros(3)
    c = np.array([f.c1, f.c2, f.c3])
    x_n = np.linalg.solve(axes.matrix(), c)
    if abs(np.linalg.norm(x_n) - 1.0) > 1e-4:
        raise InconsistentFeatureError(
            f"direction solved from feature has norm {np.linalg.norm(x_n):.6f}, "
            "expected 1")
    return f.r * x_n


def gram_matrix(x: np.ndarray, axes: AxisFrame) -> np.ndarray:
    """Gram matrix of (x/|x|, a1, a2, a3): all pairwise inner products.

    Symmetric, positive semidefinite, unit diagonal. Invariant under joint
    rotation of point and axes because inner products are.
    """
    x = np.asarray(x, dtype=np.float64).reshape(3)
    r = np.linalg.norm(x)
    if r <= ZERO_NORM_TOL:
        raise InvalidInputError("gram matrix undefined for the zero vector")
    config = np.column_stack([x / r, axes.a1, axes.a2, axes.a3])
    return config.T @ config


def gram_factor(m: np.ndarray) -> np.ndarray:
    """Recover a configuration with the given Gram matrix via SVD.

    Returns C = U sqrt(S) V^T, whose columns reproduce every inner product
    in `m`. Any other valid configuration differs from it only by a global
    rotation, which is why this serves as an independent cross-check of
    `reconstruct_point`.
    """
    m = np.asarray(m, dtype=np.float64)
    u, s, vt = np.linalg.svd(m)
    return u @ np.diag(np.sqrt(np.clip(s, 0.0, None))) @ vt


def point_pair_feature(x: np.ndarray, n_x: np.ndarray,
                       ref: np.ndarray, n_ref: np.ndarray) -> np.ndarray:
    """Cosine-valued pair descriptor of (x, n_x) against (ref, n_ref).

    Returns (cos(n_ref, d), cos(n_x, d), cos(n_ref, n_x), |d|) with
    d = x - ref. A coincident pair keeps only the normal-normal cosine.
    """
    x = np.asarray(x, float).reshape(3)
    ref = np.asarray(ref, float).reshape(3)
    n_x = np.asarray(n_x, float).reshape(3)
    n_ref = np.asarray(n_ref, float).reshape(3)
    d = x - ref
    dist = float(np.linalg.norm(d))
    cos_nn = float(np.dot(n_ref, n_x))
    if dist <= ZERO_NORM_TOL:
        return np.array([0.0, 0.0, cos_nn, 0.0])
    dn = d / dist
    return np.array([float(np.dot(n_ref, dn)), float(np.dot(n_x, dn)),
                     cos_nn, dist])


def random_rotation(seed: int) -> Rotation:
    """Rotation drawn uniformly from the rotation group, deterministic per
    seed. Uses a normalized Gaussian quaternion, which is Haar-uniform."""
    rng = np.random.Generator(np.random.PCG64(seed))
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-8:
        q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return Rotation(np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]))
