"""Key point responses from normal variation.

Points on edges and corners have neighbors whose normals disagree with
their own; summing the sines of those angles gives each point a response
that is high exactly there and zero on flat regions. The sine is taken as
the cross-product magnitude, so flipped normal signs do not matter, and
the whole response is invariant under joint rotation of points and
normals.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, InvalidInputError
from .graph import KnnGraph, knn_graph


def estimate_normals(points: np.ndarray, k: int) -> np.ndarray:
    """Per-point unit normals from local covariance.

    Each normal is the smallest-eigenvalue eigenvector of the covariance of
    the point's k nearest neighbors (plus the point itself), with the sign
    chosen to point away from the local centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 3:
        raise InvalidInputError(f"normal estimation needs k >= 3, got {k}")
    if k >= n:
        raise InvalidInputError(f"need k < N, got k={k}, N={n}")

    graph = knn_graph(points, k)
    local = np.concatenate([points[:, None, :], points[graph.indices]], axis=1)
    mean = local.mean(axis=1, keepdims=True)
    centered = local - mean
    cov = np.einsum("nki,nkj->nij", centered, centered) / k

    spread = np.trace(cov, axis1=1, axis2=2)
    if np.any(spread <= 1e-18):
        bad = int(np.argmin(spread))
        raise DegenerateInputError(
            f"all neighbors of point {bad} coincide; normal undefined")

    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    outward = np.einsum("ni,ni->n", normals, points - mean[:, 0, :])
    normals[outward < 0] *= -1.0
    return normals


def keypoint_response(normals: np.ndarray, graph: KnnGraph,
                      normalize: bool = False) -> np.ndarray:
    """Response per point: sum over neighbors of sin(angle between normals).

    sin is computed as |n_i x n_r|, so it is unsigned and orientation-free.
    Values lie in [0, K]; `normalize` rescales them to [0, 1].
    """
    normals = np.asarray(normals, dtype=np.float64)
    lengths = np.linalg.norm(normals, axis=1)
    if not np.allclose(lengths, 1.0, atol=1e-6):
        raise InvalidInputError("normals must be unit length within 1e-6")
    cross = np.cross(normals[graph.indices], normals[:, None, :])
    sines = np.clip(np.linalg.norm(cross, axis=2), 0.0, 1.0)
    values = sines.sum(axis=1)
    if normalize:
        values = values / graph.k
    return values


def attach_response(feats: np.ndarray, responses: np.ndarray,
                    mode: str = "sum") -> np.ndarray:
    """Fuse responses into per-point features before global pooling.

    sum adds the response to every channel; mul scales every channel by it.
    """
    feats = np.asarray(feats, dtype=np.float64)
    responses = np.asarray(responses, dtype=np.float64)
    if feats.shape[:-1] != responses.shape:
        raise InvalidInputError(
            f"features {feats.shape} and responses {responses.shape} disagree")
    if mode == "sum":
        return feats + responses[..., None]
    if mode == "mul":
        return feats * responses[..., None]
    raise InvalidInputError(f"unknown fusion mode {mode!r}, want sum or mul")
