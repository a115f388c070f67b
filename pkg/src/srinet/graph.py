"""K-nearest-neighbor graphs and the graph aggregation layer.

The side branch of the network looks at local neighborhoods: exact KNN by
Euclidean distance, center-relative offsets, and an aggregation layer that
first learns a K x K matrix to recombine the neighborhood's feature rows
(pre-multiplication), then runs a graph convolution over the rows and max
pools them into a single descriptor per neighborhood. Forward and backward
passes are explicit so training needs no autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidStateError
from .geom import AxisFrame, project_offsets


@dataclass(frozen=True)
class KnnGraph:
    """Per-point neighbor lists of fixed size k, self excluded.

    indices : (N, K) neighbor indices, each row sorted by ascending distance
        with exact ties broken by ascending point index
    offsets : (N, K, 3) neighbor minus center coordinates
    """

    k: int
    indices: np.ndarray
    offsets: np.ndarray


def knn_graph(points: np.ndarray, k: int) -> KnnGraph:
    """Exact KNN by Euclidean distance.

    Brute force over all pairs, chunked so large clouds do not allocate the
    full N x N matrix at once. Distances are rotation-invariant, so the
    neighbor lists are too (absent exact ties).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InvalidInputError(f"points must be (N, 3), got {points.shape}")
    n = points.shape[0]
    if k < 1 or k >= n:
        raise InvalidInputError(f"need 1 <= k < N, got k={k}, N={n}")

    indices = np.empty((n, k), dtype=np.int64)
    chunk = max(1, int(4e6) // max(n, 1))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        diff = points[start:stop, None, :] - points[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        rows = np.arange(start, stop)
        d2[rows - start, rows] = np.inf
        # stable sort on equal distances keeps ascending index order
        order = np.argsort(d2, axis=1, kind="stable")
        indices[start:stop] = order[:, :k]
    offsets = points[indices] - points[:, None, :]
    return KnnGraph(k, indices, offsets)


def neighborhood_features(axes: AxisFrame, graph: KnnGraph) -> np.ndarray:
    """Project every neighbor offset onto the global axes: (N, K, 4).

    Duplicate points give zero offsets, which map to the all-zero feature.
    """
    return project_offsets(axes, graph.offsets)


@dataclass
class GraphAggParams:
    """Parameters of one graph aggregation layer.

    The transform net is a shared pointwise layer (c_in -> hidden), a max
    pool over the K rows, and a dense map to K^2 entries that are added to
    the identity. Its last layer starts at zero so the produced matrix is
    exactly the identity at the beginning of training.
    """

    wt1: np.ndarray
    bt1: np.ndarray
    wt2: np.ndarray
    bt2: np.ndarray
    w0: np.ndarray
    w1: np.ndarray
    bias: np.ndarray

    @property
    def k(self) -> int:
        return int(round(np.sqrt(self.wt2.shape[1])))

    @property
    def c_in(self) -> int:
        return self.wt1.shape[0]

    @property
    def c_out(self) -> int:
        return self.w0.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"wt1": self.wt1, "bt1": self.bt1, "wt2": self.wt2,
                "bt2": self.bt2, "w0": self.w0, "w1": self.w1,
                "bias": self.bias}


def init_graph_agg(k: int, c_in: int, c_out: int, hidden: int = 32,
                   seed: int = 0) -> GraphAggParams:
    """Fresh layer parameters; the learned transform starts as identity."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return GraphAggParams(
        wt1=rng.standard_normal((c_in, hidden)) * np.sqrt(2.0 / c_in),
        bt1=np.zeros(hidden),
        wt2=np.zeros((hidden, k * k)),
        bt2=np.zeros(k * k),
        w0=rng.standard_normal((c_in, c_out)) * np.sqrt(2.0 / c_in),
        w1=rng.standard_normal((c_in, c_out)) * np.sqrt(2.0 / c_in),
        bias=np.zeros(c_out),
    )


def graph_aggregate_forward(params: GraphAggParams, feats: np.ndarray):
    """Aggregate each neighborhood's (K, c_in) rows into one c_out vector.

    Steps per neighborhood: learn a K x K transform from the rows, pre-
    multiply to recombine them, update every row with its own weight plus
    the summed contribution of the other rows, ReLU, then channelwise max
    over rows. Returns (out, cache); the cache feeds the backward pass.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 3:
        raise InvalidInputError(f"feats must be (N, K, C), got {feats.shape}")
    n, k, c_in = feats.shape
    if k != params.k or c_in != params.c_in:
        raise InvalidInputError(
            f"feats shape {feats.shape} does not match params "
            f"(k={params.k}, c_in={params.c_in})")

    def pointwise(x, w, b):
        return (x.reshape(-1, w.shape[0]) @ w + b).reshape(n, k, w.shape[1])

    t_pre = pointwise(feats, params.wt1, params.bt1)   # (N, K, H)
    t_act = np.maximum(t_pre, 0.0)
    t_arg = t_act.argmax(axis=1)                       # (N, H)
    t_pool = np.take_along_axis(t_act, t_arg[:, None, :], axis=1)[:, 0, :]
    t_vec = t_pool @ params.wt2 + params.bt2           # (N, K*K)
    transform = t_vec.reshape(n, k, k) + np.eye(k)
    mixed = transform @ feats                          # (N, K, C)

    lin0 = pointwise(mixed, params.w0, params.bias)    # (N, K, C_out)
    lin1 = pointwise(mixed, params.w1, np.zeros(params.c_out))
    sum1 = lin1.sum(axis=1, keepdims=True)
    pre = lin0 + (sum1 - lin1)
    act = np.maximum(pre, 0.0)
    arg = act.argmax(axis=1)                           # (N, C_out)
    out = np.take_along_axis(act, arg[:, None, :], axis=1)[:, 0, :]

    cache = {
        "params": params, "feats": feats, "t_pre": t_pre, "t_arg": t_arg,
        "t_pool": t_pool, "transform": transform, "mixed": mixed,
        "pre": pre, "arg": arg, "out_shape": out.shape,
    }
    return out, cache


def graph_aggregate_backward(params: GraphAggParams, cache: dict,
                             grad_out: np.ndarray):
    """Exact gradients of the forward pass.

    Max-pool gradients are routed to the argmax rows recorded in the cache
    (first index on exact ties). Returns (grad_params, grad_feats) with
    grad_params keyed like `GraphAggParams.arrays`.
    """
    if cache.get("params") is not params:
        raise InvalidStateError("cache does not belong to these parameters")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache["out_shape"]:
        raise InvalidStateError(
            f"grad_out shape {grad_out.shape} does not match forward output "
            f"{cache['out_shape']}")

    feats, mixed = cache["feats"], cache["mixed"]
    n, k, _ = feats.shape

    g_act = np.zeros_like(cache["pre"])
    np.put_along_axis(g_act, cache["arg"][:, None, :], grad_out[:, None, :],
                      axis=1)
    g_pre = g_act * (cache["pre"] > 0)

    g_lin0 = g_pre
    g_sum1 = g_pre.sum(axis=1, keepdims=True)
    g_lin1 = g_sum1 - g_pre
    g_bias = g_pre.sum(axis=(0, 1))

    c_out = params.c_out
    mixed_flat = mixed.reshape(-1, mixed.shape[-1])
    g_w0 = mixed_flat.T @ g_lin0.reshape(-1, c_out)
    g_w1 = mixed_flat.T @ g_lin1.reshape(-1, c_out)
    g_mixed = (g_lin0.reshape(-1, c_out) @ params.w0.T
               + g_lin1.reshape(-1, c_out) @ params.w1.T).reshape(mixed.shape)

    g_transform = g_mixed @ feats.transpose(0, 2, 1)
    g_feats = cache["transform"].transpose(0, 2, 1) @ g_mixed

    g_tvec = g_transform.reshape(n, k * k)
    g_wt2 = cache["t_pool"].T @ g_tvec
    g_bt2 = g_tvec.sum(axis=0)
    g_tpool = g_tvec @ params.wt2.T

    g_tact = np.zeros_like(cache["t_pre"])
    np.put_along_axis(g_tact, cache["t_arg"][:, None, :], g_tpool[:, None, :],
                      axis=1)
    g_tpre = g_tact * (cache["t_pre"] > 0)
    h = g_tpre.shape[-1]
    g_wt1 = feats.reshape(-1, feats.shape[-1]).T @ g_tpre.reshape(-1, h)
    g_bt1 = g_tpre.sum(axis=(0, 1))
    g_feats += (g_tpre.reshape(-1, h) @ params.wt1.T).reshape(feats.shape)

    grads = {"wt1": g_wt1, "bt1": g_bt1, "wt2": g_wt2, "bt2": g_bt2,
             "w0": g_w0, "w1": g_w1, "bias": g_bias}
    return grads, g_feats
