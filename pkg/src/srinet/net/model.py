"""The two-branch network: encoding, assembly, forward and backward.

Every cloud is centered, scale-normalized, and encoded into per-point
features that are already rotation-invariant (or deliberately not, for the
raw-coordinate baseline). The main branch runs shared pointwise layers on
the per-point features; the side branch aggregates KNN neighborhoods; the
branches are concatenated, fused through one more shared layer, decorated
with key point responses, and max-pooled into a global descriptor that
feeds either the classifier or the per-point segmentation head.

Parameters live in one flat name -> array dict so the optimizer, the
checkpoints and the finite-difference checks can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError
from ..geom import (
    AxisFrame,
    PointCloud,
    center_cloud,
    normalize_scale,
    project_cloud,
    project_offsets,
    select_axes,
)
from ..graph import (
    GraphAggParams,
    graph_aggregate_backward,
    graph_aggregate_forward,
    knn_graph,
)
from ..keypoint import attach_response, estimate_normals, keypoint_response
from .layers import (
    affine_backward,
    affine_forward,
    global_max_pool_backward,
    global_max_pool_forward,
    shared_mlp_backward,
    shared_mlp_forward,
    softmax_cross_entropy,
)

ENCODING_DIMS = {"projection": 4, "ppf": 4, "raw_xyz": 3}
TASKS = ("classify", "segment")
FUSIONS = ("sum", "mul")


@dataclass
class ModelConfig:
    """Architecture and encoding choices.

    k_neighbors defaults to 25 for classification and 64 for segmentation
    when left unset. The last backbone width is the shared fusion layer
    applied after the two branches are concatenated.
    """

    task: str = "classify"
    encoding: str = "projection"
    num_classes: int = 5
    num_parts: int = 2
    backbone: tuple = (64, 64, 128, 1024)
    side: tuple = (64, 128)
    dense: tuple = (512, 256)
    k_neighbors: int | None = None
    response_k: int = 16
    fusion: str = "sum"
    normalize_response: bool = False
    use_graph_agg: bool = True
    use_keypoint: bool = True
    scale_normalize: bool = True
    transform_hidden: int = 32

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidInputError(f"task must be one of {TASKS}")
        if self.encoding not in ENCODING_DIMS:
            raise InvalidInputError(
                f"encoding must be one of {tuple(ENCODING_DIMS)}")
        if self.fusion not in FUSIONS:
            raise InvalidInputError(f"fusion must be one of {FUSIONS}")
        for name in ("backbone", "side", "dense"):
            widths = tuple(int(w) for w in getattr(self, name))
            if not widths or any(w < 1 for w in widths):
                raise InvalidInputError(f"{name} widths must be nonempty")
            setattr(self, name, widths)
        if self.task == "classify" and self.num_classes < 2:
            raise InvalidInputError("need at least 2 classes")
        if self.task == "segment" and self.num_parts < 2:
            raise InvalidInputError("need at least 2 parts")
        if self.k_neighbors is None:
            self.k_neighbors = 25 if self.task == "classify" else 64

    @property
    def input_dim(self) -> int:
        return ENCODING_DIMS[self.encoding]


@dataclass
class Model:
    """Config plus the flat parameter dict (name -> float64 array)."""

    config: ModelConfig
    params: dict = field(default_factory=dict)

    def graph_agg_params(self) -> GraphAggParams:
        p = self.params
        return GraphAggParams(p["ga.wt1"], p["ga.bt1"], p["ga.wt2"],
                              p["ga.bt2"], p["ga.w0"], p["ga.w1"], p["ga.bias"])


def _he(rng, c_in, c_out):
    return rng.standard_normal((c_in, c_out)) * np.sqrt(2.0 / c_in)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Initialize all parameters deterministically from the seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, np.ndarray] = {}
    c = config.input_dim
    for i, width in enumerate(config.backbone[:-1]):
        params[f"main{i}.w"] = _he(rng, c, width)
        params[f"main{i}.b"] = np.zeros(width)
        c = width
    main_out = c

    side_out = 0
    if config.use_graph_agg:
        k, h = config.k_neighbors, config.transform_hidden
        c_in = config.input_dim
        params["ga.wt1"] = _he(rng, c_in, h)
        params["ga.bt1"] = np.zeros(h)
        params["ga.wt2"] = np.zeros((h, k * k))
        params["ga.bt2"] = np.zeros(k * k)
        params["ga.w0"] = _he(rng, c_in, config.side[0])
        params["ga.w1"] = _he(rng, c_in, config.side[0])
        params["ga.bias"] = np.zeros(config.side[0])
        c = config.side[0]
        for i, width in enumerate(config.side[1:], start=1):
            params[f"side{i}.w"] = _he(rng, c, width)
            params[f"side{i}.b"] = np.zeros(width)
            c = width
        side_out = c

    fuse_in = main_out + side_out
    params["fuse.w"] = _he(rng, fuse_in, config.backbone[-1])
    params["fuse.b"] = np.zeros(config.backbone[-1])

    if config.task == "classify":
        prefix, c, out = "cls", config.backbone[-1], config.num_classes
    else:
        prefix, c, out = "seg", 2 * config.backbone[-1], config.num_parts
    widths = list(config.dense) + [out]
    for i, width in enumerate(widths):
        # small final layer keeps fresh logits near zero (softmax unsaturated)
        scale = np.sqrt(2.0 / c) if i < len(widths) - 1 else 0.01 * np.sqrt(1.0 / c)
        params[f"{prefix}{i}.w"] = rng.standard_normal((c, width)) * scale
        params[f"{prefix}{i}.b"] = np.zeros(width)
        c = width
    return Model(config, params)


@dataclass
class EncodedCloud:
    """Rotation-handled inputs for one cloud."""

    feats: np.ndarray                  # (N, C_in) main-branch features
    side_feats: np.ndarray | None      # (N, K, C_in) neighborhood features
    responses: np.ndarray | None       # (N,) key point responses
    axes: AxisFrame | None
    points: np.ndarray                 # processed (centered/scaled) coords


def _ppf_features(vectors, normals_x, normal_ref):
    """Vectorized cosine point pair features of `vectors` = x - ref.

    normals_x: normal at the far point, broadcastable to vectors' shape;
    normal_ref likewise for the reference end.
    """
    r = np.linalg.norm(vectors, axis=-1)
    safe = np.where(r > 1e-12, r, 1.0)
    unit = vectors / safe[..., None]
    cos_ref_d = np.einsum("...i,...i->...", normal_ref, unit)
    cos_x_d = np.einsum("...i,...i->...", normals_x, unit)
    cos_nn = np.einsum("...i,...i->...", normal_ref, normals_x)
    zero = r <= 1e-12
    cos_ref_d = np.where(zero, 0.0, cos_ref_d)
    cos_x_d = np.where(zero, 0.0, cos_x_d)
    dist = np.where(zero, 0.0, r)
    cos_nn = cos_nn * np.ones_like(dist)
    return np.stack([cos_ref_d, cos_x_d, cos_nn, dist], axis=-1)


def encode_cloud(cloud: PointCloud, config: ModelConfig) -> EncodedCloud:
    """Center, normalize, and encode one cloud for the network.

    The ppf encoding pairs every point with one reference surface point
    (the max-norm point, carrying its own normal); neighborhoods pair each
    neighbor with its center point. Normals come from the data when present
    and from local covariance otherwise.
    """
    centered, _ = center_cloud(cloud)
    proc = normalize_scale(centered) if config.scale_normalize else centered
    pts = proc.points
    n = len(pts)

    axes = None
    if config.encoding == "projection":
        axes = select_axes(proc)

    normals = None
    if config.encoding == "ppf" or config.use_keypoint:
        if proc.normals is not None:
            normals = proc.normals
        else:
            normals = estimate_normals(pts, min(config.response_k, n - 1))

    if config.encoding == "projection":
        feats = project_cloud(axes, pts)
    elif config.encoding == "raw_xyz":
        feats = pts.copy()
    else:
        ref = int(np.argmax(np.linalg.norm(pts, axis=1)))
        feats = _ppf_features(pts - pts[ref], normals, normals[ref])

    side_feats = None
    graph = None
    if config.use_graph_agg:
        graph = knn_graph(pts, config.k_neighbors)
        if config.encoding == "projection":
            side_feats = project_offsets(axes, graph.offsets)
        elif config.encoding == "raw_xyz":
            side_feats = graph.offsets.copy()
        else:
            side_feats = _ppf_features(graph.offsets,
                                       normals[graph.indices],
                                       normals[:, None, :])

    responses = None
    if config.use_keypoint:
        rk = min(config.response_k, n - 1)
        rgraph = graph if (graph is not None and graph.k == rk) \
            else knn_graph(pts, rk)
        responses = keypoint_response(normals, rgraph,
                                      normalize=config.normalize_response)

    return EncodedCloud(feats, side_feats, responses, axes, pts)


def stack_encoded(encoded: list[EncodedCloud]):
    """Stack same-size encodings into batch arrays (X, S, R)."""
    x = np.stack([e.feats for e in encoded])
    s = (np.stack([e.side_feats for e in encoded])
         if encoded[0].side_feats is not None else None)
    r = (np.stack([e.responses for e in encoded])
         if encoded[0].responses is not None else None)
    return x, s, r


def forward_batch(model: Model, x, s=None, r=None):
    """Network forward on batched encodings.

    x: (B, N, C_in); s: (B, N, K, C_in) when the side branch is on;
    r: (B, N) responses when the keypoint module is on. Returns
    (logits, cache) where logits is (B, classes) or (B, N, parts).
    """
    cfg, params = model.config, model.params
    cache: dict = {}

    h = np.asarray(x, dtype=np.float64)
    main_caches = []
    for i in range(len(cfg.backbone) - 1):
        h, c = shared_mlp_forward(h, params[f"main{i}.w"], params[f"main{i}.b"])
        main_caches.append(c)
    cache["main"] = main_caches
    branches = h

    if cfg.use_graph_agg:
        if s is None:
            raise InvalidInputError("side branch enabled but no neighborhood features")
        b, n, k, c_in = s.shape
        ga = model.graph_agg_params()
        ga_out, ga_cache = graph_aggregate_forward(ga, s.reshape(b * n, k, c_in))
        side = ga_out.reshape(b, n, -1)
        cache["ga"] = (ga, ga_cache, s.shape)
        side_caches = []
        for i in range(1, len(cfg.side)):
            side, c = shared_mlp_forward(side, params[f"side{i}.w"],
                                         params[f"side{i}.b"])
            side_caches.append(c)
        cache["side"] = side_caches
        cache["split"] = branches.shape[-1]
        branches = np.concatenate([branches, side], axis=-1)

    fuse_pre, fuse_aff = affine_forward(branches, params["fuse.w"], params["fuse.b"])
    fused = np.maximum(fuse_pre, 0.0)
    cache["fuse"] = (fuse_aff, fuse_pre)

    if cfg.use_keypoint:
        if r is None:
            raise InvalidInputError("keypoint module enabled but no responses")
        decorated = attach_response(fused, r, cfg.fusion)
        cache["resp"] = r
    else:
        decorated = fused

    pooled, pool_cache = global_max_pool_forward(decorated, axis=1)
    cache["pool"] = pool_cache

    if cfg.task == "classify":
        h = pooled
        head_caches = []
        n_layers = len(cfg.dense) + 1
        for i in range(n_layers):
            w, bb = params[f"cls{i}.w"], params[f"cls{i}.b"]
            if i < n_layers - 1:
                h, c = shared_mlp_forward(h, w, bb)
            else:
                h, c = affine_forward(h, w, bb)
            head_caches.append(c)
        cache["head"] = head_caches
        return h, cache

    b, n, f = decorated.shape
    tiled = np.broadcast_to(pooled[:, None, :], (b, n, f))
    seg_in = np.concatenate([decorated, tiled], axis=-1)
    h = seg_in
    head_caches = []
    n_layers = len(cfg.dense) + 1
    for i in range(n_layers):
        w, bb = params[f"seg{i}.w"], params[f"seg{i}.b"]
        if i < n_layers - 1:
            h, c = shared_mlp_forward(h, w, bb)
        else:
            h, c = affine_forward(h, w, bb)
        head_caches.append(c)
    cache["head"] = head_caches
    cache["seg_split"] = f
    return h, cache


def backward_batch(model: Model, cache: dict, grad_logits):
    """Exact gradients of forward_batch w.r.t. every parameter."""
    cfg, params = model.config, model.params
    grads: dict[str, np.ndarray] = {}
    prefix = "cls" if cfg.task == "classify" else "seg"

    g = np.asarray(grad_logits, dtype=np.float64)
    n_layers = len(cfg.dense) + 1
    for i in reversed(range(n_layers)):
        c = cache["head"][i]
        if i < n_layers - 1:
            g, gw, gb = shared_mlp_backward(g, c)
        else:
            g, gw, gb = affine_backward(g, c)
        grads[f"{prefix}{i}.w"] = gw
        grads[f"{prefix}{i}.b"] = gb

    if cfg.task == "classify":
        g_decorated = global_max_pool_backward(g, cache["pool"])
    else:
        f = cache["seg_split"]
        g_decorated = g[..., :f].copy()
        g_pooled = g[..., f:].sum(axis=1)
        g_decorated += global_max_pool_backward(g_pooled, cache["pool"])

    if cfg.use_keypoint and cfg.fusion == "mul":
        g_fused = g_decorated * cache["resp"][..., None]
    else:
        g_fused = g_decorated

    fuse_aff, fuse_pre = cache["fuse"]
    g_branches, gw, gb = affine_backward(g_fused * (fuse_pre > 0), fuse_aff)
    grads["fuse.w"] = gw
    grads["fuse.b"] = gb

    if cfg.use_graph_agg:
        split = cache["split"]
        g_main = g_branches[..., :split]
        g_side = g_branches[..., split:]
        for i in reversed(range(1, len(cfg.side))):
            g_side, gw, gb = shared_mlp_backward(g_side, cache["side"][i - 1])
            grads[f"side{i}.w"] = gw
            grads[f"side{i}.b"] = gb
        ga, ga_cache, s_shape = cache["ga"]
        b, n, k, c_in = s_shape
        ga_grads, _ = graph_aggregate_backward(
            ga, ga_cache, g_side.reshape(b * n, -1))
        for name, val in ga_grads.items():
            grads[f"ga.{name}"] = val
    else:
        g_main = g_branches

    g = g_main
    for i in reversed(range(len(cfg.backbone) - 1)):
        g, gw, gb = shared_mlp_backward(g, cache["main"][i])
        grads[f"main{i}.w"] = gw
        grads[f"main{i}.b"] = gb
    return grads


def loss_and_grads(model: Model, x, s, r, labels):
    """Cross-entropy loss and parameter gradients for one batch.

    labels: (B,) class ids for classification, (B, N) part ids for
    segmentation. Returns (loss, grads, logits).
    """
    logits, cache = forward_batch(model, x, s, r)
    loss, g_logits = softmax_cross_entropy(logits, labels)
    grads = backward_batch(model, cache, g_logits)
    return loss, grads, logits


def classify_forward(model: Model, cloud: PointCloud) -> np.ndarray:
    """Class logits for one cloud through the full invariant pipeline."""
    if model.config.task != "classify":
        raise InvalidInputError("model is not configured for classification")
    enc = encode_cloud(cloud, model.config)
    x, s, r = stack_encoded([enc])
    logits, _ = forward_batch(model, x, s, r)
    return logits[0]


def segment_forward(model: Model, cloud: PointCloud) -> np.ndarray:
    """Per-point part logits (N, parts) for one cloud."""
    if model.config.task != "segment":
        raise InvalidInputError("model is not configured for segmentation")
    enc = encode_cloud(cloud, model.config)
    x, s, r = stack_encoded([enc])
    logits, _ = forward_batch(model, x, s, r)
    return logits[0]
