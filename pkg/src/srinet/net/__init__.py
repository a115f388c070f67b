"""Explicit-gradient network stack: two-branch model, training, evaluation."""

from .layers import (
    affine_backward,
    affine_forward,
    global_max_pool_backward,
    global_max_pool_forward,
    shared_mlp_backward,
    shared_mlp_forward,
    softmax_cross_entropy,
)
from .model import (
    ENCODING_DIMS,
    EncodedCloud,
    Model,
    ModelConfig,
    build_model,
    classify_forward,
    encode_cloud,
    forward_batch,
    loss_and_grads,
    segment_forward,
    stack_encoded,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .training import (
    TrainConfig,
    evaluate,
    gradient_check,
    learning_rate,
    train,
    write_metrics_csv,
)

__all__ = [
    "ENCODING_DIMS", "EncodedCloud", "Model", "ModelConfig", "TrainConfig",
    "affine_backward", "affine_forward", "build_model", "classify_forward",
    "encode_cloud", "evaluate", "forward_batch", "global_max_pool_backward",
    "global_max_pool_forward", "gradient_check", "learning_rate",
    "load_checkpoint", "loss_and_grads", "save_checkpoint", "segment_forward",
    "shared_mlp_backward", "shared_mlp_forward", "softmax_cross_entropy",
    "stack_encoded", "train", "write_metrics_csv",
]
