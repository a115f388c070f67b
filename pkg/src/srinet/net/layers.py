"""Forward/backward primitives shared by the network heads.

Everything operates on float64 arrays with explicit caches, in the style
of a hand-rolled backprop stack: forward returns (out, cache), backward
consumes the cache and the upstream gradient.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError


def affine_forward(x, w, b):
    """x @ w + b over the last axis. x: (..., C_in)."""
    if x.shape[-1] != w.shape[0]:
        raise InvalidInputError(
            f"input width {x.shape[-1]} does not match weight {w.shape}")
    # flat 2D matmul is several times faster than a broadcast one
    out = (x.reshape(-1, w.shape[0]) @ w + b).reshape(x.shape[:-1] + (w.shape[1],))
    return out, (x, w)


def affine_backward(grad, cache):
    x, w = cache
    c_in, c_out = w.shape
    flat = grad.reshape(-1, c_out)
    g_x = (flat @ w.T).reshape(x.shape)
    g_w = x.reshape(-1, c_in).T @ flat
    g_b = flat.sum(axis=0)
    return g_x, g_w, g_b


def shared_mlp_forward(x, w, b):
    """One pointwise layer: the same affine + ReLU applied to every row."""
    pre, aff = affine_forward(x, w, b)
    return np.maximum(pre, 0.0), (aff, pre)


def shared_mlp_backward(grad, cache):
    aff, pre = cache
    return affine_backward(grad * (pre > 0), aff)


def global_max_pool_forward(x, axis=-2):
    """Channelwise max over the point axis; cache records the argmax so the
    backward pass can route gradients (first index on exact ties)."""
    if x.shape[axis] < 1:
        raise InvalidInputError("cannot pool over an empty axis")
    arg = x.argmax(axis=axis)
    out = np.take_along_axis(x, np.expand_dims(arg, axis), axis=axis)
    return np.squeeze(out, axis=axis), (arg, x.shape, axis)


def global_max_pool_backward(grad, cache):
    arg, shape, axis = cache
    g_x = np.zeros(shape)
    np.put_along_axis(g_x, np.expand_dims(arg, axis),
                      np.expand_dims(grad, axis), axis=axis)
    return g_x


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy with a stable log-sum-exp.

    logits: (..., C); labels: integer array of matching leading shape.
    Returns (loss, grad wrt logits); the gradient is softmax minus one-hot,
    divided by the number of rows.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise InvalidInputError(
            f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InvalidInputError("label out of range")

    flat = logits.reshape(-1, n_classes)
    y = labels.reshape(-1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(len(y)), y]))

    grad = np.exp(shifted)
    grad /= grad.sum(axis=1, keepdims=True)
    grad[np.arange(len(y)), y] -= 1.0
    grad /= len(y)
    return loss, grad.reshape(logits.shape)
