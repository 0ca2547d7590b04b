"""Layer primitives with hand-derived gradients.

Tensors are float64 numpy arrays laid out ``(batch, channels, x, y, z)`` for
the convolutional part and ``(batch, features)`` for the dense part.  Every
``*_forward`` returns the output plus whatever cache its ``*_backward``
needs; nothing here holds state except :class:`BatchNormState`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "tanh")
PROB_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Convolution


def _check_filters(W):
    fx, fy, fz = W.shape[2:]
    if fx % 2 == 0 or fy % 2 == 0 or fz % 2 == 0:
        raise ValueError(f"filter extents must be odd, got {W.shape[2:]}")
    return fx, fy, fz


def _z_columns(x, fshape):
    """Channels-last, padded input with the z offsets unrolled into channels."""
    fx, fy, fz = fshape
    Z = x.shape[4]
    xp = np.pad(x.transpose(0, 2, 3, 4, 1), ((0, 0), (fx // 2,) * 2, (fy // 2,) * 2, (fz // 2,) * 2, (0, 0)))
    return np.concatenate([xp[:, :, :, d : d + Z, :] for d in range(fz)], axis=-1)


def conv3d_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1, zero "same"-padded 3D convolution (cross-correlation).

    x : (B, C_in, X, Y, Z); W : (C_out, C_in, fx, fy, fz) with odd f; b : (C_out,)
    """
    if x.ndim != 5:
        raise ValueError(f"conv input must be (B, C, X, Y, Z), got shape {x.shape}")
    if x.shape[1] != W.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, filters expect {W.shape[1]}")
    fx, fy, fz = _check_filters(W)
    B, C, X, Y, Z = x.shape
    # im2col along z only; the x/y offsets are strided views fed to matmul
    cols = _z_columns(x, (fx, fy, fz))
    Wm = W.transpose(2, 3, 4, 1, 0).reshape(fx, fy, fz * C, W.shape[0])
    out = np.zeros((B, X, Y, Z, W.shape[0]))
    for a in range(fx):
        for c in range(fy):
            out += cols[:, a : a + X, c : c + Y] @ Wm[a, c]
    out += b
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def conv3d_backward(grad_out: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Gradients of a :func:`conv3d_forward` call: ``(grad_x, grad_W, grad_b)``."""
    if grad_out.shape[0] != x.shape[0] or grad_out.shape[2:] != x.shape[2:] or grad_out.shape[1] != W.shape[0]:
        raise ValueError(f"grad shape {grad_out.shape} inconsistent with input {x.shape} / filters {W.shape}")
    fx, fy, fz = _check_filters(W)
    B, C, X, Y, Z = x.shape
    O = W.shape[0]
    cols = _z_columns(x, (fx, fy, fz))
    g = grad_out.transpose(0, 2, 3, 4, 1).reshape(-1, O)
    grad_W = np.empty((fx, fy, fz * C, O))
    for a in range(fx):
        for c in range(fy):
            grad_W[a, c] = cols[:, a : a + X, c : c + Y].reshape(-1, fz * C).T @ g
    grad_W = np.ascontiguousarray(grad_W.reshape(fx, fy, fz, C, O).transpose(4, 3, 0, 1, 2))
    # same-padded correlation with the flipped, channel-swapped filters
    W_adj = np.ascontiguousarray(W[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    grad_x = conv3d_forward(grad_out, W_adj, np.zeros(C))
    grad_b = grad_out.sum(axis=(0, 2, 3, 4))
    return grad_x, grad_W, grad_b


# ---------------------------------------------------------------------------
# Batch normalisation


@dataclass
class BatchNormState:
    """Per-feature-map scale/shift plus exponential-moving-average statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    epsilon: float = 1e-5

    @classmethod
    def create(cls, n_features, momentum=0.99, epsilon=1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(n_features),
            beta=np.zeros(n_features),
            running_mean=np.zeros(n_features),
            running_var=np.ones(n_features),
            momentum=momentum,
            epsilon=epsilon,
        )


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim)), (1, -1) + (1,) * (x.ndim - 2)


def batchnorm_forward(x: np.ndarray, state: BatchNormState, train: bool = True):
    """Normalise each feature map (axis 1) over the batch and spatial axes.

    In training mode the batch statistics are used and the running averages
    are updated in place; in inference mode only the running averages are read.
    """
    axes, shape = _bn_axes(x)
    if x.shape[1] != state.gamma.shape[0]:
        raise ValueError(f"batchnorm expects {state.gamma.shape[0]} feature maps, got {x.shape[1]}")
    if train:
        if x.shape[0] == 0:
            raise ValueError("batchnorm in training mode needs a nonempty batch")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[1]
        mom = state.momentum
        state.running_mean *= mom
        state.running_mean += (1.0 - mom) * mean
        state.running_var *= mom
        state.running_var += (1.0 - mom) * var * (n / (n - 1) if n > 1 else 1.0)
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = state.gamma.reshape(shape) * xhat + state.beta.reshape(shape)
    return out, (xhat, inv_std, train)


def batchnorm_backward(grad_out: np.ndarray, cache, state: BatchNormState):
    """Exact gradient of the forward pass, batch statistics included in train mode."""
    xhat, inv_std, train = cache
    if grad_out.shape != xhat.shape:
        raise ValueError(f"grad shape {grad_out.shape} does not match forward output {xhat.shape}")
    axes, shape = _bn_axes(grad_out)
    grad_gamma = np.sum(grad_out * xhat, axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    gxhat = grad_out * state.gamma.reshape(shape)
    if not train:
        return gxhat * inv_std.reshape(shape), grad_gamma, grad_beta
    n = grad_out.size // grad_out.shape[1]
    grad_in = (inv_std.reshape(shape) / n) * (
        n * gxhat
        - gxhat.sum(axis=axes).reshape(shape)
        - xhat * np.sum(gxhat * xhat, axis=axes).reshape(shape)
    )
    return grad_in, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Max pooling


def maxpool_forward(x: np.ndarray, window=(2, 2, 2)):
    """Non-overlapping max pooling with stride == window and ceil semantics.

    Odd trailing extents are padded with ``-inf`` so the last window simply
    covers fewer nodes.  Ties go to the first position in the window.
    """
    wx, wy, wz = window
    B, C, X, Y, Z = x.shape
    ox, oy, oz = -(-X // wx), -(-Y // wy), -(-Z // wz)
    xp = np.pad(
        x,
        ((0, 0), (0, 0), (0, ox * wx - X), (0, oy * wy - Y), (0, oz * wz - Z)),
        constant_values=-np.inf,
    )
    blocks = xp.reshape(B, C, ox, wx, oy, wy, oz, wz).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    blocks = blocks.reshape(B, C, ox, oy, oz, wx * wy * wz)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape, tuple(window))


def maxpool_backward(grad_out: np.ndarray, cache) -> np.ndarray:
    arg, in_shape, (wx, wy, wz) = cache
    B, C, X, Y, Z = in_shape
    ox, oy, oz = arg.shape[2:]
    blocks = np.zeros((B, C, ox, oy, oz, wx * wy * wz))
    np.put_along_axis(blocks, arg[..., None], grad_out[..., None], axis=-1)
    full = blocks.reshape(B, C, ox, oy, oz, wx, wy, wz).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    full = full.reshape(B, C, ox * wx, oy * wy, oz * wz)
    return np.ascontiguousarray(full[:, :, :X, :Y, :Z])


# ---------------------------------------------------------------------------
# Activations


def activation_forward(x: np.ndarray, kind: str = "relu") -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    if kind == "tanh":
        return np.tanh(x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")


def activation_backward(grad_out: np.ndarray, x: np.ndarray, kind: str = "relu") -> np.ndarray:
    """Gradient w.r.t. the pre-activation ``x``; ReLU's derivative at 0 is 0."""
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "sigmoid":
        s = activation_forward(x, "sigmoid")
        return grad_out * s * (1.0 - s)
    if kind == "tanh":
        t = np.tanh(x)
        return grad_out * (1.0 - t * t)
    if kind == "linear":
        return grad_out
    raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# Dense layers


def fc_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map ``W x + b`` on a batch ``(B, n_in)``; W is ``(n_out, n_in)``."""
    if x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise ValueError(f"fc input length {x.shape[-1]} does not match n_in={W.shape[1]}")
    return x @ W.T + b


def fc_backward(grad_out: np.ndarray, x: np.ndarray, W: np.ndarray):
    if grad_out.shape != (x.shape[0], W.shape[0]):
        raise ValueError(f"grad shape {grad_out.shape} inconsistent with fc layer {W.shape}")
    return grad_out @ W, grad_out.T @ x, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# Output distribution


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def argmax_state(probabilities) -> int:
    """1-based category of the largest probability; ties go to the lowest code."""
    return int(np.argmax(np.asarray(probabilities))) + 1


def cross_entropy(predicted, true_class: int) -> float:
    """``-log p(true_class)`` for a one-hot target; ``true_class`` is 1-based."""
    p = float(np.asarray(predicted)[true_class - 1])
    return -float(np.log(max(p, PROB_FLOOR)))


def cross_entropy_grad(predicted, true_class: int) -> np.ndarray:
    """Gradient of softmax + cross entropy w.r.t. the scores: ``p - onehot``."""
    g = np.array(predicted, dtype=float, copy=True)
    g[true_class - 1] -= 1.0
    return g
