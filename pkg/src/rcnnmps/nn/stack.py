"""The per-link CNN: conv/BN/activation/pool blocks, then a dense head.

Hidden block m:   H_m = pool(g(BN(W_m * H_{m-1} + b_m)))      (pool only on flagged layers)
Dense layer f<F:  FC_f = g(BN(W_f FC_{f-1} + b_f))
Output layer F:   scores = W_F FC_{F-1} + b_F, reshaped to (ip_x, ip_y, ip_z, K)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .functional import BatchNormState


@dataclass(frozen=True)
class Architecture:
    in_channels: int
    sg: tuple = (15, 15, 15)
    ip: tuple = (5, 5, 5)
    num_categories: int = 2
    conv_channels: tuple = (16, 16, 32, 32)
    filter_size: int = 3
    pool_after: tuple = (2, 4)
    fc_widths: tuple = (512, 256)
    activation: str = "relu"
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("sg", "ip", "conv_channels", "pool_after", "fc_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.filter_size % 2 == 0:
            raise ValueError("filter size must be odd")
        if self.activation not in F.ACTIVATIONS:
            raise ValueError(f"activation must be one of {F.ACTIVATIONS}")
        if any(not 1 <= p <= len(self.conv_channels) for p in self.pool_after):
            raise ValueError(f"pool_after {self.pool_after} references a missing conv layer")

    @property
    def n_conv(self) -> int:
        return len(self.conv_channels)

    @property
    def n_fc(self) -> int:
        return len(self.fc_widths) + 1

    @property
    def output_size(self) -> int:
        return int(np.prod(self.ip)) * self.num_categories

    def feature_shape(self) -> tuple:
        """Spatial extent of the last hidden layer (ceil-mode pooling)."""
        dims = np.array(self.sg)
        for m in range(1, self.n_conv + 1):
            if m in self.pool_after:
                dims = -(-dims // 2)
        return tuple(int(d) for d in dims)

    def to_dict(self) -> dict:
        return asdict(self)


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Zero-mean normal samples, redrawing any outside ``±bound·std``."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


class CNNStack:
    """Parameters, batch-norm buffers and forward/backward for one CNN."""

    def __init__(self, arch: Architecture):
        self.arch = arch
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.bn: dict[str, BatchNormState] = {}
        self._cache = None

        c_in = arch.in_channels
        f = arch.filter_size
        for m, c_out in enumerate(arch.conv_channels, start=1):
            self.params[f"conv{m}.W"] = np.zeros((c_out, c_in, f, f, f))
            self.params[f"conv{m}.b"] = np.zeros(c_out)
            self._add_bn(f"conv{m}", c_out)
            c_in = c_out

        n_in = c_in * int(np.prod(arch.feature_shape()))
        widths = list(arch.fc_widths) + [arch.output_size]
        for k, n_out in enumerate(widths, start=1):
            self.params[f"fc{k}.W"] = np.zeros((n_out, n_in))
            self.params[f"fc{k}.b"] = np.zeros(n_out)
            if k < len(widths):
                self._add_bn(f"fc{k}", n_out)
            n_in = n_out

    def _add_bn(self, name, n):
        a = self.arch
        self.params[f"{name}.gamma"] = np.ones(n)
        self.params[f"{name}.beta"] = np.zeros(n)
        self.buffers[f"{name}.running_mean"] = np.zeros(n)
        self.buffers[f"{name}.running_var"] = np.ones(n)
        self.bn[name] = BatchNormState(
            gamma=self.params[f"{name}.gamma"],
            beta=self.params[f"{name}.beta"],
            running_mean=self.buffers[f"{name}.running_mean"],
            running_var=self.buffers[f"{name}.running_var"],
            momentum=a.bn_momentum,
            epsilon=a.bn_epsilon,
        )

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def load_state(self, params: dict, buffers: dict) -> None:
        """Copy arrays into the existing buffers (keeps batch-norm views bound)."""
        for store, new in ((self.params, params), (self.buffers, buffers)):
            if set(store) != set(new):
                raise ValueError(f"state keys differ: {sorted(set(store) ^ set(new))}")
            for k, v in new.items():
                if store[k].shape != np.shape(v):
                    raise ValueError(f"shape mismatch for {k!r}: {store[k].shape} vs {np.shape(v)}")
                store[k][...] = v

    # -- forward / backward ------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Score field of shape ``(B, ip_x, ip_y, ip_z, K)``.

        Apply :func:`softmax` on the last axis to get the per-node ccdf.
        """
        a = self.arch
        expected = (a.in_channels,) + a.sg
        if x.ndim == 4:
            x = x[None]
        if x.shape[1:] != expected:
            raise ValueError(
                f"layer 0 (input): expected (B, {expected}) got {x.shape}"
            )
        act = a.activation
        cache = {"conv": [], "fc": []}
        h = x
        for m in range(1, a.n_conv + 1):
            z = F.conv3d_forward(h, self.params[f"conv{m}.W"], self.params[f"conv{m}.b"])
            n, bn_cache = F.batchnorm_forward(z, self.bn[f"conv{m}"], train)
            out = F.activation_forward(n, act)
            pool_cache = None
            if m in a.pool_after:
                out, pool_cache = F.maxpool_forward(out)
            cache["conv"].append((h, n, bn_cache, pool_cache))
            h = out

        hshape = h.shape
        v = h.transpose(0, 1, 4, 3, 2).reshape(h.shape[0], -1)
        for k in range(1, a.n_fc + 1):
            W = self.params[f"fc{k}.W"]
            if v.shape[1] != W.shape[1]:
                raise ValueError(f"layer fc{k}: expected {W.shape[1]} inputs, got {v.shape[1]}")
            z = F.fc_forward(v, W, self.params[f"fc{k}.b"])
            if k < a.n_fc:
                n, bn_cache = F.batchnorm_forward(z, self.bn[f"fc{k}"], train)
                cache["fc"].append((v, n, bn_cache))
                v = F.activation_forward(n, act)
            else:
                cache["fc"].append((v, None, None))
                v = z
        cache["hshape"] = hshape
        self._cache = cache
        B = v.shape[0]
        ipx, ipy, ipz = a.ip
        return v.reshape(B, ipz, ipy, ipx, a.num_categories).transpose(0, 3, 2, 1, 4)

    def backward(self, grad_scores: np.ndarray) -> dict:
        """Parameter gradients given dLoss/dscores from the last :meth:`forward`."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        a = self.arch
        cache = self._cache
        grads = {}
        B = grad_scores.shape[0]
        g = grad_scores.transpose(0, 3, 2, 1, 4).reshape(B, -1)
        for k in range(a.n_fc, 0, -1):
            v_in, n, bn_cache = cache["fc"][k - 1]
            if k < a.n_fc:
                g = F.activation_backward(g, n, a.activation)
                g, grads[f"fc{k}.gamma"], grads[f"fc{k}.beta"] = F.batchnorm_backward(
                    g, bn_cache, self.bn[f"fc{k}"]
                )
            g, grads[f"fc{k}.W"], grads[f"fc{k}.b"] = F.fc_backward(g, v_in, self.params[f"fc{k}.W"])

        Bh, C, X, Y, Z = cache["hshape"]
        g = g.reshape(Bh, C, Z, Y, X).transpose(0, 1, 4, 3, 2)
        for m in range(a.n_conv, 0, -1):
            h_in, n, bn_cache, pool_cache = cache["conv"][m - 1]
            if pool_cache is not None:
                g = F.maxpool_backward(g, pool_cache)
            g = F.activation_backward(g, n, a.activation)
            g, grads[f"conv{m}.gamma"], grads[f"conv{m}.beta"] = F.batchnorm_backward(
                g, bn_cache, self.bn[f"conv{m}"]
            )
            g, grads[f"conv{m}.W"], grads[f"conv{m}.b"] = F.conv3d_backward(
                g, h_in, self.params[f"conv{m}.W"]
            )
        self._input_grad = g
        return grads


def init_parameters(stack: CNNStack, seed: int) -> CNNStack:
    """Truncated-normal He initialisation; biases 0, BN scale 1 / shift 0."""
    rng = np.random.default_rng(seed)
    for name, p in stack.params.items():
        if name.endswith(".W"):
            fan_in = int(np.prod(p.shape[1:]))
            p[...] = truncated_normal(rng, p.shape, np.sqrt(2.0 / fan_in))
        elif name.endswith(".gamma"):
            p[...] = 1.0
        else:
            p[...] = 0.0
    for name, buf in stack.buffers.items():
        buf[...] = 1.0 if name.endswith("running_var") else 0.0
    return stack


def cnn_forward(x: np.ndarray, stack: CNNStack, train: bool = False) -> np.ndarray:
    return stack.forward(x, train=train)
