"""Independent oracles shared by the test modules."""

import numpy as np

from rcnnmps.grid import CategoricalGrid, WindowSpec, migrate_hard_data, one_hot_encode
from rcnnmps.nn import softmax
from rcnnmps.rcnn import RCNNConfig, RCNNModel


def central_difference(f, p, h=1e-4, index=None):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. array ``p`` (perturbed in place)."""
    grad = np.zeros_like(p, dtype=float)
    positions = index if index is not None else list(np.ndindex(p.shape))
    for i in positions:
        old = p[i]
        p[i] = old + h
        a = f()
        p[i] = old - h
        b = f()
        p[i] = old
        grad[i] = (a - b) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-7):
    """Tensor-wise relative error ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def conv3d_loops(x, W, b):
    """Direct nested-loop same-padded convolution of one (C, X, Y, Z) input."""
    C, X, Y, Z = x.shape
    O, _, fx, fy, fz = W.shape
    px, py, pz = fx // 2, fy // 2, fz // 2
    out = np.zeros((O, X, Y, Z))
    for o in range(O):
        for i in range(X):
            for j in range(Y):
                for k in range(Z):
                    s = b[o]
                    for c in range(C):
                        for a in range(fx):
                            for bb in range(fy):
                                for d in range(fz):
                                    xi, yj, zk = i + a - px, j + bb - py, k + d - pz
                                    if 0 <= xi < X and 0 <= yj < Y and 0 <= zk < Z:
                                        s += W[o, c, a, bb, d] * x[c, xi, yj, zk]
                    out[o, i, j, k] = s
    return out


def kink_pattern(stack):
    """Pool winners of the last forward pass.

    A flipped winner makes the loss jump in slope by O(1).  ReLU units crossing
    zero are not tracked: with batch norm in training mode nearly every step
    moves some unit across, so callers rely on a small step instead.
    """
    return [c[3][0].copy() for c in stack._cache["conv"] if c[3] is not None]


def stack_difference(stack, f, p, h=1e-4, index=None):
    """Central differences of ``f`` (which runs ``stack.forward``) w.r.t. ``p``.

    Returns ``(grad, valid)``; a coordinate is invalid when either perturbed
    pass changes a max-pool winner.
    """
    f()
    base = kink_pattern(stack)
    same = lambda: all(np.array_equal(a, b) for a, b in zip(base, kink_pattern(stack)))
    grad = np.zeros_like(p, dtype=float)
    valid = np.ones(p.shape, dtype=bool)
    positions = index if index is not None else list(np.ndindex(p.shape))
    for i in positions:
        old = p[i]
        p[i] = old + h
        a = f()
        ok = same()
        p[i] = old - h
        b = f()
        ok = ok and same()
        p[i] = old
        grad[i] = (a - b) / (2 * h)
        valid[i] = ok
    return grad, valid


def single_node_oracle(model, hard, dims, seed):
    """Independent node-by-node simulator for IP = 1 and full freezing."""
    cfg = model.config
    K = cfg.num_categories
    half = np.asarray(cfg.window.sg) // 2
    d0 = migrate_hard_data(CategoricalGrid.unknown(dims, K), hard).values
    order = np.random.default_rng(seed).permutation(int(np.prod(dims)))
    draw_rng = np.random.default_rng([seed, 2])
    domains = [d0]
    for stack in model.chain:
        di = d0.copy()
        padded = [np.pad(d, [(h, h) for h in half]) for d in domains]
        for node in order:
            x, y, z = np.unravel_index(node, dims, order="F")
            if di[x, y, z]:
                continue
            chans = [one_hot_encode(p[x : x + 2 * half[0] + 1, y : y + 2 * half[1] + 1,
                                      z : z + 2 * half[2] + 1], K) for p in padded]
            scores = stack.forward(np.concatenate(chans)[None], train=False)
            p = softmax(scores[0, 0, 0, 0])
            u = draw_rng.random()
            di[x, y, z] = 1 + int(np.argmax(u < np.cumsum(p))) if u < p.sum() else K
        domains.append(di)
    return domains[-1]


def random_model(ip=(3, 3, 3), n_cnn=2, seed=0):
    """Untrained chain with sharpened outputs, flagged as trained."""
    cfg = RCNNConfig(n_cnn=n_cnn, window=WindowSpec((5, 5, 5), ip), conv_channels=(4, 4),
                     pool_after=(2,), fc_widths=(16,), seed=seed)
    model = RCNNModel.create(cfg)
    rng = np.random.default_rng(seed)
    for stack in model.chain:
        # spread the BN running statistics so outputs are not near-uniform
        for k, buf in stack.buffers.items():
            if k.endswith("running_mean"):
                buf[...] = rng.normal(size=buf.shape) * 0.2
        stack.params[f"fc{stack.arch.n_fc}.W"] *= 4
    model.epochs_done = 1
    return model
