"""The recursive chain: CNN_i reads the search-grid windows of D^0..D^{i-1}.

Training follows the epoch loop: plant a fixed hard-data sample in every
domain, (re)simulate the intermediate domains with the current weights,
build one pair database per link and run Adam over mini-batches.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .grid import (
    CategoricalGrid,
    WindowSpec,
    extract_windows,
    migrate_hard_data,
    one_hot_encode,
    sample_drillholes,
)
from .nn import AdamState, Architecture, CNNStack, adam_step, init_parameters, softmax
from .nn.functional import PROB_FLOOR
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class RCNNConfig:
    n_cnn: int = 4
    window: WindowSpec = field(default_factory=WindowSpec)
    num_categories: int = 2
    per_dc: float = 0.10
    epochs: int = 40
    batch_size: int = 32
    freeze_fraction: float = 0.5
    seed: int = 0
    # per-link architecture
    conv_channels: tuple = (16, 16, 32, 32)
    filter_size: int = 3
    pool_after: tuple = (2, 4)
    fc_widths: tuple = (512, 256)
    activation: str = "relu"
    bn_momentum: float = 0.99
    # Adam
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    # "epoch": re-simulate intermediate domains every epoch; "once": only at the start
    resimulate: str = "epoch"
    # cap on training pairs per link per epoch (None = every eligible path node)
    pairs_per_epoch: int | None = None
    early_stop: bool = True
    sample_mode: str = "draw"

    def __post_init__(self):
        if isinstance(self.window, dict):
            self.window = WindowSpec(**self.window)
        for name in ("conv_channels", "pool_after", "fc_widths"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.n_cnn < 1:
            raise ValueError("the chain needs at least one CNN")
        if not 0.0 < self.per_dc < 1.0:
            raise ValueError("per_dc must lie in (0, 1)")
        if not 0.0 < self.freeze_fraction <= 1.0:
            raise ValueError("freeze_fraction must lie in (0, 1]")
        if self.resimulate not in ("epoch", "once"):
            raise ValueError("resimulate must be 'epoch' or 'once'")
        if self.sample_mode not in ("draw", "argmax"):
            raise ValueError("sample_mode must be 'draw' or 'argmax'")

    def architecture(self, link: int) -> Architecture:
        """Architecture of CNN_link (1-based): it reads ``link`` one-hot domains."""
        return Architecture(
            in_channels=link * (self.num_categories + 1),
            sg=self.window.sg,
            ip=self.window.ip,
            num_categories=self.num_categories,
            conv_channels=self.conv_channels,
            filter_size=self.filter_size,
            pool_after=self.pool_after,
            fc_widths=self.fc_widths,
            activation=self.activation,
            bn_momentum=self.bn_momentum,
        )

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, WindowSpec):
                v = {"sg": list(v.sg), "ip": list(v.ip)}
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RCNNConfig":
        return cls(**d)


@dataclass
class TrainingPair:
    input: np.ndarray
    target: np.ndarray
    center: tuple


@dataclass
class RCNNModel:
    config: RCNNConfig
    chain: list
    optimizers: list
    loss_log: list = field(default_factory=list)
    epochs_done: int = 0
    ema_history: list = field(default_factory=list)

    @classmethod
    def create(cls, config: RCNNConfig) -> "RCNNModel":
        chain, opts = [], []
        for i in range(1, config.n_cnn + 1):
            stack = CNNStack(config.architecture(i))
            init_parameters(stack, derive_seed(config.seed, "init", i))
            chain.append(stack)
            opts.append(AdamState(config.lr, config.beta1, config.beta2, config.adam_epsilon))
        return cls(config, chain, opts)

    @property
    def trained(self) -> bool:
        return self.epochs_done > 0

    def epoch_losses(self, epoch: int) -> list:
        return [loss for e, _, loss in self.loss_log if e == epoch]


# ---------------------------------------------------------------------------
# Input assembly and loss


def assemble_inputs(domains, centers, window: WindowSpec, num_categories: int) -> np.ndarray:
    """Batch of CNN inputs, ``(n, len(domains)·(K+1), *sg)``.

    For each domain (D^0 first) the search-grid window at each center is
    one-hot encoded and the encodings are stacked along the channel axis.
    """
    if not domains:
        raise ValueError("at least one domain is required")
    dims = _values(domains[0]).shape
    parts = []
    for d in domains:
        v = _values(d)
        if v.shape != dims:
            raise ValueError(f"domain dims differ: {v.shape} vs {dims}")
        parts.append(one_hot_encode(extract_windows(v, centers, window.sg), num_categories))
    return np.concatenate(parts, axis=1)


def assemble_input(domains, center, window: WindowSpec, num_categories: int) -> np.ndarray:
    """Single-center variant of :func:`assemble_inputs`, ``(i·(K+1), *sg)``."""
    return assemble_inputs(domains, np.asarray([center]), window, num_categories)[0]


def _values(d):
    return d.values if isinstance(d, CategoricalGrid) else np.asarray(d)


def rcnn_loss(scores: np.ndarray, target: np.ndarray) -> float:
    """Inner-pattern loss: summed cross entropy over every IP node.

    scores : (ip_x, ip_y, ip_z, K); target : (ip_x, ip_y, ip_z) codes in 1..K
    """
    scores = np.asarray(scores, dtype=float)
    target = np.asarray(target)
    if scores.shape[:-1] != target.shape:
        raise ValueError(f"score field {scores.shape} does not match target {target.shape}")
    p = softmax(scores)
    p_true = np.take_along_axis(p, (target - 1)[..., None].astype(np.int64), axis=-1)
    return float(-np.log(np.maximum(p_true, PROB_FLOOR)).sum())


def batch_loss_and_grad(scores: np.ndarray, targets: np.ndarray):
    """Mean over the batch of :func:`rcnn_loss` and its gradient w.r.t. scores."""
    if scores.shape[:-1] != targets.shape:
        raise ValueError(f"score field {scores.shape} does not match targets {targets.shape}")
    B = scores.shape[0]
    p = softmax(scores)
    idx = (targets - 1)[..., None].astype(np.int64)
    p_true = np.take_along_axis(p, idx, axis=-1)
    loss = float(-np.log(np.maximum(p_true, PROB_FLOOR)).sum() / B)
    grad = p.copy()
    np.put_along_axis(grad, idx, p_true - 1.0, axis=-1)
    return loss, grad / B


# ---------------------------------------------------------------------------
# Pair databases


class PairDatabase:
    """DB^i: inputs assembled from D^0..D^{i-1}, targets from the TI.

    Pairs are materialised lazily; the full table would not fit in memory
    at the default search-grid size.
    """

    def __init__(self, ti: CategoricalGrid, domains, centers, window: WindowSpec):
        self.ti = ti
        self.domains = [_values(d) for d in domains]
        self.centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
        self.window = window
        self.num_categories = ti.num_categories

    @property
    def link(self) -> int:
        return len(self.domains)

    def __len__(self):
        return len(self.centers)

    def batch(self, index):
        c = self.centers[index].reshape(-1, 3)
        X = assemble_inputs(self.domains, c, self.window, self.num_categories)
        T = extract_windows(self.ti.values, c, self.window.ip).astype(np.int64)
        return X, T

    def __getitem__(self, k) -> TrainingPair:
        k = range(len(self))[k]
        X, T = self.batch(slice(k, k + 1))
        return TrainingPair(X[0], T[0], tuple(int(v) for v in self.centers[k]))


def interior_centers(order: np.ndarray, dims, ip) -> np.ndarray:
    """Path nodes (kept in path order) whose inner pattern lies inside the grid."""
    coords = np.stack(np.unravel_index(order, dims, order="F"), axis=1)
    half = np.asarray(ip) // 2
    ok = np.all((coords >= half) & (coords < np.asarray(dims) - half), axis=1)
    return coords[ok]


def build_databases(ti: CategoricalGrid, domains, centers, window: WindowSpec) -> list:
    """DB^1..DB^N for ``domains = [D^0, ..., D^N]`` (D^N itself is never read).

    ``centers`` is an ``(n, 3)`` array of node indices in path order, or a
    1-D array of flat (x-fastest) node ids, which is filtered to interior nodes.
    """
    if not ti.is_complete():
        raise ValueError("training image must be fully informed")
    centers = np.asarray(centers)
    if centers.ndim == 1:
        centers = interior_centers(centers, ti.dims, window.ip)
    return [PairDatabase(ti, domains[:i], centers, window) for i in range(1, len(domains))]


# ---------------------------------------------------------------------------
# Training


def train_step(stack: CNNStack, opt: AdamState, X: np.ndarray, T: np.ndarray) -> float:
    scores = stack.forward(X, train=True)
    loss, g = batch_loss_and_grad(scores, T)
    adam_step(stack.params, stack.backward(g), opt)
    return loss


def train(ti: CategoricalGrid, config: RCNNConfig, model: RCNNModel | None = None,
          epoch_callback=None) -> RCNNModel:
    """Train (or resume training of) the chain on a fully informed TI.

    ``epoch_callback(model, epoch)`` runs after each completed epoch, e.g. to
    write a checkpoint.  Every random choice of epoch ``e`` derives from
    ``(config.seed, e)``, so resuming from an epoch checkpoint reproduces the
    uninterrupted run.
    """
    from .simulate import random_path, simulate_chain

    if not ti.is_complete():
        raise ValueError("training image must be fully informed")
    if any(n < s for n, s in zip(ti.dims, config.window.sg)):
        raise ValueError(f"training image {ti.dims} smaller than search grid {config.window.sg}")
    if ti.num_categories != config.num_categories:
        raise ValueError("TI category count differs from config")

    model = model or RCNNModel.create(config)
    K = config.num_categories
    hard = sample_drillholes(ti, config.per_dc, derive_seed(config.seed, "train-hard-data"))
    d0 = migrate_hard_data(CategoricalGrid.unknown(ti.dims, K), hard).values

    domains = None
    stalled = 0
    for epoch in range(model.epochs_done + 1, config.epochs + 1):
        path = random_path(ti.dims, derive_seed(config.seed, "train-path", epoch))
        if domains is None or config.resimulate == "epoch":
            # D^N feeds no database, so only D^1..D^{N-1} are simulated
            domains = simulate_chain(
                model.chain[: config.n_cnn - 1], d0, path.order, config.window, K,
                config.freeze_fraction, derive_seed(config.seed, "train-sim", epoch),
                mode=config.sample_mode,
            )
            domains.append(None)
        centers = interior_centers(path.order, ti.dims, config.window.ip)
        if config.pairs_per_epoch is not None:
            centers = centers[: config.pairs_per_epoch]
        dbs = build_databases(ti, domains, centers, config.window)

        m = config.batch_size
        totals = []
        for i, (db, stack, opt) in enumerate(zip(dbs, model.chain, model.optimizers), start=1):
            losses, counts = [], []
            for start in range(0, len(db), m):
                sl = slice(start, min(start + m, len(db)))
                if sl.stop - sl.start < 2:
                    continue  # batch statistics need two samples
                X, T = db.batch(sl)
                losses.append(train_step(stack, opt, X, T))
                counts.append(sl.stop - sl.start)
            mean_loss = float(np.average(losses, weights=counts))
            model.loss_log.append((epoch, i, mean_loss))
            totals.append(mean_loss)
        model.epochs_done = epoch
        total = float(np.sum(totals))
        logger.info("epoch %d: mean loss per link %s", epoch, np.round(totals, 4).tolist())

        prev = model.ema_history[-1] if model.ema_history else total
        if len(model.ema_history) and total >= _epoch_total(model, epoch - 1):
            stalled += 1
        else:
            stalled = 0
        model.ema_history.append(0.9 * prev + 0.1 * total if model.ema_history else total)
        if stalled >= 10:
            warnings.warn(f"chain loss has not decreased for {stalled} consecutive epochs")

        if epoch_callback is not None:
            epoch_callback(model, epoch)
        if config.early_stop and _converged(model.ema_history):
            logger.info("early stop after epoch %d", epoch)
            break
    return model


def _epoch_total(model: RCNNModel, epoch: int) -> float:
    return float(np.sum(model.epoch_losses(epoch)))


def _converged(ema_history, window=5, tol=1e-3) -> bool:
    if len(ema_history) <= window:
        return False
    old, new = ema_history[-1 - window], ema_history[-1]
    return (old - new) < tol * abs(old)
