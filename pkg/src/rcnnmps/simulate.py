"""Sequential recursive simulation over D^1..D^N.

Random streams of a realization with seed ``s``:

* path:    ``random_path(dims, s)`` (shared by every domain)
* freeze:  ``np.random.default_rng([s, 1])`` picks which IP nodes are frozen
* draw:    ``np.random.default_rng([s, 2])`` gives one uniform per assigned
  node, consumed domain by domain, visit by visit, center first and then the
  frozen IP nodes in x-fastest order.

CNN_i only reads D^0..D^{i-1}, which are fixed while D^i is being filled,
so a pass first walks the path to decide which nodes are visited and which
IP nodes each visit freezes, then evaluates CNN_i for all visited centers
in batches, then draws categories in visit order.  The result is identical
to evaluating the network inside the walk.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .grid import UNKNOWN, CategoricalGrid, DrillHoleSet, WindowSpec, migrate_hard_data
from .metrics import Ensemble
from .nn import softmax
from .rcnn import RCNNModel, assemble_inputs

logger = logging.getLogger(__name__)

FORWARD_CHUNK = 128


@dataclass
class RandomPath:
    order: np.ndarray
    seed: int

    def __len__(self):
        return len(self.order)


def random_path(dims, seed: int) -> RandomPath:
    """Uniform random permutation of flat (x-fastest) node ids."""
    if any(int(d) <= 0 for d in dims):
        raise ValueError(f"dims must be positive, got {tuple(dims)}")
    n = int(np.prod(dims))
    return RandomPath(np.random.default_rng(seed).permutation(n), seed)


def draw_category(probabilities, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from a ccdf; returns a 1-based category."""
    p = np.asarray(probabilities, dtype=float)
    k = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
    return min(k, len(p) - 1) + 1


def _draw_many(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    k = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(k, probs.shape[1] - 1) + 1


def _ip_offsets(ip) -> np.ndarray:
    """IP offsets relative to the center, x-fastest order."""
    hx, hy, hz = (d // 2 for d in ip)
    oz, oy, ox = np.meshgrid(
        np.arange(-hz, hz + 1), np.arange(-hy, hy + 1), np.arange(-hx, hx + 1), indexing="ij"
    )
    return np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=1)


def plan_pass(known: np.ndarray, order: np.ndarray, ip, freeze_fraction: float,
              freeze_rng: np.random.Generator):
    """Walk the path once over a domain, choosing visits and frozen IP nodes.

    ``known`` (3D bool) is updated in place.  Returns the visited centers
    ``(V, 3)`` and, for each assigned node, ``(visit index, IP position, x, y, z)``
    in assignment order.
    """
    dims = np.asarray(known.shape)
    offsets = _ip_offsets(ip)
    center_pos = len(offsets) // 2
    others = np.delete(np.arange(len(offsets)), center_pos)
    coords = np.stack(np.unravel_index(order, known.shape, order="F"), axis=1)

    visits, assigned = [], []
    for c in coords:
        if known[c[0], c[1], c[2]]:
            continue
        v = len(visits)
        visits.append(c)
        known[c[0], c[1], c[2]] = True
        assigned.append((v, center_pos, c[0], c[1], c[2]))
        if len(others):
            nb = c + offsets[others]
            inside = np.all((nb >= 0) & (nb < dims), axis=1)
            pos, nb = others[inside], nb[inside]
            free = ~known[nb[:, 0], nb[:, 1], nb[:, 2]]
            pos, nb = pos[free], nb[free]
            if len(pos) and freeze_fraction < 1.0:
                keep = freeze_rng.random(len(pos)) < freeze_fraction
                pos, nb = pos[keep], nb[keep]
            if len(pos):
                known[nb[:, 0], nb[:, 1], nb[:, 2]] = True
                assigned.extend((v, p, *n) for p, n in zip(pos.tolist(), nb.tolist()))
    return np.asarray(visits, dtype=np.int64).reshape(-1, 3), np.asarray(assigned, dtype=np.int64).reshape(-1, 5)


def predict_ccdf(stack, domains, centers, window: WindowSpec, num_categories: int) -> np.ndarray:
    """Per-IP-node probabilities ``(V, n_ip, K)`` with IP nodes in x-fastest order."""
    out = []
    for s in range(0, len(centers), FORWARD_CHUNK):
        X = assemble_inputs(domains, centers[s : s + FORWARD_CHUNK], window, num_categories)
        scores = stack.forward(X, train=False)
        out.append(softmax(scores).transpose(0, 3, 2, 1, 4).reshape(len(X), -1, num_categories))
    if not out:
        return np.zeros((0, window.ip_size, num_categories))
    return np.concatenate(out)


def simulate_domain(stack, previous, init: np.ndarray, order: np.ndarray, window: WindowSpec,
                    num_categories: int, freeze_fraction: float, freeze_rng, draw_rng,
                    mode: str = "draw") -> np.ndarray:
    """Fill every unknown node of ``init`` with CNN predictions from ``previous`` domains."""
    values = init.copy()
    known = values != UNKNOWN
    while not known.all():
        centers, assigned = plan_pass(known, order, window.ip, freeze_fraction, freeze_rng)
        probs = predict_ccdf(stack, previous, centers, window, num_categories)
        p = probs[assigned[:, 0], assigned[:, 1]]
        if mode == "argmax":
            cats = np.argmax(p, axis=1) + 1
        else:
            cats = _draw_many(p, draw_rng.random(len(p)))
        values[assigned[:, 2], assigned[:, 3], assigned[:, 4]] = cats
    return values


def simulate_chain(chain, d0: np.ndarray, order: np.ndarray, window: WindowSpec,
                   num_categories: int, freeze_fraction: float, seed: int,
                   mode: str = "draw") -> list:
    """Return ``[D^0, D^1, ..., D^len(chain)]`` as value arrays."""
    freeze_rng = np.random.default_rng([seed, 1])
    draw_rng = np.random.default_rng([seed, 2])
    domains = [d0]
    for stack in chain:
        domains.append(
            simulate_domain(stack, domains, d0, order, window, num_categories,
                            freeze_fraction, freeze_rng, draw_rng, mode)
        )
    return domains


def simulate_realization(model: RCNNModel, hard_data: DrillHoleSet, dims, seed: int,
                         freeze_fraction: float | None = None, mode: str | None = None,
                         return_domains: bool = False):
    """One conditioned realization (the last domain D^N)."""
    cfg = model.config
    if not model.trained:
        raise ValueError("model has not been trained")
    if any(int(d) < i for d, i in zip(dims, cfg.window.ip)):
        raise ValueError(f"domain {tuple(dims)} smaller than inner pattern {cfg.window.ip}")
    K = cfg.num_categories
    ff = cfg.freeze_fraction if freeze_fraction is None else freeze_fraction
    if not 0.0 < ff <= 1.0:
        raise ValueError("freeze_fraction must lie in (0, 1]")
    d0 = migrate_hard_data(CategoricalGrid.unknown(dims, K), hard_data).values
    path = random_path(dims, seed)
    domains = simulate_chain(model.chain, d0, path.order, cfg.window, K, ff, seed,
                             mode or cfg.sample_mode)
    result = CategoricalGrid(domains[-1], K)
    if return_domains:
        return result, [CategoricalGrid(d, K) for d in domains]
    return result


@dataclass
class SimulationJob:
    model: RCNNModel
    hard_data: DrillHoleSet
    dims: tuple
    realizations: int
    base_seed: int = 0
    freeze_fraction: float = 0.5
    mode: str = "draw"
    jobs: int = 1

    def seeds(self) -> list:
        return [self.base_seed + r for r in range(self.realizations)]


def _run_one(args):
    job, seed = args
    return simulate_realization(job.model, job.hard_data, job.dims, seed,
                                job.freeze_fraction, job.mode)


def run_ensemble(job: SimulationJob) -> Ensemble:
    """Realization r uses seed ``base_seed + r``; results are returned in order."""
    if job.realizations < 1:
        raise ValueError("at least one realization is required")
    tasks = [(job, s) for s in job.seeds()]
    if job.jobs > 1:
        with ProcessPoolExecutor(max_workers=job.jobs) as pool:
            reals = list(pool.map(_run_one, tasks))
    else:
        reals = [_run_one(t) for t in tasks]
    return Ensemble(reals)
