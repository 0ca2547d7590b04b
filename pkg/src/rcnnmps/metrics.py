"""Two-point validation statistics: indicator variograms, E-type, variance maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .grid import UNKNOWN, CategoricalGrid

DIRECTIONS = ("omni-horizontal", "vertical")


@dataclass
class Ensemble:
    realizations: list

    def __post_init__(self):
        if not self.realizations:
            raise ValueError("an ensemble needs at least one realization")
        first = self.realizations[0]
        for r in self.realizations:
            if r.dims != first.dims or r.num_categories != first.num_categories:
                raise ValueError("ensemble members must share dims and category count")
            if not r.is_complete():
                raise ValueError("ensemble members must be fully informed")

    def __len__(self):
        return len(self.realizations)

    def __iter__(self):
        return iter(self.realizations)

    def __getitem__(self, i):
        return self.realizations[i]

    @property
    def dims(self):
        return self.realizations[0].dims

    @property
    def num_categories(self):
        return self.realizations[0].num_categories

    def stack(self) -> np.ndarray:
        return np.stack([r.values for r in self.realizations])


@dataclass
class VariogramResult:
    direction: str
    lags: list = field(default_factory=list)  # (h, gamma, pairs)

    @property
    def h(self) -> np.ndarray:
        return np.array([l[0] for l in self.lags], dtype=float)

    @property
    def gamma(self) -> np.ndarray:
        return np.array([l[1] for l in self.lags], dtype=float)

    @property
    def pairs(self) -> np.ndarray:
        return np.array([l[2] for l in self.lags], dtype=np.int64)

    def at(self, h) -> float:
        for lag, g, _ in self.lags:
            if lag == h:
                return g
        raise KeyError(f"no pairs at lag {h}")


def _indicator(grid, category) -> np.ndarray:
    values = grid.values if isinstance(grid, CategoricalGrid) else np.asarray(grid)
    if np.any(values == UNKNOWN):
        raise ValueError("variograms need a fully informed grid")
    return (values == category).astype(np.int8)


def default_max_lag(dims, direction: str) -> int:
    nx, ny, nz = dims
    return max(1, (min(nx, ny) if direction == "omni-horizontal" else nz) // 2)


def indicator_variogram(grid, category: int = 2, direction: str = "vertical",
                        max_lag: int | None = None) -> VariogramResult:
    """Experimental semivariogram of the category indicator.

    ``vertical`` uses z offsets ``h = 1..max_lag``; ``omni-horizontal`` pools
    every in-plane offset ``(dx, dy, 0)`` whose Euclidean length rounds to
    ``h``.  Lags without pairs are omitted.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    z = _indicator(grid, category)
    nx, ny, nz = z.shape
    if max_lag is None:
        max_lag = default_max_lag(z.shape, direction)
    if max_lag < 1:
        raise ValueError("max_lag must be at least 1")

    sq = np.zeros(max_lag + 1, dtype=np.int64)
    npairs = np.zeros(max_lag + 1, dtype=np.int64)
    if direction == "vertical":
        for h in range(1, min(max_lag, nz - 1) + 1):
            sq[h] = np.count_nonzero(z[:, :, h:] != z[:, :, :-h])
            npairs[h] = nx * ny * (nz - h)
    else:
        for dx in range(0, max_lag + 1):
            for dy in range(-max_lag, max_lag + 1):
                if dx == 0 and dy <= 0:
                    continue  # count each unordered pair once
                h = int(np.floor(np.hypot(dx, dy) + 0.5))
                if h < 1 or h > max_lag or dx >= nx or abs(dy) >= ny:
                    continue
                a = z[: nx - dx]
                b = z[dx:]
                if dy >= 0:
                    a, b = a[:, : ny - dy], b[:, dy:]
                else:
                    a, b = a[:, -dy:], b[:, : ny + dy]
                sq[h] += np.count_nonzero(a != b)
                npairs[h] += a.size

    result = VariogramResult(direction)
    for h in range(1, max_lag + 1):
        if npairs[h] > 0:
            result.lags.append((h, 0.5 * sq[h] / npairs[h], int(npairs[h])))
    return result


def variograms(grid, category: int = 2, max_lag: int | None = None) -> list:
    return [indicator_variogram(grid, category, d, max_lag) for d in DIRECTIONS]


def sill_estimate(grid, category: int = 2) -> float:
    """Mean of gamma at the default maximum lag over both directions."""
    return float(np.mean([v.gamma[-1] for v in variograms(grid, category)]))


def indicator_variance(grid, category: int = 2) -> float:
    p = float(_indicator(grid, category).mean())
    return p * (1.0 - p)


def etype(ensemble: Ensemble, category: int = 2) -> np.ndarray:
    """Per-node frequency of ``category`` across the ensemble."""
    return (ensemble.stack() == category).mean(axis=0)


def variance_map(ensemble: Ensemble, category: int = 2) -> np.ndarray:
    """Per-node population variance of the category indicator, ``p (1 - p)``."""
    ind = (ensemble.stack() == category).astype(float)
    return ind.var(axis=0)


def most_probable(ensemble: Ensemble) -> CategoricalGrid:
    """E-type thresholded map: the most frequent category per node (ties to the lowest)."""
    K = ensemble.num_categories
    stack = ensemble.stack()
    freq = np.stack([(stack == k).mean(axis=0) for k in range(1, K + 1)])
    return CategoricalGrid(np.argmax(freq, axis=0) + 1, K)


def proportions(grid: CategoricalGrid) -> np.ndarray:
    """Fraction of nodes in each category 1..K."""
    if not grid.is_complete():
        raise ValueError("proportions need a fully informed grid")
    counts = np.bincount(grid.values.ravel(), minlength=grid.num_categories + 1)[1:]
    return counts / counts.sum()


def minority_proportion_for_variance(variance: float) -> float:
    """Smaller root of ``p (1 - p) = variance``."""
    if not 0.0 <= variance <= 0.25:
        raise ValueError("an indicator variance lies in [0, 0.25]")
    return 0.5 * (1.0 - np.sqrt(1.0 - 4.0 * variance))


def write_variogram_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["direction", "lag", "gamma", "pairs"])
        for res in results:
            for h, g, n in res.lags:
                w.writerow([res.direction, h, repr(float(g)), n])


def read_variogram_csv(path) -> list:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            res = out.setdefault(row["direction"], VariogramResult(row["direction"]))
            res.lags.append((int(row["lag"]), float(row["gamma"]), int(row["pairs"])))
    return list(out.values())
