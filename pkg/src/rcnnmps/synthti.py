"""Surface-based binary lithology generator and sector split.

Each boundary surface is a base elevation plus a sum of randomly oriented
cosines.  Nodes lying above an odd number of surfaces get category 2, the
rest category 1, so category 2 fills the gaps between surface pairs
(1st-2nd, 3rd-4th, ...).  A single offset ``t`` pushes the lower surface of
each pair down and the upper one up; bisection on ``t`` hits a target
category-2 proportion.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .grid import CategoricalGrid

logger = logging.getLogger(__name__)


@dataclass
class SurfaceModelParams:
    nx: int = 100
    ny: int = 100
    nz: int = 50
    n_surfaces: int = 4
    n_cosines: tuple = (3, 6)
    amplitude: tuple = (2.0, 6.0)
    # wavelengths as fractions of nx
    wavelength: tuple = (0.25, 1.0)
    # category-2 proportion to hit; None keeps the raw surfaces
    target_proportion: float | None = 0.235
    proportion_range: tuple = (0.22, 0.25)
    # measure the proportion on the origin-corner block of these dims only
    # (e.g. the training-image crop); None uses the whole field
    target_block: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("n_cosines", "amplitude", "wavelength", "proportion_range"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.target_block is not None:
            self.target_block = tuple(int(v) for v in self.target_block)
        if min(self.nx, self.ny, self.nz) <= 0:
            raise ValueError("grid dims must be positive")
        if self.n_surfaces < 1:
            raise ValueError("need at least one surface")
        if self.target_proportion is not None and not 0.0 < self.target_proportion < 1.0:
            raise ValueError("target proportion must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _undulations(params: SurfaceModelParams, rng) -> np.ndarray:
    """(n_surfaces, nx, ny) elevation perturbations."""
    x = np.arange(params.nx)[:, None] + 0.5
    y = np.arange(params.ny)[None, :] + 0.5
    out = np.zeros((params.n_surfaces, params.nx, params.ny))
    lo, hi = params.n_cosines
    for s in range(params.n_surfaces):
        for _ in range(rng.integers(lo, hi + 1)):
            amp = rng.uniform(*params.amplitude)
            lam = rng.uniform(*params.wavelength) * params.nx
            theta = rng.uniform(0.0, np.pi)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            out[s] += amp * np.cos(2.0 * np.pi * (x * np.cos(theta) + y * np.sin(theta)) / lam + phase)
    return out


def _categorize(surfaces: np.ndarray, nz: int) -> np.ndarray:
    surfaces = np.sort(np.clip(surfaces, 0.0, nz), axis=0)
    zc = np.arange(nz) + 0.5
    below = (surfaces[:, :, :, None] < zc[None, None, None, :]).sum(axis=0)
    return np.where(below % 2 == 1, 2, 1).astype(np.int8)


def _surfaces(base, undul, offset):
    sign = np.where(np.arange(len(base)) % 2 == 0, -1.0, 1.0)
    return (base + sign * offset)[:, None, None] + undul


def generate_surface_model(params: SurfaceModelParams) -> CategoricalGrid:
    rng = np.random.default_rng(params.seed)
    nz = params.nz
    base = (np.arange(params.n_surfaces) + 1) * nz / (params.n_surfaces + 1)
    undul = _undulations(params, rng)

    def build(offset):
        return _categorize(_surfaces(base, undul, offset), nz)

    if params.target_proportion is None:
        return CategoricalGrid(build(0.0), 2)

    target = params.target_proportion
    bx, by, bz = params.target_block or (params.nx, params.ny, params.nz)
    lo, hi = -float(nz), float(nz)
    best, best_err = None, np.inf
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        values = build(mid)
        p = float(np.mean(values[:bx, :by, :bz] == 2))
        if abs(p - target) < best_err:
            best, best_err = values, abs(p - target)
        if abs(p - target) < 1e-4 or hi - lo < 1e-6:
            break
        if p < target:
            lo = mid
        else:
            hi = mid
    p = float(np.mean(best[:bx, :by, :bz] == 2))
    plo, phi = params.proportion_range
    if not plo <= p <= phi:
        logger.warning("proportion target %.3f not reached; achieved %.4f", target, p)
    return CategoricalGrid(best, 2)


def split_sectors(field: CategoricalGrid):
    """Quadrants of a 100x100x50 field: (TI, S1, S2, S3)."""
    if field.dims != (100, 100, 50):
        raise ValueError(f"expected a 100x100x50 field, got {field.dims}")
    return quadrants(field)


def quadrants(field: CategoricalGrid):
    """Four x/y quadrant blocks in the order TI, S1 (+x), S2 (+y), S3 (+x+y)."""
    hx, hy = field.nx // 2, field.ny // 2
    v, K = field.values, field.num_categories
    return (
        CategoricalGrid(v[:hx, :hy], K),
        CategoricalGrid(v[hx:, :hy], K),
        CategoricalGrid(v[:hx, hy:], K),
        CategoricalGrid(v[hx:, hy:], K),
    )


def crop(grid: CategoricalGrid, dims) -> CategoricalGrid:
    """Block of ``dims`` taken from the grid's origin corner."""
    cx, cy, cz = dims
    if cx > grid.nx or cy > grid.ny or cz > grid.nz:
        raise ValueError(f"crop {tuple(dims)} exceeds grid {grid.dims}")
    return CategoricalGrid(grid.values[:cx, :cy, :cz], grid.num_categories)
