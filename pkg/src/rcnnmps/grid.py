"""Categorical 3D lattices, conditioning data and window extraction.

Grids are stored as ``(nx, ny, nz)`` integer arrays indexed ``[ix, iy, iz]``.
The flat/file order is GSLIB's: x fastest, then y, then z, which is
``values.ravel(order="F")``.  Code 0 is reserved for "unknown".
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

UNKNOWN = 0


class GridFormatError(ValueError):
    """Raised when a grid or drill-hole file cannot be parsed."""


@dataclass
class CategoricalGrid:
    """Dense 3D lattice of category codes in ``{0, 1, ..., K}``."""

    values: np.ndarray
    num_categories: int = 2

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 3:
            raise ValueError(f"grid values must be 3D, got shape {values.shape}")
        if not np.issubdtype(values.dtype, np.integer):
            if not np.all(np.mod(values, 1) == 0):
                raise ValueError("grid values must be integer codes")
        values = values.astype(np.int8, copy=True)
        if values.size and (values.min() < 0 or values.max() > self.num_categories):
            raise ValueError(
                f"grid codes must lie in 0..{self.num_categories}, "
                f"found range {values.min()}..{values.max()}"
            )
        self.values = values

    @classmethod
    def unknown(cls, dims, num_categories=2) -> "CategoricalGrid":
        return cls(np.zeros(tuple(dims), dtype=np.int8), num_categories)

    @classmethod
    def from_flat(cls, flat, dims, num_categories=2) -> "CategoricalGrid":
        flat = np.asarray(flat)
        nx, ny, nz = dims
        if flat.size != nx * ny * nz:
            raise ValueError(f"expected {nx * ny * nz} values, got {flat.size}")
        return cls(flat.reshape((nx, ny, nz), order="F"), num_categories)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    @property
    def nz(self) -> int:
        return self.values.shape[2]

    @property
    def size(self) -> int:
        return int(self.values.size)

    def flat(self) -> np.ndarray:
        """Values in file order (x fastest)."""
        return self.values.ravel(order="F")

    def value(self, ix, iy, iz) -> int:
        return int(self.values[ix, iy, iz])

    def is_complete(self) -> bool:
        return not np.any(self.values == UNKNOWN)

    def copy(self) -> "CategoricalGrid":
        return CategoricalGrid(self.values.copy(), self.num_categories)

    def __eq__(self, other):
        if not isinstance(other, CategoricalGrid):
            return NotImplemented
        return (
            self.num_categories == other.num_categories
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )


@dataclass
class DrillHoleSet:
    """Conditioning samples as node coordinates plus category.

    ``coords`` may be fractional (off-lattice CSV input); they are snapped to
    the closest node by :func:`migrate_hard_data`.
    """

    coords: np.ndarray
    categories: np.ndarray
    source_fraction: float | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 3)
        self.categories = np.asarray(self.categories, dtype=np.int64).ravel()
        if len(self.coords) != len(self.categories):
            raise ValueError("coords and categories differ in length")
        if np.any(self.categories <= UNKNOWN):
            raise ValueError("drill-hole samples cannot carry the unknown code")

    def __len__(self):
        return len(self.categories)


@dataclass(frozen=True)
class WindowSpec:
    """Search grid (SG) and inner pattern (IP) sizes, sharing one center."""

    sg: tuple[int, int, int] = (15, 15, 15)
    ip: tuple[int, int, int] = (5, 5, 5)

    def __post_init__(self):
        for name in ("sg", "ip"):
            dims = tuple(int(d) for d in getattr(self, name))
            if len(dims) != 3 or any(d <= 0 or d % 2 == 0 for d in dims):
                raise ValueError(f"{name} dims must be three odd positive integers, got {dims}")
            object.__setattr__(self, name, dims)
        if any(i > s for i, s in zip(self.ip, self.sg)):
            raise ValueError(f"inner pattern {self.ip} exceeds search grid {self.sg}")

    @property
    def ip_size(self) -> int:
        return int(np.prod(self.ip))


# ---------------------------------------------------------------------------
# File I/O


def load_grid(path, dims, num_categories=2) -> CategoricalGrid:
    """Read a single-variable GSLIB-like grid file.

    Layout: title line, variable count (must be 1), variable name, then one
    integer code per line in x-fastest order.
    """
    nx, ny, nz = dims
    expected = nx * ny * nz
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < 3:
        raise GridFormatError(f"{path}: line {len(lines) + 1}: truncated header")
    try:
        nvar = int(lines[1].split()[0])
    except (ValueError, IndexError):
        raise GridFormatError(f"{path}: line 2: expected variable count, got {lines[1]!r}")
    if nvar != 1:
        raise GridFormatError(f"{path}: line 2: expected 1 variable, got {nvar}")

    body = [(i + 4, ln) for i, ln in enumerate(lines[3:]) if ln.strip()]
    if len(body) != expected:
        last = body[-1][0] if body else 3
        raise GridFormatError(
            f"{path}: line {last}: record count {len(body)} does not match "
            f"dims {tuple(dims)} ({expected} records)"
        )
    flat = np.empty(expected, dtype=np.int64)
    for k, (lineno, ln) in enumerate(body):
        token = ln.split()[0]
        try:
            v = float(token)
        except ValueError:
            raise GridFormatError(f"{path}: line {lineno}: not a number: {token!r}")
        if v != int(v) or not 0 <= v <= num_categories:
            raise GridFormatError(
                f"{path}: line {lineno}: code {token} outside 0..{num_categories}"
            )
        flat[k] = int(v)
    return CategoricalGrid.from_flat(flat, dims, num_categories)


def save_grid(grid: CategoricalGrid, path, title=None, name="category") -> None:
    path = Path(path)
    header = f"{title or 'categorical grid'} {grid.nx} {grid.ny} {grid.nz}\n1\n{name}\n"
    body = "\n".join(map(str, grid.flat().tolist()))
    path.write_text(header + body + "\n")


def save_real_grid(values: np.ndarray, path, title="real-valued grid", name="value") -> None:
    """Write a real-valued ``(nx, ny, nz)`` map in the same layout, one real per line."""
    values = np.asarray(values, dtype=float)
    nx, ny, nz = values.shape
    header = f"{title} {nx} {ny} {nz}\n1\n{name}\n"
    body = "\n".join(repr(float(v)) for v in values.ravel(order="F"))
    Path(path).write_text(header + body + "\n")


def load_real_grid(path, dims) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    flat = np.array([float(ln.split()[0]) for ln in lines[3:] if ln.strip()])
    if flat.size != int(np.prod(dims)):
        raise GridFormatError(f"{path}: record count {flat.size} does not match dims {dims}")
    return flat.reshape(tuple(dims), order="F")


def save_drillholes(dh: DrillHoleSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "category"])
        integral = np.all(np.mod(dh.coords, 1) == 0)
        for (x, y, z), c in zip(dh.coords, dh.categories):
            if integral:
                writer.writerow([int(x), int(y), int(z), int(c)])
            else:
                writer.writerow([x, y, z, int(c)])


def load_drillholes(path) -> DrillHoleSet:
    coords, cats = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y", "z", "category"]:
            raise GridFormatError(f"{path}: line 1: expected header x,y,z,category")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                x, y, z, c = row
                coords.append((float(x), float(y), float(z)))
                cats.append(int(c))
            except ValueError:
                raise GridFormatError(f"{path}: line {lineno}: malformed row {row!r}")
            if cats[-1] <= UNKNOWN:
                raise GridFormatError(f"{path}: line {lineno}: unknown code in sample")
    return DrillHoleSet(np.array(coords).reshape(-1, 3), np.array(cats, dtype=np.int64))


# ---------------------------------------------------------------------------
# Conditioning data


def nearest_nodes(coords: np.ndarray, dims) -> np.ndarray:
    """Index of the node whose center is closest to each coordinate.

    On a unit lattice the Euclidean nearest node is per-axis rounding (half
    rounds up), clipped to the grid.
    """
    idx = np.floor(np.asarray(coords, dtype=float) + 0.5).astype(np.int64)
    return np.clip(idx, 0, np.asarray(dims) - 1)


def migrate_hard_data(grid: CategoricalGrid, dh: DrillHoleSet) -> CategoricalGrid:
    """Assign each sample to its closest node; the first sample at a node wins."""
    out = grid.copy()
    if len(dh) == 0:
        return out
    if dh.categories.max() > grid.num_categories:
        raise ValueError("drill-hole category exceeds grid category count")
    nodes = nearest_nodes(dh.coords, grid.dims)
    flat = np.ravel_multi_index(nodes.T, grid.dims)
    _, first = np.unique(flat, return_index=True)
    first.sort()
    winners = nodes[first]
    cats = dh.categories[first]
    # a conflict is a later sample on an occupied node with a different category
    first_cat = dict(zip(flat[first].tolist(), cats.tolist()))
    conflicts = sum(1 for f, c in zip(flat.tolist(), dh.categories.tolist()) if first_cat[f] != c)
    if conflicts:
        logger.warning("hard-data migration: %d conflicting samples dropped (first wins)", conflicts)
    out.values[winners[:, 0], winners[:, 1], winners[:, 2]] = cats
    return out


def sample_drillholes(ti: CategoricalGrid, fraction: float, seed: int) -> DrillHoleSet:
    """Pick random full vertical columns until ``fraction`` of the nodes is covered."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    nx, ny, nz = ti.dims
    target = fraction * ti.size
    n_cols = min(int(np.ceil(target / nz - 1e-9)), nx * ny)
    rng = np.random.default_rng(seed)
    cols = rng.choice(nx * ny, size=n_cols, replace=False)
    ix, iy = np.unravel_index(cols, (nx, ny), order="F")
    iz = np.arange(nz)
    coords = np.stack(
        [np.repeat(ix, nz), np.repeat(iy, nz), np.tile(iz, n_cols)], axis=1
    )
    cats = ti.values[coords[:, 0], coords[:, 1], coords[:, 2]].astype(np.int64)
    if np.any(cats == UNKNOWN):
        raise ValueError("training image is not fully informed at sampled nodes")
    return DrillHoleSet(coords, cats, source_fraction=fraction)


# ---------------------------------------------------------------------------
# Windows


def _check_window(dims, wdims, center=None):
    if any(int(w) % 2 == 0 or int(w) <= 0 for w in wdims):
        raise ValueError(f"window dims must be odd positive, got {tuple(wdims)}")
    if center is not None and any(not 0 <= c < n for c, n in zip(center, dims)):
        raise ValueError(f"center {tuple(center)} outside grid {tuple(dims)}")


def extract_window(grid: CategoricalGrid, center, dims) -> np.ndarray:
    """Window of ``dims`` centered on ``center``; outside nodes read as unknown."""
    _check_window(grid.dims, dims, center)
    return extract_windows(grid.values, np.asarray([center]), dims)[0]


def extract_windows(values: np.ndarray, centers: np.ndarray, dims) -> np.ndarray:
    """Vectorised window extraction for many centers, shape ``(n, wx, wy, wz)``."""
    hx, hy, hz = (int(d) // 2 for d in dims)
    padded = np.pad(values, ((hx, hx), (hy, hy), (hz, hz)), constant_values=UNKNOWN)
    view = np.lib.stride_tricks.sliding_window_view(padded, tuple(int(d) for d in dims))
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 3)
    return view[centers[:, 0], centers[:, 1], centers[:, 2]]


def one_hot_encode(window: np.ndarray, num_categories: int) -> np.ndarray:
    """Channel-first one-hot encoding with ``K + 1`` channels (channel 0 = unknown).

    Accepts a single window ``(wx, wy, wz)`` or a stack ``(n, wx, wy, wz)``.
    """
    window = np.asarray(window)
    if window.size and (window.min() < 0 or window.max() > num_categories):
        raise ValueError(f"window codes outside 0..{num_categories}")
    onehot = np.eye(num_categories + 1)[window]
    return np.moveaxis(onehot, -1, -4)
