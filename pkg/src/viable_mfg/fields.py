"""Masked grids, space-time fields and their on-disk format.

Field files are a small self-describing binary: a fixed header, the mask as
run-length encoded uint32 runs, then row-major float64 values of shape
``(n_slices, n_active)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GridMismatch, ViableMFGError
from .geometry import CellGrid, DomainSpec, GridMasks, grid_masks

MAGIC = b"VMFGFLD1"


@dataclass(frozen=True, eq=False)
class MaskedGrid:
    """Active cells of a CellGrid with neighbour tables.

    ``plus[k][i]`` / ``minus[k][i]`` give the compact index of the neighbour of
    active cell ``i`` along axis ``k``, or -1 when that neighbour is inactive
    (zero-flux face).
    """

    grid: CellGrid
    mask: np.ndarray
    centers: np.ndarray
    distance: np.ndarray
    plus: tuple[np.ndarray, ...]
    minus: tuple[np.ndarray, ...]

    @classmethod
    def from_mask(cls, grid: CellGrid, mask: np.ndarray, distance: np.ndarray | None = None) -> "MaskedGrid":
        mask = np.asarray(mask, dtype=bool).ravel()
        full_index = np.full(grid.size, -1, dtype=np.int64)
        active = np.flatnonzero(mask)
        full_index[active] = np.arange(len(active))
        multi = np.unravel_index(active, grid.shape)
        plus, minus = [], []
        for k in range(grid.dim):
            for step, out in ((1, plus), (-1, minus)):
                nb = [m.copy() for m in multi]
                nb[k] = nb[k] + step
                inside = (nb[k] >= 0) & (nb[k] < grid.shape[k])
                idx = np.full(len(active), -1, dtype=np.int64)
                flat = np.ravel_multi_index([c[inside] for c in nb], grid.shape)
                idx[inside] = full_index[flat]
                out.append(idx)
        centers = grid.centers()[active]
        dist = np.full(len(active), np.nan) if distance is None else np.asarray(distance).ravel()[active]
        return cls(grid, mask, centers, dist, tuple(plus), tuple(minus))

    @classmethod
    def for_domain(cls, domain: DomainSpec, h: float, eps: float = 0.0) -> "MaskedGrid":
        gm: GridMasks = grid_masks(domain, h, eps)
        return cls.from_mask(gm.grid, gm.interior, gm.distance)

    @property
    def n(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def cell_volume(self) -> float:
        return self.grid.cell_volume

    def same_layout(self, other: "MaskedGrid") -> bool:
        return (
            self.grid.shape == other.grid.shape
            and np.isclose(self.grid.h, other.grid.h)
            and np.allclose(self.grid.lower, other.grid.lower)
            and np.array_equal(self.mask, other.mask)
        )

    def faces(self, axis: int) -> tuple[np.ndarray, np.ndarray]:
        """Interior faces along ``axis`` as (left cell, right cell) index pairs."""
        left = np.flatnonzero(self.plus[axis] >= 0)
        return left, self.plus[axis][left]

    def restrict(self, values: np.ndarray, other: "MaskedGrid") -> np.ndarray:
        """Map values on ``self`` onto the active cells of ``other`` (zero outside)."""
        if other.grid.shape != self.grid.shape:
            raise GridMismatch("grids differ in shape")
        full = np.zeros(values.shape[:-1] + (self.grid.size,))
        full[..., self.mask] = values
        return full[..., other.mask]

    def to_full(self, values: np.ndarray, fill: float = np.nan) -> np.ndarray:
        full = np.full(values.shape[:-1] + (self.grid.size,), fill)
        full[..., self.mask] = values
        return full.reshape(values.shape[:-1] + self.grid.shape)


@dataclass(eq=False)
class SpaceTimeField:
    """Values per (time slice, active cell); slice ``n`` lives at ``times[n]``."""

    mesh: MaskedGrid
    times: np.ndarray
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if self.values.shape != (len(self.times), self.mesh.n):
            raise ViableMFGError(f"values shape {self.values.shape} != ({len(self.times)}, {self.mesh.n})")
        if not np.all(np.isfinite(self.values)):
            raise ViableMFGError("field contains non-finite values")

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def slice_at(self, t: float) -> np.ndarray:
        n = int(np.clip(np.searchsorted(self.times, t - 1e-12), 0, len(self.times) - 1))
        return self.values[n]


@dataclass(eq=False)
class DensityField(SpaceTimeField):
    """Nonnegative density slices; ``drift`` records the transport field used."""

    drift: np.ndarray | None = None
    min_before_clip: float = 0.0

    def mass(self) -> np.ndarray:
        return self.values.sum(axis=1) * self.mesh.cell_volume


def check_same_grid(a: SpaceTimeField, b: SpaceTimeField) -> None:
    if not a.mesh.same_layout(b.mesh) or a.values.shape != b.values.shape or not np.allclose(a.times, b.times):
        raise GridMismatch("fields live on different grids or time axes")


# ---------------------------------------------------------------------------
# binary I/O


def _rle(mask: np.ndarray) -> np.ndarray:
    """Alternating run lengths starting with a (possibly empty) False run."""
    flat = mask.astype(np.int8).ravel()
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [len(flat)]])
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def _unrle(runs: np.ndarray, size: int) -> np.ndarray:
    vals = np.arange(len(runs)) % 2 == 1
    mask = np.repeat(vals, runs.astype(np.int64))
    if len(mask) != size:
        raise ViableMFGError("corrupt mask encoding")
    return mask


def write_field(path, fld: SpaceTimeField) -> None:
    g = fld.mesh.grid
    runs = _rle(fld.mesh.mask)
    kind = 1 if isinstance(fld, DensityField) else 0
    header = struct.pack(
        "<8sBBI",
        MAGIC,
        g.dim,
        kind,
        len(fld.times),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack(f"<{g.dim}I", *g.shape))
        fh.write(struct.pack(f"<d{g.dim}d", g.h, *g.lower))
        fh.write(np.asarray(fld.times, dtype="<f8").tobytes())
        fh.write(struct.pack("<I", len(runs)))
        fh.write(runs.astype("<u4").tobytes())
        fh.write(np.ascontiguousarray(fld.values, dtype="<f8").tobytes())


def read_field(path) -> SpaceTimeField:
    data = Path(path).read_bytes()
    off = 0
    magic, dim, kind, n_times = struct.unpack_from("<8sBBI", data, off)
    off += struct.calcsize("<8sBBI")
    if magic != MAGIC:
        raise ViableMFGError(f"{path}: not a field file")
    shape = struct.unpack_from(f"<{dim}I", data, off)
    off += 4 * dim
    h, *lower = struct.unpack_from(f"<d{dim}d", data, off)
    off += 8 * (dim + 1)
    times = np.frombuffer(data, dtype="<f8", count=n_times, offset=off).copy()
    off += 8 * n_times
    (n_runs,) = struct.unpack_from("<I", data, off)
    off += 4
    runs = np.frombuffer(data, dtype="<u4", count=n_runs, offset=off)
    off += 4 * n_runs
    grid = CellGrid(np.array(lower), h, tuple(shape))
    mask = _unrle(runs, grid.size)
    mesh = MaskedGrid.from_mask(grid, mask)
    values = np.frombuffer(data, dtype="<f8", offset=off).reshape(n_times, mesh.n).copy()
    cls = DensityField if kind == 1 else SpaceTimeField
    return cls(mesh, times, values)


def write_slices_csv(path, fld: SpaceTimeField, every: int = 1) -> None:
    """One row per (time, cell): t, x_1..x_N, value."""
    rows = []
    for n in range(0, len(fld.times), every):
        block = np.column_stack([np.full(fld.mesh.n, fld.times[n]), fld.mesh.centers, fld.values[n]])
        rows.append(block)
    cols = ["t"] + [f"x{k + 1}" for k in range(fld.mesh.dim)] + ["value"]
    np.savetxt(path, np.vstack(rows), delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
