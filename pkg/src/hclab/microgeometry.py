"""Periodicity-cell partition and the eps-scale perforated composite.

The unit cell Q = (0,1)^d is split into a soft pixel set (the inclusion) and
its stiff complement (the matrix).  Tiling the stiff pixels over Z^d must give
a connected set; this is the one geometric requirement the energies rely on.
At scale eps = 1/n the inclusion is copied into every cell of Omega = (0,1)^d
whose copy keeps a safety strip of width `strip * eps` from the boundary, so
the matrix always owns a full collar along the boundary of Omega.

Everything is pixel-exact: volumes are rationals, the phase of a point is a
pixel lookup, and grids downstream place nodes at pixel corners so that
phase-weighted quadrature is exact with respect to the geometry.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    """Base class for microstructure construction failures."""


class DisconnectedMatrix(GeometryError):
    """The stiff phase (or its periodic extension) is not connected."""


class EmptyPhase(GeometryError):
    """The mask leaves no stiff phase at all."""


class NoInclusions(GeometryError):
    """No translated inclusion fits inside the boundary strip."""


class OutOfDomain(GeometryError):
    """A point query fell outside the closed unit domain."""


def _connected(mask: np.ndarray) -> bool:
    """Flood fill with face adjacency; True if the True-pixels form one component."""
    total = int(mask.sum())
    if total == 0:
        return False
    start = tuple(int(i) for i in np.argwhere(mask)[0])
    seen = np.zeros_like(mask, dtype=bool)
    seen[start] = True
    queue = deque([start])
    count = 1
    shape = mask.shape
    dim = mask.ndim
    while queue:
        pix = queue.popleft()
        for axis in range(dim):
            for step in (-1, 1):
                nxt = list(pix)
                nxt[axis] += step
                if not 0 <= nxt[axis] < shape[axis]:
                    continue
                nxt = tuple(nxt)
                if mask[nxt] and not seen[nxt]:
                    seen[nxt] = True
                    count += 1
                    queue.append(nxt)
    return count == total


@dataclass(frozen=True)
class CellGeometry:
    """Unit periodicity cell: pixel partition into soft inclusion and stiff matrix.

    ``soft_mask[i0, ..., i_{d-1}]`` is True when the pixel with low corner
    ``(i0, ..., i_{d-1}) / resolution`` belongs to the soft phase.  Volumes are
    exact rationals (pixel counts over ``resolution**dim``).
    """

    dim: int
    resolution: int
    soft_mask: np.ndarray
    vol_soft: Fraction
    vol_stiff: Fraction
    degenerate: bool = False

    def __post_init__(self):
        self.soft_mask.setflags(write=False)

    @property
    def soft_pixel_count(self) -> int:
        return int(self.soft_mask.sum())


def build_unit_cell(dim: int, resolution: int, soft_mask) -> CellGeometry:
    """Validate a pixel mask and return the periodicity cell.

    The stiff set must be edge-connected inside the cell and its periodic
    extension must be connected, which is checked on a 3^d block of copies.
    An all-soft mask is rejected; an all-stiff mask is accepted and flagged
    degenerate (homogeneous control medium).
    """
    if dim not in (2, 3):
        raise GeometryError(f"dim must be 2 or 3, got {dim}")
    mask = np.asarray(soft_mask, dtype=bool)
    if mask.shape != (resolution,) * dim:
        raise GeometryError(f"mask shape {mask.shape} does not match resolution {resolution}^{dim}")
    stiff = ~mask
    if not stiff.any():
        raise EmptyPhase("soft mask is all-true: no stiff matrix left")
    degenerate = not mask.any()
    if not degenerate:
        if not _connected(stiff):
            raise DisconnectedMatrix("stiff phase is not edge-connected within the cell")
        tiled = np.tile(stiff, (3,) * dim)
        if not _connected(tiled):
            raise DisconnectedMatrix("periodic extension of the stiff phase is disconnected (3^d tiling test)")
    count = int(mask.sum())
    vol_soft = Fraction(count, resolution**dim)
    return CellGeometry(
        dim=dim,
        resolution=resolution,
        soft_mask=mask,
        vol_soft=vol_soft,
        vol_stiff=Fraction(1) - vol_soft,
        degenerate=degenerate,
    )


def builtin_cell(name: str) -> CellGeometry:
    """Construct one of the named stock geometries.

    block4   2D, m=4, centered 2x2 soft block (|soft| = 1/4)
    block8   2D, m=8, centered 4x4 soft block (|soft| = 1/4)
    stiff4   2D, m=4, no inclusion (degenerate homogeneous control)
    fiber3d  3D, m=4, full-height 2x2 soft column (connected complement)
    """
    if name == "block4":
        mask = np.zeros((4, 4), dtype=bool)
        mask[1:3, 1:3] = True
        return build_unit_cell(2, 4, mask)
    if name == "block8":
        mask = np.zeros((8, 8), dtype=bool)
        mask[2:6, 2:6] = True
        return build_unit_cell(2, 8, mask)
    if name == "stiff4":
        return build_unit_cell(2, 4, np.zeros((4, 4), dtype=bool))
    if name == "fiber3d":
        mask = np.zeros((4, 4, 4), dtype=bool)
        mask[1:3, 1:3, :] = True
        return build_unit_cell(3, 4, mask)
    raise GeometryError(f"unknown builtin cell {name!r}")


def load_cell_mask(path) -> CellGeometry:
    """Read the ASCII mask format: first line "d m", then the 0/1 grid.

    For d=2 there follow m lines of m characters; for d=3, m blocks of m lines
    separated by blank lines.  '1' marks a soft pixel; the first data line is
    the low-corner row (row-major, origin at the low corner).
    """
    text = Path(path).read_text()
    lines = [ln.rstrip() for ln in text.splitlines()]
    if not lines:
        raise GeometryError(f"empty mask file {path}")
    head = lines[0].split()
    if len(head) != 2:
        raise GeometryError(f"bad header {lines[0]!r}: expected 'd m'")
    dim, m = int(head[0]), int(head[1])
    rows = [ln for ln in lines[1:] if ln.strip() != ""]
    expected = m if dim == 2 else m * m
    if len(rows) != expected:
        raise GeometryError(f"expected {expected} data lines, found {len(rows)}")
    bits = np.array([[ch == "1" for ch in ln.strip()] for ln in rows], dtype=bool)
    if bits.shape[1] != m:
        raise GeometryError(f"data lines must have {m} characters")
    mask = bits.reshape((m,) * dim)
    return build_unit_cell(dim, m, mask)


def save_cell_mask(path, cell: CellGeometry) -> None:
    """Write the ASCII mask format (inverse of load_cell_mask)."""
    lines = [f"{cell.dim} {cell.resolution}"]
    flat = cell.soft_mask.reshape(-1, cell.resolution)
    block = cell.resolution if cell.dim == 3 else len(flat)
    for i, row in enumerate(flat):
        if cell.dim == 3 and i > 0 and i % block == 0:
            lines.append("")
        lines.append("".join("1" if b else "0" for b in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _boundary_distance(corners: np.ndarray, n: int, m: int) -> Fraction:
    """Exact distance of a set of lattice corners (units 1/(n*m)) to the boundary of (0,1)^d.

    The distance function min_i min(x_i, 1-x_i) is concave, so its minimum
    over a union of pixels is attained at a pixel corner.
    """
    denom = n * m
    best = None
    lo = corners.min(axis=1)
    hi = corners.max(axis=1)
    for low, high in zip(lo, hi):
        cand = min(Fraction(int(low), denom), Fraction(denom - int(high), denom))
        best = cand if best is None else min(best, cand)
    return best


@dataclass(frozen=True)
class MicroDomain:
    """The eps-scale composite on Omega = (0,1)^d.

    ``translations`` are the integer cell indices whose inclusion copy clears
    the boundary strip, ``translations_hat`` those whose *entire cell cube*
    clears it (used by unfolding-restricted constructions).  ``soft_field``
    marks the soft pixels of the global ``(n_cells * m)^d`` pixel grid.
    """

    cell: CellGeometry
    n_cells: int
    strip: float
    translations: tuple
    translations_hat: tuple
    soft_field: np.ndarray

    def __post_init__(self):
        self.soft_field.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.cell.dim

    @property
    def eps(self) -> float:
        return 1.0 / self.n_cells

    @property
    def n_el(self) -> int:
        """Pixels (= elements) per side of the global grid."""
        return self.n_cells * self.cell.resolution

    def measure_soft(self) -> Fraction:
        """Exact Lebesgue measure of the soft region."""
        return len(self.translations) * self.cell.vol_soft * Fraction(1, self.n_cells**self.dim)

    def measure_stiff(self) -> Fraction:
        return Fraction(1) - self.measure_soft()

    def measure_outside_hat(self) -> Fraction:
        """Exact measure of Omega minus the union of hat-cells."""
        return Fraction(self.n_cells**self.dim - len(self.translations_hat), self.n_cells**self.dim)


def build_micro_domain(cell: CellGeometry, n_cells: int, strip: float = 0.5) -> MicroDomain:
    """Assemble the composite: admitted translations and the global phase field.

    A cell t is admitted when dist(eps*(t + soft set), boundary) > strip*eps,
    evaluated exactly in rational arithmetic on pixel corners.  Degenerate
    cells (no soft pixels) admit no translations by definition.
    """
    if n_cells < 2:
        raise GeometryError(f"n_cells must be >= 2, got {n_cells}")
    if strip <= 0:
        raise GeometryError(f"strip must be positive, got {strip}")
    d, m = cell.dim, cell.resolution
    threshold = Fraction(strip) * Fraction(1, n_cells)

    soft_idx = np.argwhere(cell.soft_mask)
    # Corner lattice of the soft pixel set in cell-local units of 1/m.
    if len(soft_idx):
        corner_offsets = np.array(list(np.ndindex((2,) * d)))
        soft_corners = np.unique(
            (soft_idx[:, None, :] + corner_offsets[None, :, :]).reshape(-1, d), axis=0
        )
    else:
        soft_corners = np.empty((0, d), dtype=int)
    cell_corners = np.array(list(np.ndindex((2,) * d))) * m

    translations = []
    translations_hat = []
    for t in np.ndindex((n_cells,) * d):
        base = np.asarray(t) * m
        if len(soft_corners):
            dist = _boundary_distance((base + soft_corners).T, n_cells, m)
            if dist > threshold:
                translations.append(tuple(int(i) for i in t))
        dist_cube = _boundary_distance((base + cell_corners).T, n_cells, m)
        if dist_cube > threshold:
            translations_hat.append(tuple(int(i) for i in t))

    if not cell.degenerate and not translations:
        raise NoInclusions(
            f"no inclusion fits: strip {strip} at eps=1/{n_cells} excludes every cell"
        )

    soft_field = np.zeros((n_cells * m,) * d, dtype=bool)
    for t in translations:
        sl = tuple(slice(ti * m, (ti + 1) * m) for ti in t)
        soft_field[sl] = cell.soft_mask
    return MicroDomain(
        cell=cell,
        n_cells=n_cells,
        strip=strip,
        translations=tuple(translations),
        translations_hat=tuple(translations_hat),
        soft_field=soft_field,
    )


def phase_indicator(domain: MicroDomain, phase: int, point) -> int:
    """Pointwise indicator chi^phase at a point of the closed unit domain.

    Pixels are half-open except along the top faces, so the indicators of the
    two phases always sum to one.
    """
    if phase not in (0, 1):
        raise GeometryError(f"phase must be 0 (soft) or 1 (stiff), got {phase}")
    x = np.asarray(point, dtype=float)
    if x.shape != (domain.dim,):
        raise GeometryError(f"point must have {domain.dim} coordinates")
    if (x < 0).any() or (x > 1).any():
        raise OutOfDomain(f"point {point} lies outside [0,1]^{domain.dim}")
    n_el = domain.n_el
    idx = np.minimum((x * n_el).astype(int), n_el - 1)
    soft = bool(domain.soft_field[tuple(idx)])
    return int(soft == (phase == 0))
