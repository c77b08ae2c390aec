"""Discrete function spaces on the structured grid.

Nodes sit at pixel corners, elements coincide with pixels, and every energy
term is integrated with the same 2^d tensor Gauss rule, so phase-weighted
quadrature is exact with respect to the geometry and quadratic densities of
multilinear gradients are integrated exactly per element.

Deformations are nodal vectors; plastic strains are nodal sl(d) coefficient
vectors (orthonormal basis, so the K-ball constraint is a Euclidean ball) and
the interpolated field is the multilinear interpolant of the *entries* of
P = exp(M), which leaves SL(d) between nodes by O(h^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hclab import slgeometry


class GridMismatch(ValueError):
    """Fields on incompatible grids were combined."""


class FieldError(ValueError):
    pass


_GAUSS_1D = (0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0))


class Grid:
    """Uniform grid on (0, extent)^d with n_el multilinear elements per side."""

    def __init__(self, dim: int, n_el: int, extent: float = 1.0):
        if dim not in (2, 3):
            raise FieldError(f"dim must be 2 or 3, got {dim}")
        if n_el < 1:
            raise FieldError("n_el must be >= 1")
        self.dim = dim
        self.n_el = n_el
        self.n_pts = n_el + 1
        self.extent = float(extent)
        self.h = self.extent / n_el
        self.n_nodes = self.n_pts**dim
        self.n_elements = n_el**dim
        self.corners = np.array(list(np.ndindex((2,) * dim)))  # (2^d, d)
        self.n_corners = 2**dim
        # element -> global node gather table
        el_idx = np.array(list(np.ndindex((n_el,) * dim)))  # (E, d)
        node_multi = el_idx[:, None, :] + self.corners[None, :, :]
        self.el_nodes = np.ravel_multi_index(node_multi.reshape(-1, dim).T, (self.n_pts,) * dim).reshape(
            self.n_elements, self.n_corners
        )
        self._el_multi = el_idx
        # tensor Gauss rule (2 points per axis)
        gp = np.array(list(np.ndindex((2,) * dim)), dtype=float)
        self.gauss_ref = np.where(gp == 0, _GAUSS_1D[0], _GAUSS_1D[1])  # (ngp, d)
        self.n_gauss = 2**dim
        self.gauss_weight = 0.5**dim  # per point, reference cell measure 1
        self.N_gauss = self._shape_values(self.gauss_ref)  # (ngp, 2^d)
        self.dN_gauss = self._shape_gradients(self.gauss_ref) / self.h  # physical (ngp, 2^d, d)

    # -- shape functions ----------------------------------------------------
    def _shape_values(self, ref: np.ndarray) -> np.ndarray:
        ref = np.asarray(ref, dtype=float)
        vals = np.ones((ref.shape[0], self.n_corners))
        for k in range(self.dim):
            axis = np.where(self.corners[None, :, k] == 0, 1.0 - ref[:, None, k], ref[:, None, k])
            vals *= axis
        return vals

    def _shape_gradients(self, ref: np.ndarray) -> np.ndarray:
        ref = np.asarray(ref, dtype=float)
        grads = np.ones((ref.shape[0], self.n_corners, self.dim))
        for k in range(self.dim):
            for j in range(self.dim):
                if j == k:
                    axis = np.where(self.corners[None, :, j] == 0, -1.0, 1.0)
                else:
                    axis = np.where(self.corners[None, :, j] == 0, 1.0 - ref[:, None, j], ref[:, None, j])
                grads[:, :, k] *= axis
        return grads

    # -- evaluation ---------------------------------------------------------
    def gather(self, nodal: np.ndarray) -> np.ndarray:
        return nodal[self.el_nodes]

    def gauss_values(self, nodal: np.ndarray) -> np.ndarray:
        """(E, ngp, C...) values of the interpolant at the Gauss points."""
        gathered = self.gather(nodal)
        tail = gathered.shape[2:]
        flat = gathered.reshape(self.n_elements, self.n_corners, -1)
        out = np.tensordot(flat, self.N_gauss, axes=([1], [1]))  # (E, C, g)
        return np.moveaxis(out, -1, 1).reshape((self.n_elements, self.n_gauss) + tail)

    def gauss_matrix_values(self, nodal_mats: np.ndarray) -> np.ndarray:
        return self.gauss_values(nodal_mats)

    def gauss_gradients(self, nodal: np.ndarray) -> np.ndarray:
        """(E, ngp, C..., d) gradients; exact for the multilinear interpolant."""
        gathered = self.gather(nodal)
        tail = gathered.shape[2:]
        flat = gathered.reshape(self.n_elements, self.n_corners, -1)
        out = np.tensordot(flat, self.dN_gauss, axes=([1], [1]))  # (E, C, g, k)
        out = np.moveaxis(out, 2, 1)  # (E, g, C, k)
        return out.reshape((self.n_elements, self.n_gauss) + tail + (self.dim,))

    def values_at_ref(self, nodal: np.ndarray, element: int, ref: np.ndarray) -> np.ndarray:
        N = self._shape_values(np.atleast_2d(ref))
        return np.einsum("n...,pn->p...", nodal[self.el_nodes[element]], N)[0]

    def gradients_at_ref(self, nodal: np.ndarray, element: int, ref: np.ndarray) -> np.ndarray:
        dN = self._shape_gradients(np.atleast_2d(ref)) / self.h
        return np.einsum("n...,pnk->p...k", nodal[self.el_nodes[element]], dN)[0]

    def interpolate_at(self, nodal: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Evaluate the interpolant at arbitrary points of [0,1]^d."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        idx = np.minimum((pts / self.h).astype(int), self.n_el - 1)
        ref = pts / self.h - idx
        weights = np.ones((len(pts), self.n_corners))
        for k in range(self.dim):
            weights *= np.where(self.corners[None, :, k] == 0, 1.0 - ref[:, None, k], ref[:, None, k])
        node_multi = idx[:, None, :] + self.corners[None, :, :]
        nodes = np.ravel_multi_index(node_multi.reshape(-1, self.dim).T, (self.n_pts,) * self.dim).reshape(
            len(pts), self.n_corners
        )
        return np.einsum("pn,pn...->p...", weights, nodal[nodes])

    # -- assembly helpers ----------------------------------------------------
    def accumulate_from_gradients(self, S: np.ndarray, out: np.ndarray, element_mask=None) -> None:
        """out[node] += sum_g w S[e,g,...,k] dN[g,n,k], S of shape (E', ngp, C..., d)."""
        els = np.arange(self.n_elements) if element_mask is None else np.nonzero(element_mask)[0]
        tail = S.shape[2:-1]
        flat = S.reshape(len(els), self.n_gauss, -1, self.dim)
        loc = np.tensordot(flat, self.dN_gauss, axes=([1, 3], [0, 2]))  # (E, C, n)
        loc = np.moveaxis(loc, -1, 1).reshape((len(els), self.n_corners) + tail)
        np.add.at(out, self.el_nodes[els], loc * (self.gauss_weight * self.h**self.dim))

    def accumulate_from_values(self, S: np.ndarray, out: np.ndarray, element_mask=None) -> None:
        """out[node] += sum_g w S[e,g,...] N[g,n]."""
        els = np.arange(self.n_elements) if element_mask is None else np.nonzero(element_mask)[0]
        tail = S.shape[2:]
        flat = S.reshape(len(els), self.n_gauss, -1)
        loc = np.tensordot(flat, self.N_gauss, axes=([1], [0]))  # (E, C, n)
        loc = np.moveaxis(loc, -1, 1).reshape((len(els), self.n_corners) + tail)
        np.add.at(out, self.el_nodes[els], loc * (self.gauss_weight * self.h**self.dim))

    def integrate(self, per_gauss: np.ndarray, element_mask=None) -> float:
        """Integral of a per-(element, gauss) scalar sample over the (masked) elements."""
        vals = per_gauss if element_mask is None else per_gauss[element_mask]
        return float(np.sum(vals) * self.gauss_weight * self.h**self.dim)

    # -- node classification and norms ----------------------------------------
    def boundary_node_mask(self) -> np.ndarray:
        shape = (self.n_pts,) * self.dim
        mask = np.zeros(shape, dtype=bool)
        for k in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[k] = 0
            mask[tuple(sl)] = True
            sl[k] = -1
            mask[tuple(sl)] = True
        return mask.reshape(-1)

    def node_coords(self) -> np.ndarray:
        axes = [np.linspace(0.0, self.extent, self.n_pts)] * self.dim
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)

    def low_corner_node_mask(self) -> np.ndarray:
        """Nodes that are the low corner of some element (drops top faces)."""
        shape = (self.n_pts,) * self.dim
        mask = np.ones(shape, dtype=bool)
        for k in range(self.dim):
            sl = [slice(None)] * self.dim
            sl[k] = -1
            mask[tuple(sl)] = False
        return mask.reshape(-1)

    def lattice_norm_sq(self, nodal: np.ndarray) -> float:
        """Riemann-sum L2 norm squared over low-corner nodes; the discrete
        quantity the unfolding re-indexing preserves exactly."""
        mask = self.low_corner_node_mask()
        vals = nodal[mask]
        return float(np.sum(vals * vals) * self.h**self.dim)

    def l2_norm_sq(self, nodal: np.ndarray, element_mask=None) -> float:
        vals = self.gauss_values(nodal)
        per = (vals * vals).reshape(self.n_elements, self.n_gauss, -1).sum(axis=-1)
        return self.integrate(per, element_mask)

    def grad_norm_sq(self, nodal: np.ndarray, element_mask=None) -> float:
        grads = self.gauss_gradients(nodal)
        per = (grads * grads).reshape(self.n_elements, self.n_gauss, -1).sum(axis=-1)
        return self.integrate(per, element_mask)


def node_incidence_masks(dim: int, n_el: int, active_elements: np.ndarray):
    """Per-node masks over the (n_el+1)^d lattice: (all incident elements
    active, any incident element active).  Out-of-domain neighbors count as
    inactive, so lattice-boundary nodes never satisfy the 'all' mask."""
    active = np.asarray(active_elements, dtype=bool).reshape((n_el,) * dim)
    pad = np.zeros((n_el + 2,) * dim, dtype=bool)
    pad[(slice(1, -1),) * dim] = active
    all_mask = np.ones((n_el + 1,) * dim, dtype=bool)
    any_mask = np.zeros((n_el + 1,) * dim, dtype=bool)
    for corner in np.ndindex((2,) * dim):
        sl = tuple(slice(c, c + n_el + 1) for c in corner)
        all_mask &= pad[sl]
        any_mask |= pad[sl]
    return all_mask.reshape(-1), any_mask.reshape(-1)


@dataclass
class DeformationField:
    """Nodal vector field y with an optional zero Dirichlet trace."""

    grid: Grid
    values: np.ndarray
    bc: str = "zero"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_nodes, self.grid.dim):
            raise GridMismatch(
                f"values shape {self.values.shape} does not match grid ({self.grid.n_nodes}, {self.grid.dim})"
            )
        if self.bc not in ("zero", "free"):
            raise FieldError(f"bc must be 'zero' or 'free', got {self.bc!r}")
        if self.bc == "zero":
            self.values[self.grid.boundary_node_mask()] = 0.0

    def copy(self) -> "DeformationField":
        return DeformationField(self.grid, self.values.copy(), self.bc)

    @classmethod
    def zero(cls, grid: Grid, bc: str = "zero") -> "DeformationField":
        return cls(grid, np.zeros((grid.n_nodes, grid.dim)), bc)

    @classmethod
    def from_function(cls, grid: Grid, fn, bc: str = "free") -> "DeformationField":
        return cls(grid, np.asarray(fn(grid.node_coords()), dtype=float), bc)


@dataclass
class PlasticField:
    """Nodal SL(d) field stored as trace-free log coefficients inside the K ball.

    Writes project radially onto |M| <= r_K, so membership in K is an
    invariant of the data rather than a runtime check.
    """

    grid: Grid
    coeffs: np.ndarray
    r_K: float

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        k = self.grid.dim**2 - 1
        if self.coeffs.shape != (self.grid.n_nodes, k):
            raise GridMismatch(f"coeffs shape {self.coeffs.shape} does not match ({self.grid.n_nodes}, {k})")
        self.project()

    def project(self) -> None:
        # small relative pad keeps the projection idempotent under rounding
        norms = np.linalg.norm(self.coeffs, axis=1)
        over = norms > self.r_K * (1.0 + 1e-14)
        if over.any():
            self.coeffs[over] *= (self.r_K / norms[over])[:, None]

    def log_matrices(self) -> np.ndarray:
        return slgeometry.coeffs_to_matrices(self.coeffs, self.grid.dim)

    def matrices(self) -> np.ndarray:
        return slgeometry.exp_batch(self.log_matrices())

    def copy(self) -> "PlasticField":
        return PlasticField(self.grid, self.coeffs.copy(), self.r_K)

    @classmethod
    def identity(cls, grid: Grid, r_K: float) -> "PlasticField":
        return cls(grid, np.zeros((grid.n_nodes, grid.dim**2 - 1)), r_K)

    @classmethod
    def from_log_function(cls, grid: Grid, fn, r_K: float) -> "PlasticField":
        """fn maps node coordinates (N, d) to coefficient vectors (N, d^2-1)."""
        return cls(grid, np.asarray(fn(grid.node_coords()), dtype=float), r_K)


def eval_gradient(y: DeformationField, element: int | None = None, gauss_point: int | None = None, ref_point=None):
    """Exact gradient of the multilinear interpolant.

    With no arguments returns all (E, ngp, d, d) Gauss-point gradients;
    otherwise the gradient at one Gauss point or at explicit reference
    coordinates of one element.
    """
    if element is None:
        return y.grid.gauss_gradients(y.values)
    if ref_point is not None:
        return y.grid.gradients_at_ref(y.values, element, np.asarray(ref_point, dtype=float))
    grads = np.einsum(
        "nc,gnk->gck", y.values[y.grid.el_nodes[element]], y.grid.dN_gauss
    )
    return grads if gauss_point is None else grads[gauss_point]


def plastic_gradient(P: PlasticField, element: int | None = None, ref_point=None):
    """Componentwise gradient of the interpolated matrix entries of P = exp(M).

    Shape (d, d, d) per Gauss point: the literal gradient of the matrix field,
    not of its log coordinates.
    """
    mats = P.matrices()
    if element is None:
        return np.einsum("enij,gnk->egijk", P.grid.gather(mats), P.grid.dN_gauss)
    if ref_point is not None:
        dN = P.grid._shape_gradients(np.atleast_2d(ref_point)) / P.grid.h
        return np.einsum("nij,pnk->pijk", mats[P.grid.el_nodes[element]], dN)[0]
    return np.einsum("nij,gnk->gijk", mats[P.grid.el_nodes[element]], P.grid.dN_gauss)


# -- snapshots ----------------------------------------------------------------


def save_field(path, fld) -> None:
    """ASCII snapshot: a header with the grid shape, then one node per line."""
    if isinstance(fld, DeformationField):
        header = f"deformation {fld.grid.dim} {fld.grid.n_el} {fld.grid.dim} {fld.bc}"
        table = fld.values
    elif isinstance(fld, PlasticField):
        header = f"plastic {fld.grid.dim} {fld.grid.n_el} {fld.coeffs.shape[1]} {fld.r_K!r}"
        table = fld.coeffs
    else:
        raise FieldError(f"cannot snapshot object of type {type(fld)!r}")
    lines = [header]
    lines.extend(" ".join(f"{v:.17g}" for v in row) for row in table)
    Path(path).write_text("\n".join(lines) + "\n")


def load_field(path):
    lines = Path(path).read_text().splitlines()
    kind, dim, n_el, ncols, extra = lines[0].split()
    dim, n_el, ncols = int(dim), int(n_el), int(ncols)
    grid = Grid(dim, n_el)
    table = np.array([[float(v) for v in ln.split()] for ln in lines[1 : 1 + grid.n_nodes]])
    if table.shape != (grid.n_nodes, ncols):
        raise FieldError(f"snapshot table shape {table.shape} does not match header")
    if kind == "deformation":
        return DeformationField(grid, table, bc=extra)
    if kind == "plastic":
        return PlasticField(grid, table, r_K=float(extra))
    raise FieldError(f"unknown snapshot kind {kind!r}")


def prolong_deformation(y: DeformationField, fine: Grid) -> DeformationField:
    """Nodal injection: evaluate the coarse interpolant at the fine nodes."""
    vals = y.grid.interpolate_at(y.values, fine.node_coords())
    return DeformationField(fine, vals, bc=y.bc)


def prolong_plastic(P: PlasticField, fine: Grid) -> PlasticField:
    coeffs = P.grid.interpolate_at(P.coeffs, fine.node_coords())
    return PlasticField(fine, coeffs, r_K=P.r_K)
