"""Structured Cartesian grid with an embedded bounded domain.

The grid is a uniform node lattice over a coordinate box.  A ``Domain``
marks the nodes inside the region of interest (ball, annulus, or the
whole box) and carries the exact Euclidean distance to its boundary,
the inside-node DOF numbering, and second-order finite-difference
machinery in two flavors:

* full-grid centered stencils (``fd1``/``fd2``) for fields defined on
  the whole box, e.g. analytic background data extended into the halo;
* mask-aware sparse stencils (``d1``/``d2``/``d2_mixed``) that never
  read nodes outside the domain, falling back to one-sided second-order
  differences at the mask edge.  These are the stencils from which the
  linearized constraint operator is assembled, so its matrix transpose
  is exact.

Reductions (integration) extract inside nodes in a fixed order, so
repeated runs are bitwise identical.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DomainExceedsGrid

__all__ = [
    "GridSpec", "Ball", "Annulus", "Box", "Domain", "build_domain",
    "fd1", "fd2", "integrate",
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform node lattice: ``x_i = origin + i * spacing`` per axis."""

    dims: tuple
    spacing: float
    origin: tuple
    halo: int = 2

    def __post_init__(self):
        if len(self.dims) != 3:
            raise ValueError("grid is three-dimensional")
        if any(n < 8 for n in self.dims):
            raise ValueError("dims must be >= 8 per axis")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        if self.halo < 2:
            raise ValueError("halo must be >= 2 (second-derivative stencils)")

    @classmethod
    def cube(cls, n, half_width, center=(0.0, 0.0, 0.0), halo=2):
        """n^3 cells (n+1 nodes per axis) over [center-hw, center+hw]^3.

        The cell convention keeps the box center on a node for even n,
        which the symmetry-based checks rely on.
        """
        h = 2.0 * half_width / n
        origin = tuple(c - half_width for c in center)
        return cls(dims=(n + 1, n + 1, n + 1), spacing=h, origin=origin, halo=halo)

    def axes(self):
        return [self.origin[a] + self.spacing * np.arange(self.dims[a])
                for a in range(3)]

    def coords(self):
        """Node coordinates as three broadcastable (nx,ny,nz) arrays."""
        ax = self.axes()
        return np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")

    def box_min(self):
        return np.asarray(self.origin, dtype=float)

    def box_max(self):
        return self.box_min() + self.spacing * (np.asarray(self.dims) - 1)


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float


@dataclass(frozen=True)
class Annulus:
    center: tuple
    r_inner: float
    r_outer: float

    def __post_init__(self):
        if not 0 < self.r_inner < self.r_outer:
            raise ValueError("annulus needs 0 < r_inner < r_outer")


@dataclass(frozen=True)
class Box:
    """The whole grid box shrunk by the halo margin."""


def _signed_distance(shape, grid):
    """Distance to the domain boundary, positive inside."""
    x, y, z = grid.coords()
    if isinstance(shape, Box):
        lo = grid.box_min() + grid.halo * grid.spacing
        hi = grid.box_max() - grid.halo * grid.spacing
        d = np.minimum.reduce([x - lo[0], hi[0] - x, y - lo[1], hi[1] - y,
                               z - lo[2], hi[2] - z])
        return d
    c = shape.center
    r = np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2)
    if isinstance(shape, Ball):
        return shape.radius - r
    return np.minimum(r - shape.r_inner, shape.r_outer - r)


_D1_CEN = (np.array([-1, 1]), np.array([-0.5, 0.5]))
_D1_ONE = (np.array([0, 1, 2]), np.array([-1.5, 2.0, -0.5]))
_D1_TWO = (np.array([0, 1]), np.array([-1.0, 1.0]))
_D2_CEN = (np.array([-1, 0, 1]), np.array([1.0, -2.0, 1.0]))
_D2_ONE = (np.array([0, 1, 2, 3]), np.array([2.0, -5.0, 4.0, -1.0]))
_D2_SHORT = (np.array([0, 1, 2]), np.array([1.0, -2.0, 1.0]))


class Domain:
    """Mask, distances, DOF numbering and difference operators for one Ω."""

    def __init__(self, grid, shape, inside, distance):
        self.grid = grid
        self.shape = shape
        self.inside = inside
        self.distance = distance
        self.n_inside = int(inside.sum())
        dof = np.full(grid.dims, -1, dtype=np.int64)
        dof[inside] = np.arange(self.n_inside)
        self.dof = dof
        self.nodes = np.argwhere(inside)
        self._d1 = [None] * 3
        self._d2 = [None] * 3
        self._d2m = {}
        x, y, z = grid.coords()
        self.node_coords = np.stack(
            [x[inside], y[inside], z[inside]], axis=1)

    # -- gather/scatter between full arrays and inside-node vectors -----

    def gather(self, arr):
        """Inside-node values, shape (M, *trailing) in fixed C order."""
        return np.ascontiguousarray(arr[self.inside])

    def scatter(self, vec, fill=0.0):
        vec = np.asarray(vec)
        out = np.full(tuple(self.grid.dims) + vec.shape[1:], fill, dtype=float)
        out[self.inside] = vec
        return out

    # -- mask-aware sparse stencils --------------------------------------

    def _build_axis(self, axis, table):
        """COO rows for one axis from a priority list of (offsets, coefs, scale)."""
        ins = self.inside
        rows, cols, vals = [], [], []
        remaining = ins.copy()
        for offsets, coefs, scale in table:
            ok = remaining.copy()
            for off in offsets:
                if off == 0:
                    continue
                ok &= _shifted_inside(ins, axis, off)
            if not ok.any():
                continue
            r = self.dof[ok]
            for off, cf in zip(offsets, coefs):
                cols_off = _shifted_dof(self.dof, axis, off)[ok]
                rows.append(r)
                cols.append(cols_off)
                vals.append(np.full(r.shape, cf / scale))
            remaining &= ~ok
        m = self.n_inside
        if rows:
            mat = sp.coo_matrix(
                (np.concatenate(vals),
                 (np.concatenate(rows), np.concatenate(cols))),
                shape=(m, m)).tocsr()
        else:
            mat = sp.csr_matrix((m, m))
        return mat

    def d1(self, axis):
        """First derivative on inside DOFs, centered with one-sided fallback."""
        if self._d1[axis] is None:
            h = self.grid.spacing
            table = [
                (_D1_CEN[0], _D1_CEN[1], h),
                (_D1_ONE[0], _D1_ONE[1], h),
                (-_D1_ONE[0], -_D1_ONE[1], h),
                (_D1_TWO[0], _D1_TWO[1], h),
                (-_D1_TWO[0], -_D1_TWO[1], h),
            ]
            self._d1[axis] = self._build_axis(axis, table)
        return self._d1[axis]

    def d2(self, axis):
        """Pure second derivative on inside DOFs."""
        if self._d2[axis] is None:
            h2 = self.grid.spacing ** 2
            table = [
                (_D2_CEN[0], _D2_CEN[1], h2),
                (_D2_ONE[0], _D2_ONE[1], h2),
                (-_D2_ONE[0], _D2_ONE[1], h2),
                (_D2_SHORT[0], _D2_SHORT[1], h2),
                (-_D2_SHORT[0], _D2_SHORT[1], h2),
            ]
            self._d2[axis] = self._build_axis(axis, table)
        return self._d2[axis]

    def d2_mixed(self, a, b):
        """Mixed second derivative as the symmetrized product of d1's."""
        if a == b:
            return self.d2(a)
        key = (min(a, b), max(a, b))
        if key not in self._d2m:
            da, db = self.d1(key[0]), self.d1(key[1])
            self._d2m[key] = (0.5 * (da @ db + db @ da)).tocsr()
        return self._d2m[key]

    # -- mask-aware derivatives of full arrays ---------------------------

    def _apply(self, mat, arr):
        v = self.gather(arr)
        flat = v.reshape(v.shape[0], -1)
        out = mat @ flat
        return self.scatter(out.reshape(v.shape))

    def md1(self, arr, axis):
        return self._apply(self.d1(axis), arr)

    def md2(self, arr, a, b):
        return self._apply(self.d2_mixed(a, b), arr)

    def edge_depth_cells(self):
        """Chebyshev distance (in cells) from each inside node to the mask edge."""
        from scipy.ndimage import distance_transform_cdt
        return distance_transform_cdt(self.inside, metric="chessboard")

    # -- rectangular centered stencils between node sets -----------------
    #
    # The linearized constraint operator is the exact derivative of the
    # discrete map, whose intermediates (δΓ) live on the one-cell
    # dilation E of the inside set I.  Perturbation DOFs are supported
    # on I and zero-extended, so centered stencils simply drop columns
    # outside the source set.

    def extended_mask(self, cells=1):
        from scipy.ndimage import binary_dilation
        return binary_dilation(self.inside, iterations=cells)

    def node_numbering(self, mask):
        num = np.full(self.grid.dims, -1, dtype=np.int64)
        num[mask] = np.arange(int(mask.sum()))
        return num

    def centered_d1(self, axis, row_mask, row_num, col_mask, col_num):
        """Centered ∂_axis from col_mask-supported values to row_mask nodes."""
        h = self.grid.spacing
        rows, cols, vals = [], [], []
        for off, cf in ((1, 0.5 / h), (-1, -0.5 / h)):
            ok = row_mask & _shifted_inside(col_mask, axis, off)
            if not ok.any():
                continue
            rows.append(row_num[ok])
            cols.append(_shifted_dof(col_num, axis, off)[ok])
            vals.append(np.full(int(ok.sum()), cf))
        nr, nc = int(row_mask.sum()), int(col_mask.sum())
        if rows:
            return sp.coo_matrix(
                (np.concatenate(vals),
                 (np.concatenate(rows), np.concatenate(cols))),
                shape=(nr, nc)).tocsr()
        return sp.csr_matrix((nr, nc))

    def embedding(self, row_mask, row_num, col_mask, col_num):
        """Identity placement of col_mask values into row_mask numbering."""
        both = row_mask & col_mask
        nr, nc = int(row_mask.sum()), int(col_mask.sum())
        return sp.coo_matrix(
            (np.ones(int(both.sum())), (row_num[both], col_num[both])),
            shape=(nr, nc)).tocsr()


def _shifted_inside(inside, axis, off):
    out = np.zeros_like(inside)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if off > 0:
        dst[axis] = slice(0, -off)
        src[axis] = slice(off, None)
    else:
        dst[axis] = slice(-off, None)
        src[axis] = slice(0, off)
    out[tuple(dst)] = inside[tuple(src)]
    return out


def _shifted_dof(dof, axis, off):
    out = np.full(dof.shape, -1, dtype=dof.dtype)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if off > 0:
        dst[axis] = slice(0, -off)
        src[axis] = slice(off, None)
    elif off < 0:
        dst[axis] = slice(-off, None)
        src[axis] = slice(0, off)
    else:
        return dof
    out[tuple(dst)] = dof[tuple(src)]
    return out


def build_domain(grid, shape):
    """Mask the grid with Ω and attach exact boundary distances.

    Raises domain-exceeds-grid unless every inside node keeps at least
    ``grid.halo`` grid nodes between itself and the box edge (the
    stencil-reach requirement behind the two-cell invariant).
    """
    d = _signed_distance(shape, grid)
    inside = d > 0.0
    if not inside.any():
        raise DomainExceedsGrid("domain contains no grid nodes")
    idx = np.argwhere(inside)
    lo = idx.min(axis=0)
    hi = np.asarray(grid.dims) - 1 - idx.max(axis=0)
    if lo.min() < grid.halo or hi.min() < grid.halo:
        raise DomainExceedsGrid(
            "domain reaches within the halo margin of the grid box",
            min_nodes_below=[int(v) for v in lo],
            min_nodes_above=[int(v) for v in hi])
    return Domain(grid, shape, inside, d)


# -- full-grid centered differences (background/analytic fields) --------

def fd1(arr, axis, h):
    """Centered first derivative on a full array, one-sided at box faces."""
    out = np.empty_like(arr, dtype=float)
    a = np.moveaxis(arr, axis, 0)
    o = np.moveaxis(out, axis, 0)
    o[1:-1] = (a[2:] - a[:-2]) / (2 * h)
    o[0] = (-1.5 * a[0] + 2.0 * a[1] - 0.5 * a[2]) / h
    o[-1] = (1.5 * a[-1] - 2.0 * a[-2] + 0.5 * a[-3]) / h
    return out


def fd2(arr, a, b, h):
    """Second derivative on a full array (mixed via repeated fd1)."""
    if a == b:
        out = np.empty_like(arr, dtype=float)
        v = np.moveaxis(arr, a, 0)
        o = np.moveaxis(out, a, 0)
        o[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h ** 2
        o[0] = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / h ** 2
        o[-1] = (2 * v[-1] - 5 * v[-2] + 4 * v[-3] - v[-4]) / h ** 2
        return out
    return fd1(fd1(arr, a, h), b, h)


def integrate(f, measure, domain):
    """Midpoint-rule integral Σ f · measure · Δx³ over inside nodes."""
    h3 = domain.grid.spacing ** 3
    vals = (np.asarray(f) * np.asarray(measure))[domain.inside]
    return float(vals.sum() * h3)
