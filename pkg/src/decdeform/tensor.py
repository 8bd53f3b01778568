"""Pointwise and differential tensor calculus for a Riemannian metric field.

Fields are full-grid numpy arrays: scalars (nx,ny,nz), vectors
(nx,ny,nz,3), 2-tensors (nx,ny,nz,3,3).  Background quantities (metric,
momentum and their caches) are differentiated with full-grid centered
stencils; solution-space fields (perturbations, lapse-shift pairs) use
the domain's mask-aware stencils.  The ``diff`` argument selects the
flavor.

The metric g and perturbations h are covariant, the momentum π and
perturbations w are contravariant; raising and lowering is always
explicit.
"""

import numpy as np

from . import grid as gridmod
from .errors import SingularMetric

# symmetric storage order used by the assembled operators
SYM = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]
SYM_INDEX = {}
for _a, (_i, _j) in enumerate(SYM):
    SYM_INDEX[(_i, _j)] = _a
    SYM_INDEX[(_j, _i)] = _a
SYM_MULT = np.array([1.0, 2.0, 2.0, 1.0, 2.0, 1.0])


def sym_to_full(s):
    """(...,6) symmetric storage -> (...,3,3)."""
    out = np.empty(s.shape[:-1] + (3, 3), dtype=s.dtype)
    for a, (i, j) in enumerate(SYM):
        out[..., i, j] = s[..., a]
        out[..., j, i] = s[..., a]
    return out


def full_to_sym(m):
    out = np.empty(m.shape[:-2] + (6,), dtype=m.dtype)
    for a, (i, j) in enumerate(SYM):
        out[..., a] = m[..., i, j]
    return out


class FullDiff:
    """Centered full-grid differences (background/analytic fields)."""

    def __init__(self, h):
        self.h = h

    def d1(self, arr, axis):
        return gridmod.fd1(arr, axis, self.h)

    def d2(self, arr, a, b):
        return gridmod.fd2(arr, a, b, self.h)


class MaskedDiff:
    """Mask-aware differences; never reads nodes outside the domain."""

    def __init__(self, domain):
        self.domain = domain

    def d1(self, arr, axis):
        return self.domain.md1(arr, axis)

    def d2(self, arr, a, b):
        return self.domain.md2(arr, a, b)


def _inv33(g, det):
    """Adjugate inverse, vectorized, finite even on stray far-out nodes."""
    a = g
    inv = np.empty_like(a)
    inv[..., 0, 0] = a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1]
    inv[..., 0, 1] = a[..., 0, 2] * a[..., 2, 1] - a[..., 0, 1] * a[..., 2, 2]
    inv[..., 0, 2] = a[..., 0, 1] * a[..., 1, 2] - a[..., 0, 2] * a[..., 1, 1]
    inv[..., 1, 0] = inv[..., 0, 1]
    inv[..., 1, 1] = a[..., 0, 0] * a[..., 2, 2] - a[..., 0, 2] * a[..., 2, 0]
    inv[..., 1, 2] = a[..., 0, 2] * a[..., 1, 0] - a[..., 0, 0] * a[..., 1, 2]
    inv[..., 2, 0] = inv[..., 0, 2]
    inv[..., 2, 1] = inv[..., 1, 2]
    inv[..., 2, 2] = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    return inv / det[..., None, None]


def christoffel_from(g, ginv, diff):
    """Γ^k_{ij} = ½ g^{kl}(∂_i g_{jl} + ∂_j g_{il} − ∂_l g_{ij}); index order [k,i,j]."""
    dg = np.stack([diff.d1(g, a) for a in range(3)], axis=-3)  # [a,i,j] = ∂_a g_ij
    s = dg + np.swapaxes(dg, -3, -2) - np.moveaxis(dg, -3, -1)  # [i,j,l]
    return 0.5 * np.einsum('...kl,...ijl->...kij', ginv, s)


def curvature_from(gamma, ginv, diff):
    """Ricci and scalar curvature by differencing the discrete Γ field.

    R_ij = ∂_a Γ^a_ij − ∂_i Γ^a_aj + Γ^a_ab Γ^b_ij − Γ^a_ib Γ^b_aj,
    the convention in which the round sphere has positive scalar curvature.
    """
    dgam = np.stack([diff.d1(gamma, a) for a in range(3)], axis=-4)
    r = (np.einsum('...aaij->...ij', dgam)
         - np.einsum('...iaaj->...ij', dgam)
         + np.einsum('...aab,...bij->...ij', gamma, gamma)
         - np.einsum('...aib,...baj->...ij', gamma, gamma))
    r = 0.5 * (r + np.swapaxes(r, -1, -2))
    return r, np.einsum('...ij,...ij->...', ginv, r)


def christoffel_delta(met, h, dginv, diff):
    """Exact derivative of the discrete Γ along a metric perturbation h."""
    dg = np.stack([diff.d1(met.g, a) for a in range(3)], axis=-3)
    s = dg + np.swapaxes(dg, -3, -2) - np.moveaxis(dg, -3, -1)
    dh = np.stack([diff.d1(h, a) for a in range(3)], axis=-3)
    ds = dh + np.swapaxes(dh, -3, -2) - np.moveaxis(dh, -3, -1)
    return (0.5 * np.einsum('...kl,...ijl->...kij', dginv, s)
            + 0.5 * np.einsum('...kl,...ijl->...kij', met.inv, ds))


def curvature_delta(met, dgam, diff):
    """Exact derivative of the discrete Ricci along a Christoffel variation."""
    dd = np.stack([diff.d1(dgam, a) for a in range(3)], axis=-4)
    gamma = met.gamma
    r = (np.einsum('...aaij->...ij', dd)
         - np.einsum('...iaaj->...ij', dd)
         + np.einsum('...aab,...bij->...ij', dgam, gamma)
         + np.einsum('...aab,...bij->...ij', gamma, dgam)
         - np.einsum('...aib,...baj->...ij', dgam, gamma)
         - np.einsum('...aib,...baj->...ij', gamma, dgam))
    return 0.5 * (r + np.swapaxes(r, -1, -2))


class MetricField:
    """Metric with eagerly computed caches; immutable after construction.

    ``check_mask`` marks the nodes where positive definiteness is
    enforced (the domain plus its stencil collar).  Outside that region
    values may be arbitrary smooth continuations.
    """

    def __init__(self, gridspec, g, check_mask=None):
        self.grid = gridspec
        g = np.asarray(g, dtype=float)
        if g.shape != tuple(gridspec.dims) + (3, 3):
            raise ValueError("metric must have shape dims + (3,3)")
        self.g = 0.5 * (g + np.swapaxes(g, -1, -2))
        if check_mask is not None:
            ev = np.linalg.eigvalsh(self.g[check_mask])
            if ev.size and ev.min() <= 0:
                raise SingularMetric(
                    "metric not positive definite on the checked region",
                    min_eigenvalue=float(ev.min()))
        det = np.linalg.det(self.g)
        det_safe = np.where(np.abs(det) > 1e-300, det, 1e-300)
        self.det = det
        self.sqrt_det = np.sqrt(np.abs(det_safe))
        self.inv = _inv33(self.g, det_safe)
        diff = FullDiff(gridspec.spacing)
        self.gamma = christoffel_from(self.g, self.inv, diff)
        self.ricci, self.scalar = curvature_from(self.gamma, self.inv, diff)
        self.g.flags.writeable = False

    @classmethod
    def flat(cls, gridspec):
        g = np.zeros(tuple(gridspec.dims) + (3, 3))
        g[..., 0, 0] = g[..., 1, 1] = g[..., 2, 2] = 1.0
        return cls(gridspec, g)

    def full_diff(self):
        return FullDiff(self.grid.spacing)


# -- spec-facing wrappers ------------------------------------------------

def christoffel(met):
    return met.gamma


def curvature(met):
    return met.ricci, met.scalar


# -- index gymnastics ----------------------------------------------------

def lower2(met, t_con):
    return np.einsum('...ia,...ab,...jb->...ij', met.g, t_con, met.g)


def raise2(met, t_cov):
    return np.einsum('...ia,...ab,...jb->...ij', met.inv, t_cov, met.inv)


def lower1(met, v_con):
    return np.einsum('...ij,...j->...i', met.g, v_con)


def raise1(met, v_cov):
    return np.einsum('...ij,...j->...i', met.inv, v_cov)


def trace_con(met, t_con):
    """tr_g of a contravariant 2-tensor: g_ij T^ij."""
    return np.einsum('...ij,...ij->...', met.g, t_con)


def trace_cov(met, t_cov):
    """tr_g of a covariant 2-tensor: g^ij T_ij."""
    return np.einsum('...ij,...ij->...', met.inv, t_cov)


def inner_cov(met, a_cov, b_cov):
    return np.einsum('...ij,...kl,...ik,...jl->...', a_cov, b_cov, met.inv, met.inv)


def inner_con(met, a_con, b_con):
    return np.einsum('...ij,...kl,...ik,...jl->...', a_con, b_con, met.g, met.g)


def norm_vec_con(met, v):
    return np.sqrt(np.maximum(np.einsum('...ij,...i,...j->...', met.g, v, v), 0.0))


def norm_cov(met, t_cov):
    return np.sqrt(np.maximum(inner_cov(met, t_cov, t_cov), 0.0))


def norm_con(met, t_con):
    return np.sqrt(np.maximum(inner_con(met, t_con, t_con), 0.0))


# -- covariant differential operators ------------------------------------

def grad_scalar(diff, f):
    return np.stack([diff.d1(f, a) for a in range(3)], axis=-1)


def hessian(met, f, diff=None):
    """f_{;ij} = ∂²_ij f − Γ^k_{ij} ∂_k f."""
    diff = diff or met.full_diff()
    df = grad_scalar(diff, f)
    h = np.empty(f.shape + (3, 3))
    for i in range(3):
        for j in range(i, 3):
            h[..., i, j] = diff.d2(f, i, j)
            h[..., j, i] = h[..., i, j]
    return h - np.einsum('...kij,...k->...ij', met.gamma, df)


def laplacian(met, f, diff=None):
    return np.einsum('...ij,...ij->...', met.inv, hessian(met, f, diff))


def cov_d_vector(met, X, diff=None):
    """∇_j X^i as [i,j]: ∂_j X^i + Γ^i_{jm} X^m."""
    diff = diff or met.full_diff()
    dX = np.stack([diff.d1(X, a) for a in range(3)], axis=-1)  # [i,j] = ∂_j X^i
    return dX + np.einsum('...ijm,...m->...ij', met.gamma, X)


def div_vector(met, X, diff=None):
    cd = cov_d_vector(met, X, diff)
    return np.einsum('...ii->...', cd)


def cov_d_sym2_cov(met, h, diff=None):
    """h_{ij;k} as [i,j,k]: ∂_k h_ij − Γ^m_{ki} h_mj − Γ^m_{kj} h_im."""
    diff = diff or met.full_diff()
    dh = np.stack([diff.d1(h, a) for a in range(3)], axis=-1)  # [i,j,k] = ∂_k h_ij
    corr1 = np.einsum('...mki,...mj->...ijk', met.gamma, h)
    corr2 = np.einsum('...mkj,...im->...ijk', met.gamma, h)
    return dh - corr1 - corr2


def cov_d_sym2_con(met, w, diff=None):
    """w^{ij}_{;k} as [i,j,k]: ∂_k w^ij + Γ^i_{km} w^mj + Γ^j_{km} w^im."""
    diff = diff or met.full_diff()
    dw = np.stack([diff.d1(w, a) for a in range(3)], axis=-1)
    corr1 = np.einsum('...ikm,...mj->...ijk', met.gamma, w)
    corr2 = np.einsum('...jkm,...im->...ijk', met.gamma, w)
    return dw + corr1 + corr2


def div_sym2_con(met, w, diff=None):
    """(div_g w)^i = w^{ij}_{;j}."""
    cd = cov_d_sym2_con(met, w, diff)
    return np.einsum('...ijj->...i', cd)


def cov_div_pi(met, pi, diff=None):
    """Momentum-constraint current density J^i = π^{ij}_{;j}."""
    return div_sym2_con(met, pi, diff)


def lie_metric(met, X, diff=None):
    """(𝒟_g X)^{ij} = X^{i;j} + X^{j;i} (contravariant Killing operator)."""
    cd = cov_d_vector(met, X, diff)                       # X^i_{;k}
    up = np.einsum('...jk,...ik->...ij', met.inv, cd)     # X^{i;j}
    return up + np.swapaxes(up, -1, -2)


def lie_momentum(met, X, pi, diff=None):
    """(L_X π)^{ij} = X^k π^{ij}_{;k} − π^{kj} X^i_{;k} − π^{ik} X^j_{;k}."""
    cdpi = cov_d_sym2_con(met, pi, diff)
    cdX = cov_d_vector(met, X, diff)
    return (np.einsum('...ijk,...k->...ij', cdpi, X)
            - np.einsum('...kj,...ik->...ij', pi, cdX)
            - np.einsum('...ik,...jk->...ij', pi, cdX))


def lie_derivative(met, X, target, field=None, diff=None):
    """Spec-facing dispatch: target 'metric' -> 𝒟_g X, 'momentum' -> L_X π."""
    if target == "metric":
        return lie_metric(met, X, diff)
    if target == "momentum":
        return lie_momentum(met, X, field, diff)
    raise ValueError(f"unknown lie_derivative target {target!r}")
