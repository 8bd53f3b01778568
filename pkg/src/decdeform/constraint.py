"""Constraint map Φ, linearization DΦ, formal adjoint, modified operator.

``dphi`` is the exact derivative of the discrete Φ: the product/chain
rule is pushed through the discrete Christoffel → Ricci composition
with the same centered stencils, so the finite-difference Taylor
identity Φ(g+εh) − Φ(g) = ε·DΦ(h) + O(ε²) holds to roundoff in the
linear term.  Analytically this is exactly the displayed linearization;
an independent discretization of the displayed adjoint formula
(``dphi_star_analytic``) is kept as a consistency check against the
matrix transpose.

Perturbations and lapse-shift fields are zero-extended outside Ω; the
assembled sparse matrix (``build_linearization``) encodes the same
arithmetic on inside-node DOFs, with intermediates (δΓ) living on the
one-cell dilation of the inside set.  Its transpose is the exact
discrete adjoint.

DOF layout (component-major): perturbations [h_0..h_5, w_0..w_5] in
symmetric storage order, constraint values [ham, mom_0, mom_1, mom_2],
each block of length M = number of inside nodes.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import tensor
from .errors import IndefinitePerturbedMetric
from .families import ConstraintValue, InitialData
from .tensor import (SYM, SYM_INDEX, SYM_MULT, FullDiff, MetricField,
                     cov_div_pi)

__all__ = [
    "InitialData", "ConstraintValue", "Perturbation", "LapseShift",
    "phi", "dphi", "dphi_star_analytic", "phi_modified", "dphi_modified",
    "dphi_modified_star", "taylor_remainder", "build_linearization",
]


@dataclass
class Perturbation:
    """(h, w): covariant metric perturbation, contravariant momentum one."""

    h: np.ndarray
    w: np.ndarray

    def __add__(self, other):
        return Perturbation(self.h + other.h, self.w + other.w)

    def scaled(self, c):
        return Perturbation(c * self.h, c * self.w)


@dataclass
class LapseShift:
    f: np.ndarray
    X: np.ndarray


def phi(data):
    """Φ(g,π) = (R + (tr π)²/(n−1) − |π|², div_g π)."""
    met = data.met
    trpi = tensor.trace_con(met, data.pi)
    pisq = tensor.inner_con(met, data.pi, data.pi)
    ham = met.scalar + trpi ** 2 / (data.n - 1) - pisq
    mom = cov_div_pi(met, data.pi)
    return ConstraintValue(ham, mom)


def dphi(data, pert):
    """Exact linearization of the discrete Φ at (g,π) along (h,w)."""
    met = data.met
    fd = met.full_diff()
    h, w = pert.h, pert.w
    g, ginv, pi = met.g, met.inv, data.pi
    cf = 2.0 / (data.n - 1)

    dginv = -np.einsum('...ia,...ab,...bj->...ij', ginv, h, ginv)
    dgam = tensor.christoffel_delta(met, h, dginv, fd)
    dric = tensor.curvature_delta(met, dgam, fd)
    dscal = (np.einsum('...ij,...ij->...', dginv, met.ricci)
             + np.einsum('...ij,...ij->...', ginv, dric))

    trpi = tensor.trace_con(met, pi)
    dtrpi = (np.einsum('...ij,...ij->...', h, pi)
             + np.einsum('...ij,...ij->...', g, w))
    # δ|π|² = 2 h·(πgπ) + 2 (gπg)·w
    pgp = np.einsum('...ia,...ab,...bj->...ij', pi, g, pi)
    gpg = np.einsum('...ia,...ab,...bj->...ij', g, pi, g)
    dpisq = (2.0 * np.einsum('...ij,...ij->...', h, pgp)
             + 2.0 * np.einsum('...ij,...ij->...', gpg, w))
    ham = dscal + cf * trpi * dtrpi - dpisq

    # δ(div_g π) = ∂_j w^{ij} + Γ^i_{jm} w^{mj} + Γ^j_{jm} w^{im}
    #              + δΓ^i_{jm} π^{mj} + δΓ^j_{jm} π^{im}
    mom = (tensor.div_sym2_con(met, w, fd)
           + np.einsum('...ijm,...mj->...i', dgam, pi)
           + np.einsum('...jjm,...im->...i', dgam, pi))
    return ConstraintValue(ham, mom)


def _correction_vector(data, W):
    """Y = div_g π + W from the base data (enters all modified maps)."""
    J = cov_div_pi(data.met, data.pi)
    return J if W is None else J + W


def phi_modified(data, W, trial):
    """Φ^W_(g,π)(γ,τ) = Φ(γ,τ) + (0, ½ γ·(div_g π + W)), base-metric contraction."""
    Y = _correction_vector(data, W)
    pv = phi(trial)
    corr = 0.5 * np.einsum('...ij,...jk,...k->...i',
                           data.met.inv, trial.met.g, Y)
    return ConstraintValue(pv.ham, pv.mom + corr)


def dphi_modified(data, W, pert):
    Y = _correction_vector(data, W)
    pv = dphi(data, pert)
    corr = 0.5 * np.einsum('...ij,...jk,...k->...i',
                           data.met.inv, pert.h, Y)
    return ConstraintValue(pv.ham, pv.mom + corr)


def dphi_star_analytic(data, ls):
    """Independent discretization of the displayed formal L²(dμ_g) adjoint."""
    met = data.met
    fd = met.full_diff()
    f, X = ls.f, ls.X
    g, ginv, pi = met.g, met.inv, data.pi
    cf = 2.0 / (data.n - 1)

    hess = tensor.hessian(met, f, fd)
    lap = np.einsum('...ij,...ij->...', ginv, hess)
    lstar = -lap[..., None, None] * g + hess - f[..., None, None] * met.ricci

    trpi = tensor.trace_con(met, pi)
    pilow = np.einsum('...ia,...ab,...bj->...ij', g, pi, g)
    pipi = np.einsum('...ia,...ab,...bc,...cd,...dj->...ij', g, pi, g, pi, g)
    zero_h = (cf * trpi[..., None, None] * pilow - 2.0 * pipi) * f[..., None, None]

    liepi = tensor.lie_momentum(met, X, pi, fd)
    liepi_low = np.einsum('...il,...jm,...lm->...ij', g, g, liepi)
    cdX = tensor.cov_d_vector(met, X, fd)
    divX = np.einsum('...ii->...', cdX)
    xlow = tensor.lower1(met, X)
    divpi = cov_div_pi(met, pi)
    divpi_low = tensor.lower1(met, divpi)
    xdp = np.einsum('...i,...j->...ij', xlow, divpi_low)
    xcm = np.einsum('...ka,...am,...km->...', g, cdX, pi)
    xdiv = np.einsum('...k,...k->...', xlow, divpi)
    pi_block = 0.5 * (liepi_low + divX[..., None, None] * pilow
                      - xdp - np.swapaxes(xdp, -1, -2)
                      - (xcm + xdiv)[..., None, None] * g)

    first = lstar + zero_h + pi_block
    second = (-0.5 * tensor.lie_metric(met, X, fd)
              + (cf * trpi[..., None, None] * ginv - 2.0 * pi)
              * f[..., None, None])
    return Perturbation(first, second)


def dphi_modified_star(data, W, ls):
    Y = _correction_vector(data, W)
    pert = dphi_star_analytic(data, ls)
    xlow = tensor.lower1(data.met, ls.X)
    zlow = tensor.lower1(data.met, Y)
    extra = 0.25 * (np.einsum('...i,...j->...ij', xlow, zlow)
                    + np.einsum('...i,...j->...ij', zlow, xlow))
    return Perturbation(pert.h + extra, pert.w)


def taylor_remainder(data, pert, check_mask=None, modified=None):
    """Q(h,w) = Φ(g+h, π+w) − Φ(g,π) − DΦ(h,w).

    With ``modified=(W,)`` the modified-map remainder Q^W is returned;
    the correction term is linear in (γ,τ), so Q^W equals Q up to the
    identical arithmetic path.
    """
    g_new = data.met.g + pert.h
    if check_mask is not None:
        ev = np.linalg.eigvalsh(g_new[check_mask])
        if ev.size and ev.min() <= 0:
            raise IndefinitePerturbedMetric(
                "g + h is not positive definite",
                min_eigenvalue=float(ev.min()))
    trial = InitialData(MetricField(data.grid, g_new), data.pi + pert.w, data.n)
    if modified is None:
        return phi(trial) - phi(data) - dphi(data, pert)
    (W,) = modified
    return (phi_modified(data, W, trial) - phi_modified(data, W, data)
            - dphi_modified(data, W, pert))


# -- assembled sparse linearization --------------------------------------

def _acc(d, key, mat):
    if key in d:
        d[key] = d[key] + mat
    else:
        d[key] = mat


def build_linearization(data, W, domain):
    """Sparse matrix of DΦ^W on inside-node DOFs (4M rows × 12M cols).

    Mirrors ``dphi_modified`` term by term with the same centered
    stencils (perturbations zero-extended outside Ω), so the action
    matches it to roundoff and the transpose is the exact adjoint.
    """
    met = data.met
    gridspec = domain.grid
    I = domain.inside
    E = domain.extended_mask(1)
    numI = domain.dof
    numE = domain.node_numbering(E)
    M = domain.n_inside

    fd = met.full_diff()
    g, ginv, pi = met.g, met.inv, data.pi
    gam = met.gamma
    dg = np.stack([fd.d1(g, a) for a in range(3)], axis=-3)
    S = dg + np.swapaxes(dg, -3, -2) - np.moveaxis(dg, -3, -1)   # [i,j,l]
    cf = 2.0 / (data.n - 1)
    trpi = tensor.trace_con(met, pi)
    pgp = np.einsum('...ia,...ab,...bj->...ij', pi, g, pi)
    gpg = np.einsum('...ia,...ab,...bj->...ij', g, pi, g)
    girg = np.einsum('...ia,...ab,...bj->...ij', ginv, met.ricci, ginv)
    Y = _correction_vector(data, W)

    ginvE, SE = ginv[E], S[E]
    ginvI, gamI, piI = ginv[I], gam[I], pi[I]

    d1IE = [domain.centered_d1(a, E, numE, I, numI) for a in range(3)]
    d1EI = [domain.centered_d1(a, I, numI, E, numE) for a in range(3)]
    d1II = [domain.centered_d1(a, I, numI, I, numI) for a in range(3)]
    emb = domain.embedding(E, numE, I, numI)
    rIE = domain.embedding(I, numI, E, numE)

    def dgE(vec):
        return sp.diags(vec)

    # δΓ^k_{ij} on E, blocks over h components
    dgam_blocks = {}
    for k in range(3):
        for A, (i, j) in enumerate(SYM):
            dd = {}
            # −½ g^{ka} g^{lb} h_ab S_ijl   (pointwise, h on I embedded in E)
            for B, (a, b) in enumerate(SYM):
                coef = sum(ginvE[:, k, a] * ginvE[:, l, b] * SE[:, i, j, l]
                           for l in range(3))
                if a != b:
                    coef = coef + sum(
                        ginvE[:, k, b] * ginvE[:, l, a] * SE[:, i, j, l]
                        for l in range(3))
                _acc(dd, B, dgE(-0.5 * coef) @ emb)
            # ½ g^{kl} (∂_i h_jl + ∂_j h_il − ∂_l h_ij)
            for l in range(3):
                cmat = dgE(0.5 * ginvE[:, k, l])
                _acc(dd, SYM_INDEX[(j, l)], cmat @ d1IE[i])
                _acc(dd, SYM_INDEX[(i, l)], cmat @ d1IE[j])
                _acc(dd, SYM_INDEX[(i, j)], -(cmat @ d1IE[l]))
            dgam_blocks[(k, i, j)] = dd
            dgam_blocks[(k, j, i)] = dd

    # trace δΓ^a_{aj} on E (for the second Ricci term)
    tr_dgam = []
    for j in range(3):
        dd = {}
        for a in range(3):
            for B, mat in dgam_blocks[(a, a, j)].items():
                _acc(dd, B, mat)
        tr_dgam.append(dd)

    # δRic_ij at I (full index pairs, symmetrized into sym storage)
    dric_full = {}
    for i in range(3):
        for j in range(3):
            dd = {}
            for a in range(3):
                for B, mat in dgam_blocks[(a, i, j)].items():
                    _acc(dd, B, d1EI[a] @ mat)
            for B, mat in tr_dgam[j].items():
                _acc(dd, B, -(d1EI[i] @ mat))
            # pointwise ΓδΓ products at I
            for a in range(3):
                for b in range(3):
                    c1 = sp.diags(gamI[:, b, i, j]) @ rIE        # Γ^b_ij δΓ^a_ab
                    for B, mat in dgam_blocks[(a, a, b)].items():
                        _acc(dd, B, c1 @ mat)
                    c2 = sp.diags(gamI[:, a, a, b]) @ rIE        # Γ^a_ab δΓ^b_ij
                    for B, mat in dgam_blocks[(b, i, j)].items():
                        _acc(dd, B, c2 @ mat)
                    c3 = sp.diags(-gamI[:, b, a, j]) @ rIE       # −Γ^b_aj δΓ^a_ib
                    for B, mat in dgam_blocks[(a, i, b)].items():
                        _acc(dd, B, c3 @ mat)
                    c4 = sp.diags(-gamI[:, a, i, b]) @ rIE       # −Γ^a_ib δΓ^b_aj
                    for B, mat in dgam_blocks[(b, a, j)].items():
                        _acc(dd, B, c4 @ mat)
            dric_full[(i, j)] = dd

    dric_sym = {}
    for A, (i, j) in enumerate(SYM):
        dd = {}
        for B, mat in dric_full[(i, j)].items():
            _acc(dd, B, 0.5 * mat)
        for B, mat in dric_full[(j, i)].items():
            _acc(dd, B, 0.5 * mat)
        dric_sym[A] = dd

    # ham row: δR + cf trπ δtrπ − δ|π|²
    ham_h, ham_w = {}, {}
    for A, (i, j) in enumerate(SYM):
        cmat = sp.diags(SYM_MULT[A] * ginvI[:, i, j])
        for B, mat in dric_sym[A].items():
            _acc(ham_h, B, cmat @ mat)
    for B, (i, j) in enumerate(SYM):
        coef = SYM_MULT[B] * (-girg[I][:, i, j]
                              + cf * trpi[I] * piI[:, i, j]
                              - 2.0 * pgp[I][:, i, j])
        _acc(ham_h, B, sp.diags(coef))
        coefw = SYM_MULT[B] * (cf * trpi[I] * g[I][:, i, j]
                               - 2.0 * gpg[I][:, i, j])
        _acc(ham_w, B, sp.diags(coefw))

    # momentum rows
    gtrI = [sum(gamI[:, b, b, m] for b in range(3)) for m in range(3)]
    mom_h, mom_w = [], []
    for i in range(3):
        row_h, row_w = {}, {}
        for j in range(3):
            _acc(row_w, SYM_INDEX[(i, j)], d1II[j] * 1.0)
        for j in range(3):
            for m in range(3):
                _acc(row_w, SYM_INDEX[(m, j)], sp.diags(gamI[:, i, j, m]))
        for m in range(3):
            _acc(row_w, SYM_INDEX[(i, m)], sp.diags(gtrI[m]))
        # δΓ^i_{jm} π^{mj} + δΓ^j_{jm} π^{im}
        for j in range(3):
            for m in range(3):
                c1 = sp.diags(piI[:, m, j]) @ rIE
                for B, mat in dgam_blocks[(i, j, m)].items():
                    _acc(row_h, B, c1 @ mat)
                c2 = sp.diags(piI[:, i, m]) @ rIE
                for B, mat in dgam_blocks[(j, j, m)].items():
                    _acc(row_h, B, c2 @ mat)
        # modified-map correction ½ (h·Y)^i = ½ g^{ia} h_{ab} Y^b
        for a in range(3):
            for b in range(3):
                _acc(row_h, SYM_INDEX[(a, b)],
                     sp.diags(0.5 * ginvI[:, i, a] * Y[I][:, b]))
        mom_h.append(row_h)
        mom_w.append(row_w)

    blocks = [[None] * 12 for _ in range(4)]
    for B, mat in ham_h.items():
        blocks[0][B] = mat
    for B, mat in ham_w.items():
        blocks[0][6 + B] = mat
    for i in range(3):
        for B, mat in mom_h[i].items():
            blocks[1 + i][B] = mat
        for B, mat in mom_w[i].items():
            blocks[1 + i][6 + B] = mat
    A = sp.bmat(blocks, format="csr")
    A.eliminate_zeros()
    return A


# -- DOF vector packing ----------------------------------------------------

def pack_pert(domain, pert):
    h6 = tensor.full_to_sym(pert.h)[domain.inside]
    w6 = tensor.full_to_sym(pert.w)[domain.inside]
    return np.concatenate([h6.T.ravel(), w6.T.ravel()])


def unpack_pert(domain, vec):
    M = domain.n_inside
    h6 = vec[:6 * M].reshape(6, M).T
    w6 = vec[6 * M:].reshape(6, M).T
    h = tensor.sym_to_full(domain.scatter(h6))
    w = tensor.sym_to_full(domain.scatter(w6))
    return Perturbation(h, w)


def pack_cv(domain, cv):
    ham = cv.ham[domain.inside]
    mom = cv.mom[domain.inside]
    return np.concatenate([ham, mom.T.ravel()])


def unpack_cv(domain, vec):
    M = domain.n_inside
    ham = domain.scatter(vec[:M])
    mom = domain.scatter(vec[M:].reshape(3, M).T)
    return ConstraintValue(ham, mom)


def pack_ls(domain, ls):
    return np.concatenate([ls.f[domain.inside],
                           ls.X[domain.inside].T.ravel()])


def unpack_ls(domain, vec):
    M = domain.n_inside
    return LapseShift(domain.scatter(vec[:M]),
                      domain.scatter(vec[M:].reshape(3, M).T))


def zero_extend(domain, pert):
    """Restrict a perturbation to inside-node support (zero elsewhere)."""
    m = domain.inside[..., None, None]
    return Perturbation(np.where(m, pert.h, 0.0), np.where(m, pert.w, 0.0))
