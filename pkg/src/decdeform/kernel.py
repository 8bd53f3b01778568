"""Flat-data kernel (KIDs), projection transverse to ζK, kernel certificate.

The ten lapse-shift pairs K = K₀ ⊕ K₁ span the kernel of the flat-data
adjoint: constant and linear lapses, translation and rotation shifts.
``Projector`` removes the ζK component of a constraint-value pair in
the L²(dμ_g) sense, where ζ is a radial bump supported where ρ ≡ 1, so
the plain and ρ⁻¹-weighted projections coincide on the removed part.
"""

from dataclasses import dataclass

import numpy as np

from . import constraint as con
from . import tensor
from .constraint import LapseShift
from .errors import GramSingular
from .families import ConstraintValue
from .weights import smoothstep

__all__ = ["flat_kids", "Projector", "build_projector", "project",
           "kernel_certificate"]


def flat_kids(gridspec):
    """K₀ = {1, x¹, x², x³} lapses; K₁ = translations and rotations."""
    x, y, z = gridspec.coords()
    zero = np.zeros(gridspec.dims)
    zero3 = np.zeros(tuple(gridspec.dims) + (3,))
    kids = [LapseShift(np.ones(gridspec.dims), zero3)]
    for c in (x, y, z):
        kids.append(LapseShift(c.copy(), zero3))
    for i in range(3):
        X = np.zeros(tuple(gridspec.dims) + (3,))
        X[..., i] = 1.0
        kids.append(LapseShift(zero.copy(), X))
    # x × ∂_k
    rot = [np.stack([np.zeros_like(x), z, -y], axis=-1),
           np.stack([-z, np.zeros_like(x), x], axis=-1),
           np.stack([y, -x, np.zeros_like(x)], axis=-1)]
    for X in rot:
        kids.append(LapseShift(zero.copy(), X))
    return kids


def radial_bump(domain, weights, margin_cells=1.0):
    """Radial C^∞ bump ζ supported strictly inside the ρ ≡ 1 plateau."""
    d = domain.distance
    r0 = weights.profile.r0
    lo = r0 + margin_cells * domain.grid.spacing
    hi = float(d[domain.inside].max())
    if hi <= lo:
        raise ValueError("domain has no plateau region for the bump")
    mid = 0.5 * (lo + hi)
    width = 0.5 * (hi - lo)
    s = 1.0 - np.abs(d - mid) / width
    zeta = smoothstep(2.0 * s)
    zeta[~domain.inside] = 0.0
    return zeta


@dataclass
class Projector:
    """ζK basis with its L²(dμ_g) Gram data, on one domain."""

    domain: object
    zeta: np.ndarray
    kids: list
    basis_vecs: np.ndarray      # (10, 4M) packed ζ·K_a coefficient vectors
    kid_vecs: np.ndarray        # (10, 4M) packed unweighted K_a
    gram: np.ndarray
    gram_inv: np.ndarray
    mc_diag: object             # callable applying the L²(dμ_g) mass matrix


def _mass_apply(domain, met):
    """Return v ↦ Mc v for packed constraint-value vectors."""
    ins = domain.inside
    h3 = domain.grid.spacing ** 3
    sq = met.sqrt_det[ins] * h3
    gblk = met.g[ins] * sq[:, None, None]
    M = domain.n_inside

    def apply(vec):
        out = np.empty_like(vec)
        out[:M] = sq * vec[:M]
        mom = vec[M:].reshape(3, M)
        out[M:] = np.einsum('mij,jm->im', gblk, mom).reshape(3 * M)
        return out

    return apply


def build_projector(domain, weights, met, zeta=None):
    """Assemble ζK and its Gram matrix w.r.t. L²(dμ_g)."""
    if zeta is None:
        zeta = radial_bump(domain, weights)
    if not (weights.rho_raw[zeta > 0] > 1 - 1e-12).all():
        raise ValueError("bump support leaves the rho = 1 plateau")
    kids = flat_kids(domain.grid)
    kvecs, zvecs = [], []
    for ls in kids:
        cv = ConstraintValue(ls.f, ls.X)
        kvecs.append(con.pack_cv(domain, cv))
        zcv = ConstraintValue(zeta * ls.f, zeta[..., None] * ls.X)
        zvecs.append(con.pack_cv(domain, zcv))
    kvecs = np.array(kvecs)
    zvecs = np.array(zvecs)
    mc = _mass_apply(domain, met)
    gram = np.array([[zvecs[a] @ mc(zvecs[b]) for b in range(10)]
                     for a in range(10)])
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e14:
        raise GramSingular("zeta-kernel Gram matrix is numerically singular",
                           cond=float(cond))
    return Projector(domain, zeta, kids, zvecs, kvecs, gram,
                     np.linalg.inv(gram), mc)


def project(cv, proj, met=None):
    """Π_g(ψ,V) = (ψ,V) − Σ c_a ζK_a, orthogonal to ζK in L²(dμ_g).

    Passing a different metric recomputes the Gram data on the fly (the
    projector is built once per domain for the solver metric).
    """
    domain = proj.domain
    if met is not None:
        mc = _mass_apply(domain, met)
        gram = np.array([[proj.basis_vecs[a] @ mc(proj.basis_vecs[b])
                          for b in range(10)] for a in range(10)])
        gram_inv = np.linalg.inv(gram)
    else:
        mc, gram_inv = proj.mc_diag, proj.gram_inv
    vec = con.pack_cv(domain, cv)
    rhs = proj.basis_vecs @ mc(vec)
    coeff = gram_inv @ rhs
    tang = vec - proj.basis_vecs.T @ coeff
    return con.unpack_cv(domain, tang), coeff


def kernel_certificate(linop, proj=None, tol=1e-6, k=12, maxiter=400,
                       seed=0):
    """Estimate the low end of the normal-operator spectrum.

    Runs LOBPCG on the weighted normal operator (optionally restricted
    off ζK) with generalized Rayleigh quotients in the L²(dμ_g) metric,
    and compares λ_min to tol × the measured operator scale.  Returns
    ("trivial", report) or ("approximate-kernel", report); convergence
    failures are reported, not fatal.
    """
    from scipy.sparse.linalg import LinearOperator, lobpcg

    n = linop.shape_rows
    rng = np.random.default_rng(seed)

    def op(yblock):
        return np.column_stack([linop.normal_apply(yblock[:, i])
                                for i in range(yblock.shape[1])])

    def mcop(yblock):
        return np.column_stack([linop.mc_apply(yblock[:, i])
                                for i in range(yblock.shape[1])])

    Aop = LinearOperator((n, n), matvec=lambda v: linop.normal_apply(v),
                         matmat=op, dtype=float)
    Mop = LinearOperator((n, n), matvec=lambda v: linop.mc_apply(v),
                         matmat=mcop, dtype=float)
    X = rng.normal(size=(n, k))
    constraints = None
    if proj is not None:
        Y = proj.basis_vecs.T
        from scipy.linalg import qr
        constraints = np.linalg.qr(Y)[0] if Y.shape[1] else None
    # operator scale from a few power iterations in the same pencil
    v = rng.normal(size=n)
    scale = 0.0
    for _ in range(15):
        w_ = linop.normal_apply(v)
        scale = (v @ w_) / (v @ linop.mc_apply(v))
        v = w_ / np.linalg.norm(w_)
    report = {"scale": float(scale), "tol": float(tol)}
    try:
        import warnings as _w
        with _w.catch_warnings():
            _w.simplefilter("ignore")
            vals, vecs = lobpcg(Aop, X, B=Mop, Y=constraints, tol=1e-8,
                                maxiter=maxiter, largest=False)
    except Exception as exc:  # pragma: no cover - diagnostic path
        report["error"] = f"no-convergence: {exc}"
        return "no-convergence", report
    order = np.argsort(vals)
    vals = np.asarray(vals)[order]
    report["eigenvalues"] = [float(v) for v in vals]
    near_zero = int((vals < tol * scale).sum())
    report["near_zero_count"] = near_zero
    report["lambda_min_over_scale"] = float(vals[0] / scale)
    if near_zero == 0:
        return "trivial", report
    return "approximate-kernel", {**report, "dim": near_zero,
                                  "vectors": vecs[:, order[:near_zero]]}


def kid_rayleigh_quotients(linop, domain):
    """Generalized Rayleigh quotients of the 10 KIDs under the normal operator."""
    kids = flat_kids(domain.grid)
    out = []
    for ls in kids:
        z = con.pack_ls(domain, ls)
        y = linop.mc_apply(z)
        num = y @ linop.normal_apply(y)
        den = z @ linop.mc_apply(z)
        out.append(float(num / den))
    return np.array(out)
