"""Weighted variational linear solve and the Picard iteration.

The linearized problem DΦ^W(h,w) = (ψ,V) is solved through the normal
equations of the convex functional: with A the assembled sparse
linearization, Mc/Mp the L²(dμ_g) mass matrices of the value and
perturbation spaces and Dρ the weight, conjugate gradients run on

    T y = s,     T = A · Dρ Mp⁻¹ · Aᵀ      (plain-symmetric PSD),

and the deformation is recovered as u = Dρ Mp⁻¹ Aᵀ y, i.e. exactly
(h,w) = ρ·(DΦ^W)*(f,X) with (f,X) = Mc⁻¹ y and the discrete adjoint
(DΦ^W)* = Mp⁻¹ Aᵀ Mc.  The projected variant restricts CG to the
plain-orthogonal complement of the packed ζK vectors, which realizes
the L²(dμ_g)-projected problem: the final residual T y − s lies in
span(ζK).

The nonlinear deformation is the fixed-base Picard loop: every step
solves the linearization at the original data against the current
nonlinear residual and accumulates the increments.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import constraint as con
from . import tensor, weights as wmod
from .errors import (CgStagnation, Divergence, HTooLarge,
                     IndefinitePerturbedMetric, MaxIterations)
from .families import ConstraintValue, InitialData
from .tensor import SYM, MetricField

__all__ = ["SolveConfig", "LinearizedOperator", "assemble",
           "solve_linearized", "solve_projected", "deform", "dec_margin",
           "DeformationReport"]


@dataclass(frozen=True)
class SolveConfig:
    cg_tol: float = 1e-10
    cg_max_iter: int = 20000
    picard_tol: float = 1e-8
    picard_max_iter: int = 30
    delta: float = 0.5
    epsilon_guard: float = 1e-2

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0,1)")
        if min(self.cg_tol, self.picard_tol) <= 0:
            raise ValueError("tolerances must be positive")


def _pert_mass_blocks(domain, met):
    """6×6 per-node Gram blocks of the g-inner product in sym storage."""
    ins = domain.inside
    h3 = domain.grid.spacing ** 3
    sq = met.sqrt_det[ins] * h3
    blocks = {}
    for name, mat in (("cov", met.inv[ins]), ("con", met.g[ins])):
        W = np.zeros((mat.shape[0], 6, 6))
        for A, (i, j) in enumerate(SYM):
            orbA = [(i, j)] if i == j else [(i, j), (j, i)]
            for B, (k, l) in enumerate(SYM):
                orbB = [(k, l)] if k == l else [(k, l), (l, k)]
                acc = 0.0
                for (a, b) in orbA:
                    for (c, d) in orbB:
                        acc = acc + mat[:, a, c] * mat[:, b, d]
                W[:, A, B] = acc
        blocks[name] = W * sq[:, None, None]
    return blocks


def _block_diag_sparse(blocks_list, M):
    """Component-major sparse matrix from per-node (M,k,k) blocks."""
    mats = []
    for W in blocks_list:
        k = W.shape[1]
        grid = [[sp.diags(W[:, a, b]) for b in range(k)] for a in range(k)]
        mats.append(sp.bmat(grid))
    return sp.block_diag(mats, format="csr")


class LinearizedOperator:
    """Assembled DΦ^W with its exact transpose and weighted normal operator."""

    def __init__(self, data, W, domain, weights):
        self.data = data
        self.domain = domain
        self.weights = weights
        self.met = data.met
        self.A = con.build_linearization(data, W, domain)
        self.At = self.A.T.tocsr()
        M = domain.n_inside
        self.M = M
        self.shape_rows = 4 * M
        ins = domain.inside
        h3 = domain.grid.spacing ** 3
        self.sq = self.met.sqrt_det[ins] * h3
        self.g_blk = self.met.g[ins] * self.sq[:, None, None]
        self.ginv_blk = self.met.inv[ins] / self.sq[:, None, None]
        rho = weights.rho[ins]
        blocks = _pert_mass_blocks(domain, self.met)
        inv_h = np.linalg.inv(blocks["cov"]) * rho[:, None, None]
        inv_w = np.linalg.inv(blocks["con"]) * rho[:, None, None]
        self.C = _block_diag_sparse([inv_h, inv_w], M)
        S = (self.A @ self.C).tocsr()
        diag = np.asarray(S.multiply(self.A).sum(axis=1)).ravel()
        floor = max(diag.max(), 1e-300) * 1e-250
        self.jacobi = 1.0 / np.maximum(diag, floor)
        self.rho_inv_floored = 1.0 / np.maximum(weights.rho[ins],
                                                weights.profile.rho_floor)

    # -- space operations -------------------------------------------------

    def mc_apply(self, vec):
        M = self.M
        out = np.empty_like(vec)
        out[:M] = self.sq * vec[:M]
        mom = vec[M:].reshape(3, M)
        out[M:] = np.einsum('mij,jm->im', self.g_blk, mom).reshape(3 * M)
        return out

    def mc_solve(self, vec):
        M = self.M
        out = np.empty_like(vec)
        out[:M] = vec[:M] / self.sq
        mom = vec[M:].reshape(3, M)
        out[M:] = np.einsum('mij,jm->im', self.ginv_blk, mom).reshape(3 * M)
        return out

    def mc_norm(self, vec):
        return float(np.sqrt(max(vec @ self.mc_apply(vec), 0.0)))

    def normal_apply(self, y):
        return self.A @ (self.C @ (self.At @ y))

    def solution_from(self, y):
        return self.C @ (self.At @ y)

    def adjoint_apply_ls(self, ls):
        """Discrete dμ_g-adjoint Mp⁻¹ Aᵀ Mc on a lapse-shift pair."""
        z = con.pack_ls(self.domain, ls)
        y = self.mc_apply(z)
        u = self.At @ y
        blocks = _pert_mass_blocks(self.domain, self.met)
        M = self.M
        h6 = u[:6 * M].reshape(6, M).T
        w6 = u[6 * M:].reshape(6, M).T
        hname = np.linalg.solve(blocks["cov"], h6)
        wname = np.linalg.solve(blocks["con"], w6)
        h = tensor.sym_to_full(self.domain.scatter(hname))
        w = tensor.sym_to_full(self.domain.scatter(wname))
        return con.Perturbation(h, w)

    def weighted_residual_norm(self, vec):
        """‖·‖ in L²_{ρ⁻¹}(dμ_g) with the solver-floored weight."""
        M = self.M
        w = np.concatenate([self.rho_inv_floored] * 4)
        return float(np.sqrt(max(vec @ (w * self.mc_apply(vec)), 0.0)))


def assemble(data, W, domain, weights):
    return LinearizedOperator(data, W, domain, weights)


def _pcg(op, b, cfg, x0=None, proj=None, stall_window=400, stall_gain=0.99):
    """Preconditioned CG on the normal operator, Mc-norm stopping.

    ``proj`` is an idempotent symmetric projector applied to keep the
    iteration in the admissible subspace.
    """
    P = proj if proj is not None else (lambda v: v)
    b = P(b)
    bnorm = op.mc_norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), {"iterations": 0, "relres": 0.0}
    x = P(x0) if x0 is not None else np.zeros_like(b)
    r = P(b - op.normal_apply(x))
    z = P(op.jacobi * r)
    p = z.copy()
    rz = r @ z
    best = np.inf
    best_at = 0
    relres = op.mc_norm(r) / bnorm
    it = 0
    while relres > cfg.cg_tol and it < cfg.cg_max_iter:
        q = P(op.normal_apply(p))
        alpha = rz / (p @ q)
        if not np.isfinite(alpha):
            raise CgStagnation("CG breakdown (indefinite or null search "
                               "direction); a near-kernel is likely — use "
                               "the projected solve", iteration=it)
        x += alpha * p
        r -= alpha * q
        it += 1
        relres = op.mc_norm(r) / bnorm
        if relres < best * stall_gain:
            best, best_at = relres, it
        elif it - best_at > stall_window:
            raise CgStagnation(
                "CG stagnated; the normal operator has a near-kernel — "
                "use the projected solve", iteration=it,
                relres=float(relres))
        z = P(op.jacobi * r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if relres > cfg.cg_tol:
        raise MaxIterations("CG did not reach tolerance",
                            iterations=it, relres=float(relres))
    return x, {"iterations": it, "relres": float(relres)}


def solve_linearized(op, source, cfg, x0=None):
    """CG solve of the weighted normal equations for one source.

    Returns the lapse-shift minimizer, the deformation
    (h,w) = ρ(DΦ^W)*(f,X), and CG statistics; the guarantee is
    ‖A(h,w) − (ψ,V)‖ ≤ cg_tol·‖(ψ,V)‖ in the measure norm.
    """
    s = con.pack_cv(op.domain, source)
    y, stats = _pcg(op, s, cfg, x0=x0)
    u = op.solution_from(y)
    pert = con.unpack_pert(op.domain, u)
    ls = con.unpack_ls(op.domain, op.mc_solve(y))
    stats = dict(stats)
    stats["y"] = y
    return ls, pert, stats


def _plain_projector(proj):
    K = proj.basis_vecs                     # (10, n)
    G = K @ K.T
    Ginv = np.linalg.inv(G)

    def P(v):
        return v - K.T @ (Ginv @ (K @ v))

    return P, K, Ginv


def solve_projected(op, source, proj, cfg, x0=None):
    """CG restricted to the complement of ζK; residual lands in ζK.

    Returns (lapse-shift, perturbation, kernel_residual) where
    kernel_residual holds the ζK-expansion coefficients of T y − s.
    """
    P, K, Ginv = _plain_projector(proj)
    s = con.pack_cv(op.domain, source)
    y, stats = _pcg(op, s, cfg, x0=x0, proj=P)
    resid = op.normal_apply(y) - s
    coeff = Ginv @ (K @ resid)
    u = op.solution_from(y)
    pert = con.unpack_pert(op.domain, u)
    ls = con.unpack_ls(op.domain, op.mc_solve(y))
    stats = dict(stats)
    stats["y"] = y
    stats["kernel_residual"] = coeff
    return ls, pert, stats


@dataclass
class DeformationReport:
    residual_history: list = field(default_factory=list)
    step_norms_b2: list = field(default_factory=list)
    cg_stats: list = field(default_factory=list)
    contraction_exponents: list = field(default_factory=list)
    converged: bool = False
    guard_exceeded: bool = False
    source_norm_b0b1: float = float("nan")
    final_residual: float = float("nan")
    kernel_residual: list = field(default_factory=list)

    def to_dict(self):
        return {
            "residual_history": [float(v) for v in self.residual_history],
            "step_norms_b2": [float(v) for v in self.step_norms_b2],
            "cg_iterations": [s["iterations"] for s in self.cg_stats],
            "cg_relres": [s["relres"] for s in self.cg_stats],
            "contraction_exponents": [float(v) for v in
                                      self.contraction_exponents],
            "converged": bool(self.converged),
            "guard_exceeded": bool(self.guard_exceeded),
            "source_norm_b0b1": float(self.source_norm_b0b1),
            "final_residual": float(self.final_residual),
            "kernel_residual": [float(v) for v in self.kernel_residual],
        }


def deform(data, W, source, weights, cfg, projector=None, op=None,
           log=None):
    """Picard loop for Φ^W_(g,π)(ḡ,π̄) = Φ^W_(g,π)(g,π) + source.

    The linearization stays at the fixed base (g,π); each step solves it
    against the current nonlinear residual and accumulates.  ``source``
    is the full first-slot pair (2ψ, V).  Residual norms are
    L²_{ρ⁻¹}(dμ_g), relative to the source norm.
    """
    domain = weights.domain
    met0 = data.met
    report = DeformationReport()

    psi = 0.5 * source.ham
    b0 = wmod.weighted_norm(psi, "B0", weights, met0, domain)
    b1 = wmod.weighted_norm(source.mom, "B1", weights, met0, domain,
                            variances=("con",))
    report.source_norm_b0b1 = b0 + b1
    if report.source_norm_b0b1 > cfg.epsilon_guard:
        report.guard_exceeded = True
        if log:
            log(f"source B0xB1 norm {report.source_norm_b0b1:.3e} exceeds "
                f"the {cfg.epsilon_guard:.0e} guard; attempting anyway")

    if op is None:
        op = assemble(data, W, domain, weights)
    base_pv = con.phi_modified(data, W, data)
    svec = con.pack_cv(domain, source)
    snorm = op.weighted_residual_norm(svec)
    if snorm == 0.0:
        report.converged = True
        report.final_residual = 0.0
        return data, report

    collar = domain.grid.halo * domain.grid.spacing
    check = domain.distance > -collar
    total = con.Perturbation(np.zeros(tuple(domain.grid.dims) + (3, 3)),
                             np.zeros(tuple(domain.grid.dims) + (3, 3)))
    current = data
    grow = 0
    y_warm = None
    eps_norm = min(report.source_norm_b0b1, 0.5)
    for m in range(cfg.picard_max_iter):
        pv = con.phi_modified(data, W, current)
        residual = base_pv + source - pv
        rvec = con.pack_cv(domain, residual)
        rnorm = op.weighted_residual_norm(rvec) / snorm
        report.residual_history.append(rnorm)
        if eps_norm > 0 and rnorm > 0:
            report.contraction_exponents.append(
                float(np.log(rnorm * snorm) / np.log(eps_norm))
                if eps_norm < 1 else float("nan"))
        if log:
            log(f"picard {m}: weighted residual {rnorm:.3e}")
        if rnorm <= cfg.picard_tol:
            report.converged = True
            break
        if len(report.residual_history) >= 3 and \
                rnorm > report.residual_history[-2] > report.residual_history[-3]:
            raise Divergence("Picard residual grew twice consecutively",
                             history=[float(v) for v in
                                      report.residual_history],
                             report=report.to_dict())
        if projector is not None:
            ls, pert, stats = solve_projected(op, residual, projector, cfg,
                                              x0=y_warm)
            report.kernel_residual = list(stats["kernel_residual"])
        else:
            ls, pert, stats = solve_linearized(op, residual, cfg, x0=y_warm)
        y_warm = None
        report.cg_stats.append(
            {"iterations": stats["iterations"], "relres": stats["relres"]})
        nb2 = (wmod.weighted_norm(pert.h, "B2", weights, met0, domain,
                                  variances=("cov", "cov"), holder=False)
               + wmod.weighted_norm(pert.w, "B2", weights, met0, domain,
                                    variances=("con", "con"), holder=False))
        report.step_norms_b2.append(nb2)
        total = total + pert
        g_new = data.met.g + total.h
        ev = np.linalg.eigvalsh(g_new[check])
        if ev.size and ev.min() <= 0:
            raise IndefinitePerturbedMetric(
                "metric lost positive definiteness during Picard",
                step=m, min_eigenvalue=float(ev.min()),
                report=report.to_dict())
        current = InitialData(MetricField(domain.grid, g_new, check),
                              data.pi + total.w, data.n)
    else:
        raise MaxIterations("Picard did not converge",
                            history=[float(v) for v in
                                     report.residual_history],
                            report=report.to_dict())
    report.final_residual = report.residual_history[-1]
    return current, report


def dec_margin(base, new_data, source):
    """Pointwise DEC bookkeeping of Lemma almost-DEC.

    Returns (margin, identity_residual): the guaranteed-nonnegative
    μ̄ − |J̄|_ḡ − (μ + ψ − |J+V|_g) with ψ = source.ham/2, and the
    pointwise defect of the exact-solution norm identity
    |Y − ½h·Y|²_{g+h} = |Y|² − ¾|h·Y|² + ¼ h(h·Y, h·Y).
    """
    met = base.met
    h = new_data.met.g - met.g
    hnorm = tensor.norm_cov(met, h)
    if float(hnorm.max()) > 3.0:
        idx = np.unravel_index(int(np.argmax(hnorm)), hnorm.shape)
        raise HTooLarge("|h|_g exceeds 3", node=[int(v) for v in idx],
                        value=float(hnorm.max()))
    pv_base = con.phi(base)
    pv_new = con.phi(new_data)
    Y = pv_base.mom + source.mom
    psi = 0.5 * source.ham
    margin = (pv_new.mu - tensor.norm_vec_con(new_data.met, pv_new.mom)
              - (pv_base.mu + psi - tensor.norm_vec_con(met, Y)))

    hY = np.einsum('...ij,...jk,...k->...i', met.inv, h, Y)
    Jbar = Y - 0.5 * hY
    lhs = np.einsum('...ij,...i,...j->...', new_data.met.g, Jbar, Jbar)
    rhs = (np.einsum('...ij,...i,...j->...', met.g, Y, Y)
           - 0.75 * np.einsum('...ij,...i,...j->...', met.g, hY, hY)
           + 0.25 * np.einsum('...ij,...i,...j->...', h, hY, hY))
    return margin, lhs - rhs
