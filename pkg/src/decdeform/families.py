"""Closed-form and semi-numeric model initial data sets.

Each model evaluates its fields at arbitrary coordinate points, so the
same object serves grid sampling, rescaling (exact substitution instead
of interpolation where possible) and surface quadrature.  All
randomness is seed-determined.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor
from .errors import SingularityInDomain
from .tensor import MetricField

__all__ = [
    "Flat", "SchwarzschildIsotropic", "PerturbedFlat", "evaluate",
    "dec_audit", "InitialData", "ConstraintValue",
]


@dataclass
class InitialData:
    """Pair (g, π): metric field plus contravariant momentum tensor."""

    met: MetricField
    pi: np.ndarray
    n: int = 3

    @property
    def grid(self):
        return self.met.grid

    def perturbed(self, h, w, check_mask=None):
        g_new = self.met.g + h
        return InitialData(MetricField(self.grid, g_new, check_mask),
                           self.pi + w, self.n)


@dataclass
class ConstraintValue:
    """Φ(g,π) = (2μ, J): scalar slot ham = 2μ, vector slot mom = J^i."""

    ham: np.ndarray
    mom: np.ndarray

    @property
    def mu(self):
        return 0.5 * self.ham

    @property
    def current(self):
        return self.mom

    def __add__(self, other):
        return ConstraintValue(self.ham + other.ham, self.mom + other.mom)

    def __sub__(self, other):
        return ConstraintValue(self.ham - other.ham, self.mom - other.mom)

    def scaled(self, c):
        return ConstraintValue(c * self.ham, c * self.mom)


def _flat_metric_at(pts):
    g = np.zeros(pts.shape[:-1] + (3, 3))
    g[..., 0, 0] = g[..., 1, 1] = g[..., 2, 2] = 1.0
    return g


@dataclass(frozen=True)
class Flat:
    declared_charges: tuple = (0.0,) * 10

    def metric_at(self, pts):
        return _flat_metric_at(pts)

    def momentum_at(self, pts):
        return np.zeros(pts.shape[:-1] + (3, 3))


@dataclass(frozen=True)
class SchwarzschildIsotropic:
    """g = (1 + m/(2r))^4 δ, π = 0, in isotropic coordinates.

    ``r_floor`` clamps the radius when evaluating far outside the region
    of interest (the grid box may cover the puncture); evaluate() raises
    if the clamp would bite inside the domain collar.
    """

    mass: float
    center: tuple = (0.0, 0.0, 0.0)
    r_floor: float = 0.15

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError("mass must be positive")

    def conformal_factor(self, pts):
        r = np.linalg.norm(pts - np.asarray(self.center), axis=-1)
        r = np.maximum(r, self.r_floor)
        return 1.0 + self.mass / (2.0 * r)

    def min_radius(self, pts):
        return float(np.linalg.norm(pts - np.asarray(self.center), axis=-1).min()) \
            if pts.size else np.inf

    def metric_at(self, pts):
        u = self.conformal_factor(pts)
        return u[..., None, None] ** 4 * _flat_metric_at(pts)

    def momentum_at(self, pts):
        return np.zeros(pts.shape[:-1] + (3, 3))

    @property
    def declared_charges(self):
        e = self.mass
        c = tuple(e * x for x in self.center)
        return (e, 0.0, 0.0, 0.0) + c + (0.0, 0.0, 0.0)


def _bump(y):
    """C^∞ bump on |y| < 1, max 1 at the origin."""
    r2 = np.sum(y * y, axis=-1)
    out = np.zeros(r2.shape)
    ok = r2 < 1.0
    with np.errstate(divide="ignore", over="ignore"):
        out[ok] = np.exp(1.0 - 1.0 / (1.0 - r2[ok]))
    return out


@dataclass(frozen=True)
class PerturbedFlat:
    """δ plus seeded smooth compact bumps; optional uniform momentum β g^♯.

    With ``momentum_beta = β`` and no momentum bumps the data satisfies
    μ = R(g)/2 + (3/4)β², J = 0 exactly, so β² above the curvature scale
    gives strict DEC while the metric bumps break all symmetries.
    """

    seed: int
    amplitude: float
    region: tuple = ((0.0, 0.0, 0.0), 0.0, 0.6)  # center, r_lo, r_hi
    n_bumps: int = 6
    width: tuple = (0.25, 0.45)
    momentum_beta: float = 0.0
    pi_amplitude: float = 0.0

    def _draws(self):
        rng = np.random.default_rng(self.seed)
        center, r_lo, r_hi = self.region
        center = np.asarray(center, dtype=float)
        draws = []
        for _ in range(2 * self.n_bumps):
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            rad = (r_lo + (r_hi - r_lo) * rng.uniform()) if r_hi > 0 else 0.0
            c = center + rad * u
            w = self.width[0] + (self.width[1] - self.width[0]) * rng.uniform()
            s = rng.uniform(-1.0, 1.0, size=(3, 3))
            s = 0.5 * (s + s.T)
            s /= np.linalg.norm(s)
            draws.append((c, w, s))
        return draws[: self.n_bumps], draws[self.n_bumps:]

    def metric_at(self, pts):
        g = _flat_metric_at(pts)
        gd, _ = self._draws()
        for c, w, s in gd:
            b = _bump((pts - c) / w)
            g = g + self.amplitude * b[..., None, None] * s
        return g

    def momentum_at(self, pts):
        pi = np.zeros(pts.shape[:-1] + (3, 3))
        if self.momentum_beta:
            g = self.metric_at(pts)
            ginv = tensor._inv33(g, np.linalg.det(g))
            pi = pi + self.momentum_beta * ginv
        if self.pi_amplitude:
            _, pd = self._draws()
            for c, w, s in pd:
                b = _bump((pts - c) / w)
                pi = pi + self.pi_amplitude * b[..., None, None] * s
        return pi

    declared_charges = None


def evaluate(spec, gridspec, domain=None):
    """Sample a model on the grid; PD is checked on the domain collar."""
    x, y, z = gridspec.coords()
    pts = np.stack([x, y, z], axis=-1)
    check = None
    if domain is not None:
        collar = gridspec.halo * gridspec.spacing
        check = domain.distance > -collar
        if isinstance(spec, SchwarzschildIsotropic):
            rmin = np.linalg.norm(
                pts[check] - np.asarray(spec.center), axis=-1).min()
            if rmin <= spec.r_floor:
                raise SingularityInDomain(
                    "Schwarzschild puncture too close to the domain",
                    min_radius=float(rmin), r_floor=spec.r_floor)
    g = spec.metric_at(pts)
    pi = spec.momentum_at(pts)
    met = MetricField(gridspec, g, check_mask=check)
    return InitialData(met, pi)


def dec_audit(data, domain):
    """Pointwise DEC margin μ − |J|_g and its minimum over inside nodes."""
    from .constraint import phi
    pv = phi(data)
    margin = pv.mu - tensor.norm_vec_con(data.met, pv.mom)
    return margin, float(margin[domain.inside].min())
