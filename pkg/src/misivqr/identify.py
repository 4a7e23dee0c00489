"""Sharp identified set for ``q(., tau)`` and a non-identification witness.

With a binary instrument the moment equalities linking the observed
distribution to a candidate ``(y0, y1)`` form a 2x2 linear system in the
misclassification probabilities ``(p1, p0)``. A candidate belongs to the
identified set when the system has a solution inside the box

    0 <= p0 <= ess inf f_{D|Y,Z}(1 | y, z),  0 <= p1 <= ess inf f_{D|Y,Z}(0 | y, z).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .dgp import PopulationDistribution, StructuralModel, _inverse_clipped, population_joint
from .errors import ConstructionError, DomainError

FEAS_TOL = 1e-9
_SINGULAR = 1e-12


@dataclass(frozen=True)
class ParamPoint:
    """Candidate ``(q(0, tau), q(1, tau), p0, p1)``."""

    y0: float
    y1: float
    p0: float
    p1: float

    def __post_init__(self):
        if self.p0 < 0 or self.p1 < 0:
            raise DomainError(f"misclassification probabilities must be >= 0, got ({self.p0}, {self.p1})")
        if not self.p0 + self.p1 < 1:
            raise DomainError(f"p0 + p1 must be < 1, got {self.p0 + self.p1}")

    @property
    def theta(self) -> float:
        return self.y1 - self.y0

    def to_dict(self) -> dict:
        return {"y0": self.y0, "y1": self.y1, "p0": self.p0, "p1": self.p1, "theta": self.theta}


class FeasibilityResult(NamedTuple):
    feasible: bool
    p0: float | None
    p1: float | None


@lru_cache(maxsize=64)
def density_caps(pop: PopulationDistribution, n_grid: int = 401) -> tuple[float, float]:
    """Upper bounds ``(cap0, cap1)`` on ``(p0, p1)``.

    ``cap0`` is the infimum of ``f_{D|Y,Z}(1 | y, z)`` and ``cap1`` that of
    ``f_{D|Y,Z}(0 | y, z)``, taken over an ``n_grid``-point outcome grid per
    instrument value, restricted to points of positive density.
    """
    lo, hi = pop.support
    # endpoints nudged inwards: densities may be infinite there
    y = lo + (hi - lo) * np.clip(np.linspace(0.0, 1.0, n_grid), 1e-9, 1.0 - 1e-9)
    caps = [math.inf, math.inf]
    for z in (0, 1):
        f0 = pop.density_y_d(0, z, y)
        f1 = pop.density_y_d(1, z, y)
        tot = f0 + f1
        ok = (tot > 0) & np.isfinite(tot)
        if not np.any(ok):
            continue
        caps[0] = min(caps[0], float(np.min(f1[ok] / tot[ok])))
        caps[1] = min(caps[1], float(np.min(f0[ok] / tot[ok])))
    return caps[0], caps[1]


def _in_box(p0, p1, caps, tol=FEAS_TOL):
    return (
        (p0 >= -tol) & (p1 >= -tol) & (p0 <= caps[0] + tol) & (p1 <= caps[1] + tol) & (p0 + p1 < 1.0)
    )


def _singular_solve(a: np.ndarray, b: np.ndarray, caps, tol=FEAS_TOL) -> FeasibilityResult:
    """Search the solution family of a rank-deficient system ``a @ (p1, p0) = b``."""
    u, s, vt = np.linalg.svd(a)
    hi = np.array([caps[1], caps[0]])
    if s[0] <= _SINGULAR:
        if np.max(np.abs(b)) > tol:
            return FeasibilityResult(False, None, None)
        return FeasibilityResult(True, 0.0, 0.0)
    r, null = vt[0], vt[1]
    x_part = (u[:, 0] @ b) / s[0] * r
    if np.max(np.abs(a @ x_part - b)) > tol:
        return FeasibilityResult(False, None, None)
    # x = x_part + t * null must satisfy -tol <= x <= hi + tol and x[0] + x[1] < 1
    t_lo, t_hi = -math.inf, math.inf
    rows = [(null[0], -tol - x_part[0], hi[0] + tol - x_part[0]),
            (null[1], -tol - x_part[1], hi[1] + tol - x_part[1]),
            (null[0] + null[1], -math.inf, 1.0 - 1e-12 - x_part[0] - x_part[1])]
    for coef, lo_rhs, hi_rhs in rows:
        if abs(coef) < 1e-15:
            if lo_rhs > 0 or hi_rhs < 0:
                return FeasibilityResult(False, None, None)
            continue
        bounds = sorted((lo_rhs / coef, hi_rhs / coef))
        t_lo, t_hi = max(t_lo, bounds[0]), min(t_hi, bounds[1])
    if t_lo > t_hi:
        return FeasibilityResult(False, None, None)
    t = 0.0 if t_lo <= 0.0 <= t_hi else (t_lo if math.isinf(t_hi) else t_hi if math.isinf(t_lo) else 0.5 * (t_lo + t_hi))
    x = x_part + t * null
    return FeasibilityResult(True, float(np.clip(x[1], 0, hi[1])), float(np.clip(x[0], 0, hi[0])))


def _solve_grid(F, L, caps, tau):
    """Vectorised feasibility.

    ``F[z]`` is a pair ``(F_{Y|Z=z}(y0), F_{Y|Z=z}(y1))`` of arrays and
    ``L[z]`` the left side ``P(Y <= y_D | Z = z) - tau``.
    Returns ``feasible, p0, p1`` arrays (NaN witnesses where infeasible).
    """
    a11, a12 = F[0][0] - tau, F[0][1] - tau
    a21, a22 = F[1][0] - tau, F[1][1] - tau
    b1, b2 = L[0], L[1]
    det = a11 * a22 - a12 * a21
    regular = np.abs(det) > _SINGULAR
    with np.errstate(divide="ignore", invalid="ignore"):
        p1 = np.where(regular, (b1 * a22 - a12 * b2) / det, np.nan)
        p0 = np.where(regular, (a11 * b2 - a21 * b1) / det, np.nan)
    feasible = regular & _in_box(p0, p1, caps)
    for idx in zip(*np.nonzero(~regular)):
        a = np.array([[a11[idx], a12[idx]], [a21[idx], a22[idx]]])
        res = _singular_solve(a, np.array([b1[idx], b2[idx]]), caps)
        feasible[idx] = res.feasible
        if res.feasible:
            p0[idx], p1[idx] = res.p0, res.p1
    p0 = np.where(feasible, np.clip(p0, 0.0, caps[0]), np.nan)
    p1 = np.where(feasible, np.clip(p1, 0.0, caps[1]), np.nan)
    return feasible, p0, p1


def feasibility(pop: PopulationDistribution, y0: float, y1: float, tau: float) -> FeasibilityResult:
    """Whether ``(y0, y1)`` satisfies the identifying restrictions, with a witness ``(p0, p1)``."""
    if isinstance(pop, StructuralModel):
        pop = population_joint(pop)
    caps = density_caps(pop)
    F = [(np.atleast_1d(pop.cdf_y(z, y0)), np.atleast_1d(pop.cdf_y(z, y1))) for z in (0, 1)]
    L = [np.atleast_1d(pop.subcdf_y_d(0, z, y0) + pop.subcdf_y_d(1, z, y1)) - tau for z in (0, 1)]
    ok, p0, p1 = _solve_grid(F, L, caps, tau)
    if not ok[0]:
        return FeasibilityResult(False, None, None)
    return FeasibilityResult(True, float(p0[0]), float(p1[0]))


@dataclass(frozen=True, eq=False)
class IdentifiedSet:
    """Grid evaluation of the identified set and its projection on ``theta``."""

    y0: np.ndarray
    y1: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    feasible: np.ndarray
    grid_step: float
    tau: float
    caps: tuple
    theta_interval: tuple | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_feasible(self) -> int:
        return int(np.count_nonzero(self.feasible))

    @property
    def empty(self) -> bool:
        return self.theta_interval is None

    def points(self) -> list[ParamPoint]:
        idx = np.flatnonzero(self.feasible)
        return [ParamPoint(float(self.y0[i]), float(self.y1[i]), float(self.p0[i]), float(self.p1[i])) for i in idx]

    def to_dict(self) -> dict:
        return {
            "theta_interval": list(self.theta_interval) if self.theta_interval else None,
            "grid_step": self.grid_step,
            "tau": self.tau,
            "n_feasible": self.n_feasible,
            "caps": list(self.caps),
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        idx = np.flatnonzero(self.feasible)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["y0", "y1", "p0", "p1", "theta"])
            for i in idx:
                w.writerow([repr(float(v)) for v in (self.y0[i], self.y1[i], self.p0[i], self.p1[i], self.y1[i] - self.y0[i])])


def identified_set(pop, tau: float, y_window=None, grid_step: float = 0.005) -> IdentifiedSet:
    """Mark feasibility over a square ``(y0, y1)`` grid and project on ``theta``."""
    if isinstance(pop, StructuralModel):
        pop = population_joint(pop)
    if not grid_step > 0:
        raise DomainError(f"grid_step must be > 0, got {grid_step}")
    lo, hi = pop.support if y_window is None else y_window
    k = int(math.floor((hi - lo) / grid_step + 1e-9))
    ys = np.round(lo + grid_step * np.arange(k + 1), 12)
    caps = density_caps(pop)
    cdf = [pop.cdf_y(z, ys) for z in (0, 1)]
    sub = [[pop.subcdf_y_d(d, z, ys) for d in (0, 1)] for z in (0, 1)]
    i0, i1 = np.meshgrid(np.arange(ys.size), np.arange(ys.size), indexing="ij")
    F = [(cdf[z][i0], cdf[z][i1]) for z in (0, 1)]
    L = [sub[z][0][i0] + sub[z][1][i1] - tau for z in (0, 1)]
    ok, p0, p1 = _solve_grid(F, L, caps, tau)
    y0, y1 = ys[i0].ravel(), ys[i1].ravel()
    ok, p0, p1 = ok.ravel(), p0.ravel(), p1.ravel()
    theta = y1 - y0
    diag = {"grid_points": int(ok.size), "window": [float(lo), float(hi)]}
    interval = None
    if np.any(ok):
        interval = (float(np.round(theta[ok].min(), 12)), float(np.round(theta[ok].max(), 12)))
    else:
        diag["reason"] = "no grid point satisfies the moment equalities inside the probability box"
    return IdentifiedSet(y0, y1, p0, p1, ok, float(grid_step), float(tau), caps, interval, diag)


# non-identification witness


@dataclass(frozen=True, eq=False)
class PerturbedModel:
    """Observationally equivalent perturbation of an exogenous-treatment model.

    Arm ``d_bar`` gets the reparameterised quantile map
    ``q~(d_bar, u) = q(d_bar, t(u))`` with
    ``t(u) = u + eps / (1 - p0 - p1) * (u - g(u))`` and
    ``g(u) = F_{Y|D*=d_bar}(q(1 - d_bar, u))``; its misclassification
    probability drops by ``eps`` and a share ``c = eps / (1 - p0 - p1 + eps)``
    of the latent mass ``g`` moves to the other arm.
    """

    base: StructuralModel
    epsilon: float
    d_bar: int = 0
    tau: float = 0.5

    @property
    def p_tilde(self) -> tuple[float, float]:
        p = [self.base.p0, self.base.p1]
        p[self.d_bar] -= self.epsilon
        return p[0], p[1]

    @property
    def _k(self) -> float:
        return self.epsilon / (1.0 - self.base.p0 - self.base.p1)

    @property
    def _c(self) -> float:
        return self.epsilon / (1.0 - self.base.p0 - self.base.p1 + self.epsilon)

    @property
    def support(self) -> tuple[float, float]:
        return population_joint(self.base).support

    def z_prob(self, z: int) -> float:
        return self.base.z_probs[z]

    def g(self, u):
        fam = self.base.q_family
        return _inverse_clipped(fam, self.d_bar, fam.quantile(1 - self.d_bar, np.clip(u, 0.0, 1.0)))

    def t(self, u):
        u = np.asarray(u, dtype=float)
        return u + self._k * (u - self.g(u))

    def t_inverse(self, x):
        """Inverse of :meth:`t` by vectorised bisection on [0, 1]."""
        x = np.asarray(x, dtype=float)
        lo, hi = np.zeros_like(x), np.ones_like(x)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            below = self.t(mid) < x
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def q_tilde(self, d: int, u):
        fam = self.base.q_family
        if d == self.d_bar:
            return fam.quantile(d, self.t(u))
        return fam.quantile(d, u)

    def _u_of_y(self, d: int, y):
        u = _inverse_clipped(self.base.q_family, d, y)
        return self.t_inverse(u) if d == self.d_bar else u

    def joint_u(self, d: int, z: int, u):
        """Perturbed ``P(U <= u, D* = d | Z = z)``."""
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        pi = self.base.propensity(z)
        w = [1.0 - pi, pi]
        moved = self._c * self.g(u) * w[self.d_bar]
        if d == self.d_bar:
            return u * w[d] - moved
        return u * w[d] + moved

    def subcdf_y_dstar(self, d: int, z: int, y):
        return self.joint_u(d, z, self._u_of_y(d, y))

    def subcdf_y_d(self, d: int, z: int, y):
        g0 = self.subcdf_y_dstar(0, z, y)
        g1 = self.subcdf_y_dstar(1, z, y)
        p0, p1 = self.p_tilde
        if d == 0:
            return (1.0 - p0) * g0 + p1 * g1
        return p0 * g0 + (1.0 - p1) * g1


def _max_slope(fn, m: int) -> float:
    u = np.linspace(0.0, 1.0, m)
    return float(np.max(np.abs(np.diff(fn(u)))) * (m - 1))


def construct_perturbation(
    model: StructuralModel, epsilon: float, d_bar: int = 0, tau: float = 0.5, grid: int = 2001
) -> PerturbedModel:
    """Build the observationally equivalent perturbation of ``model``.

    Raises
    ------
    ConstructionError
        If the model is not exogenous (``rho != 0``), the arms share the
        same quantile at ``tau``, the map ``u -> F_{Y|D*=d_bar}(q(1-d_bar, u))``
        is not Lipschitz, ``epsilon >= p_{d_bar}``, or ``epsilon`` is too
        large to keep the reparameterisation and the latent law monotone.
    """
    if d_bar not in (0, 1):
        raise DomainError(f"d_bar must be 0 or 1, got {d_bar}")
    if epsilon < 0:
        raise DomainError(f"epsilon must be >= 0, got {epsilon}")
    if model.rho != 0.0:
        raise ConstructionError(f"treatment must be exogenous (rho = 0), got rho = {model.rho}")
    fam = model.q_family
    if float(fam.quantile(0, tau)) == float(fam.quantile(1, tau)):
        raise ConstructionError(f"q(0, {tau}) equals q(1, {tau}); the perturbation cannot move the quantile")
    pert = PerturbedModel(model, float(epsilon), d_bar, float(tau))
    coarse, fine = _max_slope(pert.g, grid), _max_slope(pert.g, 16 * (grid - 1) + 1)
    if fine > 1.5 * coarse:
        raise ConstructionError(
            f"u -> q^-1(q({1 - d_bar}, u), {d_bar}) is not Lipschitz "
            f"(grid slope grows from {coarse:.3g} to {fine:.3g} under refinement)"
        )
    if epsilon == 0:
        return pert
    if not epsilon < model.misclassification(d_bar):
        raise ConstructionError(f"epsilon must be < p_{d_bar} = {model.misclassification(d_bar)}, got {epsilon}")
    u = np.linspace(0.0, 1.0, grid)
    tu = pert.t(u)
    if not (np.all(np.diff(tu) > 0) and abs(tu[0]) < 1e-12 and abs(tu[-1] - 1.0) < 1e-12):
        raise ConstructionError(f"epsilon = {epsilon} breaks monotonicity of the reparameterisation t")
    for z in (0, 1):
        if np.any(np.diff(pert.joint_u(d_bar, z, u)) < -1e-15):
            raise ConstructionError(f"epsilon = {epsilon} gives a negative latent density in arm {d_bar}")
    return pert


def _observed_joint(obj, d, z, y):
    if isinstance(obj, StructuralModel):
        obj = population_joint(obj)
    return np.asarray(obj.subcdf_y_d(d, z, y), dtype=float) * obj.z_prob(z)


def verify_observational_equivalence(a, b, n_grid: int = 401) -> float:
    """Largest gap between the observed joint CDFs ``P(Y <= y, D = d, Z = z)`` of ``a`` and ``b``."""
    supports = []
    for obj in (a, b):
        obj = population_joint(obj) if isinstance(obj, StructuralModel) else obj
        supports.append(obj.support)
    lo = min(s[0] for s in supports)
    hi = max(s[1] for s in supports)
    y = np.linspace(lo, hi, n_grid)
    gap = 0.0
    for d in (0, 1):
        for z in (0, 1):
            gap = max(gap, float(np.max(np.abs(_observed_joint(a, d, z, y) - _observed_joint(b, d, z, y)))))
    return gap
