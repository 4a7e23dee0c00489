"""Reduced-form quantile effects, attenuation, and population identities.

Everything here except :func:`empirical_quantile` and the sample branch of
:func:`reduced_form_qte` is a population diagnostic computed from the
closed-form distributions of :mod:`misivqr.dgp`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import integrate

from .dgp import Dataset, PopulationDistribution, StructuralModel, population_joint
from .errors import DomainError, EstimationError


@dataclass(frozen=True)
class QuantileSpec:
    tau: float

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise DomainError(f"tau must lie in (0, 1), got {self.tau}")


@dataclass(frozen=True)
class AttenuationReport:
    """Structural and reduced-form effects and their ratio ``kappa``.

    ``kappa`` is ``None`` when the structural effect is zero.
    """

    delta_q: float
    delta_rf: float
    kappa: float | None

    def to_dict(self) -> dict:
        return {"delta_q": self.delta_q, "delta_rf": self.delta_rf, "kappa": self.kappa}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class MonotonicityCheck(NamedTuple):
    holds: bool
    worst_violation: float


def _as_population(source) -> PopulationDistribution:
    if isinstance(source, PopulationDistribution):
        return source
    if isinstance(source, StructuralModel):
        return population_joint(source)
    raise TypeError(f"expected a StructuralModel or PopulationDistribution, got {type(source).__name__}")


def empirical_quantile(values, tau: float) -> float:
    """Type-1 sample quantile ``inf{y : F_n(y) >= tau}``."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    n = v.size
    if n == 0:
        raise DomainError("empirical_quantile of an empty sample")
    if not 0.0 < tau <= 1.0:
        raise DomainError(f"tau must lie in (0, 1], got {tau}")
    # smallest k with k / n >= tau; k / n is compared exactly as doubles
    k = int(np.searchsorted(np.arange(1, n + 1) / n, tau, side="left"))
    return float(v[min(k, n - 1)])


def reduced_form_qte(source, tau: float) -> float:
    """``Q_{Y|Z=z1}(tau) - Q_{Y|Z=z0}(tau)`` at population or sample level."""
    QuantileSpec(tau)
    if isinstance(source, Dataset):
        q = []
        for z in (0, 1):
            cell = source.y[source.z == z]
            if cell.size == 0:
                raise EstimationError(f"no observations with z index {z}")
            q.append(empirical_quantile(cell, tau))
        return q[1] - q[0]
    pop = _as_population(source)
    return pop.quantile_y(1, tau) - pop.quantile_y(0, tau)


def attenuation_kappa(model: StructuralModel, tau: float) -> AttenuationReport:
    QuantileSpec(tau)
    fam = model.q_family
    delta_q = float(fam.quantile(1, tau) - fam.quantile(0, tau))
    delta_rf = reduced_form_qte(model, tau)
    kappa = None if abs(delta_q) <= 1e-12 else delta_rf / delta_q
    return AttenuationReport(delta_q, delta_rf, kappa)


def density_gap(model: StructuralModel, u):
    """Signed violations of stochastic monotonicity at ranks ``u``.

    Returns an array of shape ``(2, len(u))``: row 0 is
    ``f(u, 0 | z1) - f(u, 0 | z0)`` and row 1 is ``f(u, 1 | z0) - f(u, 1 | z1)``.
    Monotonicity holds where both rows are <= 0.
    """
    pop = population_joint(model)
    u = np.asarray(u, dtype=float)
    untreated = pop.density_u(0, 1, u) - pop.density_u(0, 0, u)
    treated = pop.density_u(1, 0, u) - pop.density_u(1, 1, u)
    return np.vstack([untreated, treated])


def check_stochastic_monotonicity(model: StructuralModel, u_grid: int = 2001, tol: float = 1e-9) -> MonotonicityCheck:
    """Check both density inequalities on a uniform grid of ``u_grid`` ranks."""
    if u_grid < 2:
        raise DomainError(f"u_grid must be >= 2, got {u_grid}")
    gap = density_gap(model, np.linspace(0.0, 1.0, u_grid))
    worst = float(np.max(gap))
    return MonotonicityCheck(worst <= tol, worst)


def verify_testable_implication(model: StructuralModel, tau: float) -> np.ndarray:
    """``P(Y <= q(D*, tau) | Z = z) - tau`` for each instrument value."""
    QuantileSpec(tau)
    pop = population_joint(model)
    fam = model.q_family
    q0, q1 = float(fam.quantile(0, tau)), float(fam.quantile(1, tau))
    return np.array(
        [float(pop.subcdf_y_dstar(0, z, q0) + pop.subcdf_y_dstar(1, z, q1)) - tau for z in (0, 1)]
    )


def verify_balance_identity(model: StructuralModel, tau: float, z: int) -> tuple[float, float]:
    """Both sides of the mass balance around ``Q_{Y|Z=z}(tau)``.

    With ``lo_arm`` the arm whose structural quantile at ``tau`` is smaller,
    the untreated-side mass between ``q(lo_arm, tau)`` and ``Q_{Y|Z}(tau)``
    equals the other arm's mass between ``Q_{Y|Z}(tau)`` and its structural
    quantile. Both integrals are computed by quadrature of the densities.
    """
    QuantileSpec(tau)
    pop = population_joint(model)
    fam = model.q_family
    qs = [float(fam.quantile(0, tau)), float(fam.quantile(1, tau))]
    lo_arm = 0 if qs[0] <= qs[1] else 1
    hi_arm = 1 - lo_arm
    qz = pop.quantile_y(z, tau)

    def mass(arm, a, b):
        if b <= a or pop.prob_dstar(arm, z) == 0.0:
            return 0.0
        val, _ = integrate.quad(
            lambda y: float(pop.density_y_dstar(arm, z, y)), a, b, epsabs=1e-12, epsrel=1e-12, limit=200
        )
        return val

    left = mass(lo_arm, qs[lo_arm], qz)
    right = mass(hi_arm, qz, qs[hi_arm])
    return left, right
