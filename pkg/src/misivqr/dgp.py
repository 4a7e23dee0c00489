"""Structural model, simulation, and exact population distributions.

The latent design follows the Monte Carlo setup of the misclassified
IVQR model: a binary instrument ``Z``, a Gaussian copula for the
outcome rank ``U`` and the selection shock ``V``, a threshold rule
``D* = 1{V <= pi(Z)}``, outcome ``Y = q(D*, U)`` and a measurement ``D``
that flips ``D*`` with arm-specific probability ``p_{D*}``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.special import ndtr, ndtri

from . import rng
from .errors import DomainError

_FAMILIES = ("sqrt_linear", "square", "affine")
# Phi(-38.5) underflows to zero in double precision
_NORMAL_LIMIT = 38.5
_BLOCK = 4096


@dataclass(frozen=True)
class QuantileFamily:
    """Closed enumeration of structural quantile maps.

    The untreated arm is always ``q(0, u) = u``. The treated arm is
    ``sqrt(u)`` (``sqrt_linear``), ``u**2`` (``square``) or ``a + b*u``
    (``affine``, ``b > 0``).
    """

    name: str = "sqrt_linear"
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.name not in _FAMILIES:
            raise DomainError(f"unknown quantile family {self.name!r}; expected one of {_FAMILIES}")
        if self.name == "affine" and not self.b > 0:
            raise DomainError(f"affine family needs b > 0, got {self.b}")

    @classmethod
    def sqrt_linear(cls) -> QuantileFamily:
        return cls("sqrt_linear")

    @classmethod
    def square(cls) -> QuantileFamily:
        return cls("square")

    @classmethod
    def affine(cls, a: float, b: float) -> QuantileFamily:
        return cls("affine", float(a), float(b))

    def quantile(self, d, u):
        u = np.asarray(u, dtype=float)
        if d == 0:
            return u.copy()
        if self.name == "sqrt_linear":
            return np.sqrt(u)
        if self.name == "square":
            return u * u
        return self.a + self.b * u

    def inverse(self, d, y):
        """Inverse map without range checks."""
        y = np.asarray(y, dtype=float)
        if d == 0:
            return y.copy()
        if self.name == "sqrt_linear":
            return y * y
        if self.name == "square":
            return np.sqrt(y)
        return (y - self.a) / self.b

    def inverse_derivative(self, d, y):
        y = np.asarray(y, dtype=float)
        if d == 0:
            return np.ones_like(y)
        if self.name == "sqrt_linear":
            return 2.0 * y
        if self.name == "square":
            with np.errstate(divide="ignore"):
                return 0.5 / np.sqrt(y)
        return np.full_like(y, 1.0 / self.b)

    def range(self, d) -> tuple[float, float]:
        return float(self.quantile(d, 0.0)), float(self.quantile(d, 1.0))

    def to_dict(self) -> dict:
        return {"name": self.name, "a": self.a, "b": self.b}


@dataclass(frozen=True)
class StructuralModel:
    """Full data-generating primitive.

    Parameters
    ----------
    q_family : QuantileFamily
        Structural quantile maps of both arms.
    rho : float
        Gaussian copula correlation between ``U`` and ``V``, in (-1, 1).
    gamma : float
        Instrument strength; ``pi(z0) = 0.5 - gamma``, ``pi(z1) = 0.5 + gamma``.
    z_support : tuple of float
        Labels of the two instrument values.
    z_probs : tuple of float
        ``P(Z = z0)``, ``P(Z = z1)``.
    p0, p1 : float
        Misclassification probabilities ``P(D != D* | D* = d*)``.
    """

    q_family: QuantileFamily = field(default_factory=QuantileFamily.sqrt_linear)
    rho: float = 0.0
    gamma: float = 0.0
    z_support: tuple = (0.0, 1.0)
    z_probs: tuple = (0.5, 0.5)
    p0: float = 0.0
    p1: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "z_support", tuple(float(v) for v in self.z_support))
        object.__setattr__(self, "z_probs", tuple(float(v) for v in self.z_probs))
        if not isinstance(self.q_family, QuantileFamily):
            raise DomainError("q_family must be a QuantileFamily")
        if not -1.0 < self.rho < 1.0:
            raise DomainError(f"rho must lie in (-1, 1), got {self.rho}")
        if not -0.5 <= self.gamma <= 0.5:
            raise DomainError(f"gamma must lie in [-0.5, 0.5], got {self.gamma}")
        if len(self.z_support) != 2 or self.z_support[0] == self.z_support[1]:
            raise DomainError("z_support must hold two distinct labels")
        if len(self.z_probs) != 2 or min(self.z_probs) <= 0 or abs(sum(self.z_probs) - 1) > 1e-12:
            raise DomainError(f"z_probs must be two positive probabilities summing to 1, got {self.z_probs}")
        for name in ("p0", "p1"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise DomainError(f"{name} must lie in [0, 1), got {p}")
        if not self.p0 + self.p1 < 1.0:
            raise DomainError(f"p0 + p1 must be < 1, got {self.p0 + self.p1}")

    def propensity(self, z: int) -> float:
        """``P(D* = 1 | Z = z)`` for instrument index ``z``."""
        return 0.5 - self.gamma if z == 0 else 0.5 + self.gamma

    def misclassification(self, d: int) -> float:
        return self.p0 if d == 0 else self.p1

    def replace(self, **changes) -> StructuralModel:
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return StructuralModel(**values)

    def to_dict(self) -> dict:
        return {
            "q_family": self.q_family.to_dict(),
            "rho": self.rho,
            "gamma": self.gamma,
            "z_support": list(self.z_support),
            "z_probs": list(self.z_probs),
            "p0": self.p0,
            "p1": self.p1,
        }

    @classmethod
    def from_dict(cls, data: dict) -> StructuralModel:
        expected = set(cls.__dataclass_fields__)
        if set(data) != expected:
            raise DomainError(f"model config must have exactly the fields {sorted(expected)}, got {sorted(data)}")
        fam = data["q_family"]
        if isinstance(fam, str):
            fam = {"name": fam}
        values = dict(data)
        values["q_family"] = QuantileFamily(**fam)
        return cls(**values)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> StructuralModel:
        return cls.from_dict(json.loads(text))


def _check_arm(d_star):
    if d_star not in (0, 1):
        raise DomainError(f"treatment arm must be 0 or 1, got {d_star!r}")


def structural_quantile(model: StructuralModel, d_star: int, u):
    """``q(d*, u)``; ``u`` may be an array."""
    _check_arm(d_star)
    u_arr = np.asarray(u, dtype=float)
    if np.any(~((u_arr >= 0) & (u_arr <= 1))):
        raise DomainError("quantile index must lie in [0, 1]")
    out = model.q_family.quantile(d_star, u_arr)
    return float(out) if np.ndim(u) == 0 else out


def structural_inverse(model: StructuralModel, d_star: int, y):
    """``u`` such that ``q(d*, u) = y``; ``y`` must lie in the arm's range."""
    _check_arm(d_star)
    lo, hi = model.q_family.range(d_star)
    y_arr = np.asarray(y, dtype=float)
    if np.any(~((y_arr >= lo) & (y_arr <= hi))):
        raise DomainError(f"outcome outside the range [{lo}, {hi}] of q({d_star}, .)")
    out = np.clip(model.q_family.inverse(d_star, y_arr), 0.0, 1.0)
    return float(out) if np.ndim(y) == 0 else out


def _inverse_clipped(family: QuantileFamily, d: int, y):
    """``P(q(d, U) <= y)`` for uniform ``U``: the inverse clipped to [0, 1]."""
    lo, hi = family.range(d)
    y = np.asarray(y, dtype=float)
    inner = family.inverse(d, np.clip(y, lo, hi))
    return np.where(y <= lo, 0.0, np.where(y >= hi, 1.0, np.clip(inner, 0.0, 1.0)))


def _normal_pdf(t):
    return math.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)


def bvn_cdf(x1: float, x2: float, rho: float) -> float:
    """Standard bivariate normal CDF ``P(X1 <= x1, X2 <= x2)``.

    Computed by adaptive quadrature of ``phi(t) * Phi((x2 - rho t) / s)``
    over the first coordinate, ``s = sqrt(1 - rho**2)``.
    """
    rho = float(rho)
    if not -1.0 < rho < 1.0:
        raise DomainError(f"correlation must satisfy |rho| < 1, got {rho}")
    x1, x2 = float(x1), float(x2)
    if math.isnan(x1) or math.isnan(x2):
        raise DomainError("bvn_cdf arguments must not be NaN")
    if x1 == -math.inf or x2 == -math.inf:
        return 0.0
    if x1 == math.inf:
        return float(ndtr(x2))
    if x2 == math.inf:
        return float(ndtr(x1))
    if rho == 0.0:
        return float(ndtr(x1) * ndtr(x2))
    if x1 > x2:
        x1, x2 = x2, x1
    s = math.sqrt(1.0 - rho * rho)

    def integrand(t):
        return _normal_pdf(t) * float(ndtr((x2 - rho * t) / s))

    if x1 <= 0.0:
        a, b, sign, base = -_NORMAL_LIMIT, max(x1, -_NORMAL_LIMIT), 1.0, 0.0
    else:
        a, b, sign, base = min(x1, _NORMAL_LIMIT), _NORMAL_LIMIT, -1.0, float(ndtr(x2))
    if b <= a:
        return min(max(base, 0.0), 1.0)
    kink = x2 / rho
    points = [kink] if a < kink < b else None
    val, _ = integrate.quad(integrand, a, b, points=points, epsabs=1e-13, epsrel=1e-12, limit=200)
    return min(max(base + sign * val, 0.0), 1.0)


def copula_cdf(u, v: float, rho: float):
    """Gaussian copula ``C(u, v) = P(U <= u, V <= v)``, vectorised over ``u``."""
    u = np.asarray(u, dtype=float)
    if v <= 0.0:
        return np.zeros_like(u)
    if v >= 1.0:
        return np.clip(u, 0.0, 1.0)
    if rho == 0.0:
        return np.clip(u, 0.0, 1.0) * v
    kv = float(ndtri(v))
    flat = np.clip(u, 0.0, 1.0).ravel()
    out = np.empty_like(flat)
    for i, ui in enumerate(flat):
        if ui <= 0.0:
            out[i] = 0.0
        elif ui >= 1.0:
            out[i] = v
        else:
            out[i] = bvn_cdf(float(ndtri(ui)), kv, rho)
    return out.reshape(u.shape)


def copula_conditional(u, v: float, rho: float):
    """``P(V <= v | U = u)`` under the Gaussian copula, i.e. ``dC/du``."""
    u = np.asarray(u, dtype=float)
    if v <= 0.0:
        return np.zeros_like(u)
    if v >= 1.0:
        return np.ones_like(u)
    if rho == 0.0:
        return np.full_like(u, v)
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = (ndtri(v) - rho * ndtri(np.clip(u, 0.0, 1.0))) / math.sqrt(1.0 - rho * rho)
    return ndtr(arg)


def misclassify(d_star, p0: float, p1: float, draw):
    """Flip ``d_star`` when ``draw < p_{d_star}``; vectorised over arrays."""
    if not p0 + p1 < 1.0:
        raise DomainError(f"p0 + p1 must be < 1, got {p0 + p1}")
    d_star = np.asarray(d_star)
    flip = np.asarray(draw) < np.where(d_star == 1, p1, p0)
    out = np.where(flip, 1 - d_star, d_star).astype(np.int8)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class Dataset:
    """``n`` observations of ``(Y, D, Z)`` with ``z`` stored as index 0/1."""

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    seed: int | None = None
    z_support: tuple = (0.0, 1.0)

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=float)
        d = np.ascontiguousarray(self.d, dtype=np.int8)
        z = np.ascontiguousarray(self.z, dtype=np.int8)
        if not (y.ndim == d.ndim == z.ndim == 1) or not (y.size == d.size == z.size):
            raise DomainError("y, d, z must be 1-d arrays of equal length")
        if y.size < 1:
            raise DomainError("a dataset needs at least one observation")
        if not np.all(np.isfinite(y)):
            raise DomainError("outcomes must be finite")
        if np.any((d != 0) & (d != 1)):
            raise DomainError("d must be 0/1")
        if np.any((z != 0) & (z != 1)):
            raise DomainError("z must index z_support (0 or 1)")
        for name, arr in (("y", y), ("d", d), ("z", z)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return int(self.y.size)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            np.array_equal(self.y, other.y)
            and np.array_equal(self.d, other.d)
            and np.array_equal(self.z, other.z)
        )

    __hash__ = None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["y", "d", "z"])
            for yi, di, zi in zip(self.y.tolist(), self.d.tolist(), self.z.tolist()):
                w.writerow([repr(yi), di, zi])

    @classmethod
    def from_csv(cls, path, seed: int | None = None, z_support=(0.0, 1.0)) -> Dataset:
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["y", "d", "z"]:
                raise DomainError(f"{path}: expected header y,d,z, got {header}")
            rows = [r for r in reader if r]
        if not rows:
            raise DomainError(f"{path}: no observations")
        y = np.array([float(r[0]) for r in rows])
        d = np.array([int(r[1]) for r in rows])
        z = np.array([int(r[2]) for r in rows])
        return cls(y, d, z, seed=seed, z_support=z_support)


def sample_dataset(model: StructuralModel, n: int, seed: int) -> Dataset:
    """Simulate ``n`` draws of ``(Y, D, Z)`` from ``model``.

    Observations are generated in fixed-size blocks, each from its own
    substream, so a block's content depends only on ``(seed, block)`` and
    datasets of different sizes share their common prefix.
    """
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    n_blocks = -(-n // _BLOCK)
    s = math.sqrt(1.0 - model.rho**2)
    k = np.array([ndtri(model.propensity(0)), ndtri(model.propensity(1))])
    fam = model.q_family
    ys, ds, zs = [], [], []
    for block in range(n_blocks):
        g = rng.substream(seed, rng.DATA, block)
        r_z = g.random(_BLOCK)
        x = g.standard_normal((2, _BLOCK))
        r_m = g.random(_BLOCK)
        z = (r_z < model.z_probs[1]).astype(np.int8)
        xv = model.rho * x[0] + s * x[1]
        u = ndtr(x[0])
        # compare in normal space so pi in {0, 1} is exact
        d_star = (xv <= k[z]).astype(np.int8)
        y = np.where(d_star == 1, fam.quantile(1, u), fam.quantile(0, u))
        d = misclassify(d_star, model.p0, model.p1, r_m)
        ys.append(y)
        ds.append(d)
        zs.append(z)
    y = np.concatenate(ys)[:n]
    d = np.concatenate(ds)[:n]
    z = np.concatenate(zs)[:n]
    return Dataset(y, d, z, seed=seed, z_support=model.z_support)


@dataclass(frozen=True)
class PopulationDistribution:
    """Exact distributions implied by a :class:`StructuralModel`.

    Instrument values are addressed by index ``z`` in {0, 1}. Methods
    accept scalar or array arguments. Conditional objects for an empty
    treatment arm (``pi(z)`` in {0, 1}) are the zero measure.
    """

    model: StructuralModel
    tol: float = 1e-10

    @property
    def support(self) -> tuple[float, float]:
        fam = self.model.q_family
        lo0, hi0 = fam.range(0)
        lo1, hi1 = fam.range(1)
        return min(lo0, lo1), max(hi0, hi1)

    def z_prob(self, z: int) -> float:
        return self.model.z_probs[z]

    def prob_dstar(self, d: int, z: int) -> float:
        pi = self.model.propensity(z)
        return pi if d == 1 else 1.0 - pi

    def prob_d(self, d: int, z: int) -> float:
        """``P(D = d | Z = z)``."""
        pi = self.model.propensity(z)
        p0, p1 = self.model.p0, self.model.p1
        p_one = p0 * (1.0 - pi) + (1.0 - p1) * pi
        return p_one if d == 1 else 1.0 - p_one

    # latent level

    def joint_u(self, d: int, z: int, u):
        """``P(U <= u, D* = d | Z = z)``."""
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        c = copula_cdf(u, self.model.propensity(z), self.model.rho)
        return c if d == 1 else np.clip(u - c, 0.0, None)

    def density_u(self, d: int, z: int, u):
        """``f_{U, D* | Z = z}(u, d)``."""
        g = copula_conditional(u, self.model.propensity(z), self.model.rho)
        return g if d == 1 else 1.0 - g

    def cdf_u_given_dstar(self, d: int, z: int, u):
        """``F_{U | D* = d, Z = z}(u)``; zero for an empty arm."""
        w = self.prob_dstar(d, z)
        j = self.joint_u(d, z, u)
        return j / w if w > 0 else np.zeros_like(j)

    # outcome level, true treatment

    def subcdf_y_dstar(self, d: int, z: int, y):
        """``P(Y <= y, D* = d | Z = z)``."""
        return self.joint_u(d, z, _inverse_clipped(self.model.q_family, d, y))

    def density_y_dstar(self, d: int, z: int, y):
        fam = self.model.q_family
        y = np.asarray(y, dtype=float)
        lo, hi = fam.range(d)
        inside = (y > lo) & (y < hi)
        yc = np.clip(y, lo, hi)
        u = np.clip(fam.inverse(d, yc), 0.0, 1.0)
        with np.errstate(invalid="ignore"):
            val = self.density_u(d, z, u) * fam.inverse_derivative(d, yc)
        return np.where(inside, np.nan_to_num(val, nan=0.0, posinf=np.inf), 0.0)

    def cdf_y_given_dstar(self, d: int, z: int, y):
        w = self.prob_dstar(d, z)
        s = self.subcdf_y_dstar(d, z, y)
        return s / w if w > 0 else np.zeros_like(s)

    def cdf_y(self, z: int, y):
        """``F_{Y | Z = z}(y)``."""
        return self.subcdf_y_dstar(0, z, y) + self.subcdf_y_dstar(1, z, y)

    def density_y(self, z: int, y):
        return self.density_y_dstar(0, z, y) + self.density_y_dstar(1, z, y)

    # outcome level, observed measurement

    def subcdf_y_d(self, d: int, z: int, y):
        """``P(Y <= y, D = d | Z = z)`` from the misclassification mixing."""
        g0 = self.subcdf_y_dstar(0, z, y)
        g1 = self.subcdf_y_dstar(1, z, y)
        p0, p1 = self.model.p0, self.model.p1
        if d == 0:
            return (1.0 - p0) * g0 + p1 * g1
        return p0 * g0 + (1.0 - p1) * g1

    def density_y_d(self, d: int, z: int, y):
        f0 = self.density_y_dstar(0, z, y)
        f1 = self.density_y_dstar(1, z, y)
        p0, p1 = self.model.p0, self.model.p1
        if d == 0:
            return (1.0 - p0) * f0 + p1 * f1
        return p0 * f0 + (1.0 - p1) * f1

    def prob_d_given_y(self, d: int, y, z: int):
        """``f_{D | Y, Z}(d | y, z)``; outside the support, ``P(D = d | Z = z)``."""
        num = self.density_y_d(d, z, y)
        other = self.density_y_d(1 - d, z, y)
        tot = num + other
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = num / tot
        return np.where((tot > 0) & np.isfinite(ratio), ratio, self.prob_d(d, z))

    def quantile_y(self, z: int, tau: float) -> float:
        """Left-continuous inverse of ``F_{Y | Z = z}`` by bisection."""
        if not 0.0 < tau < 1.0:
            raise DomainError(f"tau must lie in (0, 1), got {tau}")
        lo, hi = self.support
        if float(self.cdf_y(z, lo)) >= tau:
            return lo
        while hi - lo > self.tol:
            mid = 0.5 * (lo + hi)
            if float(self.cdf_y(z, mid)) >= tau:
                hi = mid
            else:
                lo = mid
        return hi


def population_joint(model: StructuralModel) -> PopulationDistribution:
    """Population distribution implied by ``model``."""
    return PopulationDistribution(model)
