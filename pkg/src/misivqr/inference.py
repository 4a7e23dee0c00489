"""Subvector confidence sets for the structural quantile effect.

The test of ``H0: theta = q(1, tau) - q(0, tau)`` profiles the moment
statistic over the nuisance ``(y0, p0, p1)`` with ``y1 = y0 + theta``,
and calibrates it with a minimum-resampling bootstrap: the critical value
is a quantile of the draw-by-draw minimum of

* a *discard* statistic, with the nuisance held at the sample minimiser
  and inequalities kept only when they are close to binding
  (``sqrt(n) m_j / s_j <= kappa_n``), and
* a *penalised* statistic, which re-profiles over the nuisance on every
  draw after shifting each moment by ``kappa_n^{-1} sqrt(n) m_j / s_j``.

Bootstrap draws are Gaussian multipliers on the moment contributions, one
substream per draw, shared across every ``theta`` of a grid so that
acceptance regions at different levels are nested.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .bounds import empirical_quantile
from .dgp import Dataset
from .errors import ConfigError
from .identify import ParamPoint
from .moments import (
    MomentSpec,
    MomentSystem,
    MultiplierSums,
    apply_sigma_rule,
    build_moment_spec,
    evaluate_moments,
    statistic_from_standardized,
)


@dataclass(frozen=True)
class InferenceConfig:
    """Tuning of the test and of the nuisance search.

    ``kappa=None`` selects ``kappa_n = sqrt(ln n)``. The coarse nuisance
    grid has ``y_points`` outcome values across the admissible window and
    ``p_points`` values of each misclassification rate in ``[0, p_max]``;
    each of ``refine_rounds`` rounds shrinks the steps by
    ``refine_factor`` and searches ``2 * refine_half_width + 1`` points per
    axis around the incumbent.
    """

    alpha: float = 0.10
    n_bootstrap: int = 500
    kappa: float | None = None
    theta_grid: tuple = (-0.2, 0.8, 0.02)
    n_bins: int = 4
    y_points: int = 41
    p_points: int = 21
    p_max: float = 0.5
    refine_rounds: int = 2
    refine_factor: int = 5
    refine_half_width: int = 5
    seed: int = 0
    multiplier: str = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "theta_grid", tuple(float(v) for v in self.theta_grid))
        # alpha = 1 is admitted as the degenerate level whose critical value is 0
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.n_bootstrap < 100:
            raise ConfigError(f"n_bootstrap must be >= 100, got {self.n_bootstrap}")
        if self.kappa is not None and not self.kappa > 0:
            raise ConfigError(f"kappa must be positive, got {self.kappa}")
        if len(self.theta_grid) != 3:
            raise ConfigError("theta_grid must be (lo, hi, step)")
        lo, hi, step = self.theta_grid
        if not step > 0 or hi < lo:
            raise ConfigError(f"theta_grid needs step > 0 and hi >= lo, got {self.theta_grid}")
        if self.y_points < 1 or self.p_points < 2:
            raise ConfigError("y_points must be >= 1 and p_points >= 2")
        if not 0.0 < self.p_max < 1.0:
            raise ConfigError(f"p_max must lie in (0, 1), got {self.p_max}")
        if self.refine_rounds < 0 or self.refine_factor < 2 or self.refine_half_width < 1:
            raise ConfigError("refinement needs rounds >= 0, factor >= 2, half width >= 1")
        if self.multiplier != "gaussian":
            raise ConfigError(f"unsupported multiplier {self.multiplier!r}")

    def thetas(self) -> np.ndarray:
        lo, hi, step = self.theta_grid
        k = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return np.round(lo + step * np.arange(k), 12)

    def kappa_n(self, n: int) -> float:
        return math.sqrt(math.log(n)) if self.kappa is None else float(self.kappa)

    def replace(self, **changes) -> InferenceConfig:
        return InferenceConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta_grid"] = list(self.theta_grid)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> InferenceConfig:
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown inference settings: {sorted(unknown)}")
        return cls(**data)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class TestResult:
    theta_null: float
    statistic: float
    critical_value: float
    reject: bool
    point: ParamPoint | None
    critical_value_discard: float = float("nan")

    __test__ = False

    def to_dict(self) -> dict:
        return {
            "theta_null": self.theta_null,
            "statistic": self.statistic,
            "critical_value": self.critical_value,
            "reject": self.reject,
            "point": None if self.point is None else self.point.to_dict(),
            "critical_value_discard": self.critical_value_discard,
        }


@dataclass(frozen=True)
class ProfileResult:
    statistic: float
    point: ParamPoint
    window: tuple[float, float]
    steps: tuple[float, float]


# search geometry


def y_window(dataset: Dataset, theta: float) -> tuple[float, float]:
    """Admissible ``y0`` with both ``y0`` and ``y0 + theta`` inside the sample range."""
    ymin, ymax = float(dataset.y.min()), float(dataset.y.max())
    lo, hi = max(ymin, ymin - theta), min(ymax, ymax - theta)
    if lo > hi:
        raise ConfigError(f"theta={theta} leaves no y0 with y0 and y0 + theta inside [{ymin}, {ymax}]")
    return lo, hi


def _axis(lo, hi, k):
    return np.linspace(lo, hi, k) if hi > lo and k > 1 else np.array([lo])


def _offsets(config):
    return np.arange(-config.refine_half_width, config.refine_half_width + 1, dtype=float)


def _standardize(system, mean, sd, cols):
    """``sqrt(n) mean / sigma`` and the raw-scale sigma for columns ``cols``."""
    scale = system.scale[cols]
    sig = apply_sigma_rule(sd * scale) / scale
    return math.sqrt(system.n) * mean / sig, sig


_EQ = slice(0, 2)


def _sample_stat_grid(system, theta, ys, p0s, p1s):
    """Profiled-objective values on the product grid ``ys x p0s x p1s``."""
    y = ys[:, None, None]
    stat = system.statistic(y, y + theta, p0s[None, :, None], p1s[None, None, :])
    return np.where(p0s[None, :, None] + p1s[None, None, :] < 1.0, stat, np.inf)


def profiled_statistic(dataset: Dataset, spec: MomentSpec, theta_null: float, config: InferenceConfig,
                       system: MomentSystem | None = None) -> ProfileResult:
    """Minimise the moment statistic over ``(y0, p0, p1)`` at fixed ``theta``."""
    system = system or MomentSystem(dataset, spec)
    lo, hi = y_window(dataset, theta_null)
    ys = _axis(lo, hi, config.y_points)
    ps = np.linspace(0.0, config.p_max, config.p_points)
    hy = (hi - lo) / (config.y_points - 1) if config.y_points > 1 else 0.0
    hp = config.p_max / (config.p_points - 1)
    grid = _sample_stat_grid(system, theta_null, ys, ps, ps)
    i, j, k = np.unravel_index(np.argmin(grid), grid.shape)
    best, y0, p0, p1 = grid[i, j, k], ys[i], ps[j], ps[k]
    off = _offsets(config)
    for _ in range(config.refine_rounds):
        hy /= config.refine_factor
        hp /= config.refine_factor
        ys_l = np.unique(np.clip(y0 + hy * off, lo, hi))
        p0_l = np.unique(np.clip(p0 + hp * off, 0.0, config.p_max))
        p1_l = np.unique(np.clip(p1 + hp * off, 0.0, config.p_max))
        grid = _sample_stat_grid(system, theta_null, ys_l, p0_l, p1_l)
        i, j, k = np.unravel_index(np.argmin(grid), grid.shape)
        if grid[i, j, k] < best:
            best, y0, p0, p1 = grid[i, j, k], ys_l[i], p0_l[j], p1_l[k]
    point = ParamPoint(float(y0), float(y0 + theta_null), float(p0), float(p1))
    return ProfileResult(float(best), point, (lo, hi), (hy, hp))


# bootstrap


def bootstrap_multipliers(seed: int, n_bootstrap: int, n: int) -> np.ndarray:
    """``(B, n)`` standard normal multipliers, draw ``b`` from its own substream."""
    return np.stack([rng.substream(seed, rng.BOOTSTRAP, b).standard_normal(n) for b in range(n_bootstrap)])


def discard_statistics(v: np.ndarray, t: np.ndarray, is_equality: np.ndarray, kappa: float) -> np.ndarray:
    """Discard-style bootstrap statistics from standardized draws ``v`` (B x m).

    Inequality ``j`` enters only when its sample t-ratio ``t[j] <= kappa``.
    """
    keep = is_equality | (np.asarray(t) <= kappa)
    eq = np.where(is_equality, v, 0.0)
    ineq = np.where(keep & ~is_equality, np.minimum(v, 0.0), 0.0)
    return np.sum(eq * eq, -1) + np.sum(ineq * ineq, -1)


def _discard_draws(dataset, system, point, xi, kappa):
    ev = evaluate_moments(dataset, system.spec, point, system)
    g = ev.contributions
    centred = g - g.mean(axis=0)
    v = (xi @ centred) * ev.scale / (math.sqrt(ev.n) * ev.sigmas)
    return discard_statistics(v, ev.standardized(), ev.is_equality, kappa)


class _PenalisedProfiler:
    """Per-draw minimisation of the penalised bootstrap objective."""

    def __init__(self, system: MomentSystem, sums: MultiplierSums, theta: float, kappa: float):
        self.system = system
        self.sums = sums
        self.theta = theta
        self.inv_kappa = 1.0 / kappa
        self.root_n = math.sqrt(system.n)
        nb2 = 2 * system.spec.n_bins
        self.cols_p0 = slice(2, 2 + nb2)
        self.cols_p1 = slice(2 + nb2, 2 + 2 * nb2)

    def _shifted(self, s, mean, sd, cols, xi_total):
        t, sig = _standardize(self.system, mean, sd, cols)
        return (s - mean * xi_total) / (self.root_n * sig) + self.inv_kappa * t

    def ineq_part(self, which, p, per_draw):
        """``sum_j min(v_j + t_j / kappa, 0)^2`` for one family; shape ``(B, *p.shape[...])``."""
        sys_, sums = self.system, self.sums
        if which == 0:
            mean, sd = sys_.ineq_p0_moments(p)
            s = sums.ineq_p0_sums(p, per_draw)
            cols = self.cols_p0
        else:
            mean, sd = sys_.ineq_p1_moments(p)
            s = sums.ineq_p1_sums(p, per_draw)
            cols = self.cols_p1
        if not per_draw:
            mean, sd = mean[None], sd[None]
        xt = sums.total.reshape((-1,) + (1,) * (s.ndim - 1))
        w = np.minimum(self._shifted(s, mean, sd, cols, xt), 0.0)
        return np.sum(w * w, -1)

    def eq_part(self, y0, p0, p1, per_draw):
        sys_, sums = self.system, self.sums
        mean, sd = sys_.eq_moments(y0, y0 + self.theta, p0, p1)
        s = sums.eq_sums(y0, y0 + self.theta, p0, p1, per_draw)
        if not per_draw:
            mean, sd = mean[None], sd[None]
        xt = sums.total.reshape((-1,) + (1,) * (s.ndim - 1))
        w = self._shifted(s, mean, sd, _EQ, xt)
        return np.sum(w * w, -1)

    def eq_part_grid(self, y, p0, p1):
        """Equality part on a grid shared by all draws, shape ``(B, *grid)``.

        The multiplier sums are affine in ``(p0, p1)`` with draw-specific
        coefficients, so the standardized draws are one small matrix product.
        """
        sys_, sums = self.system, self.sums
        tau = sys_.tau
        p0, p1 = np.broadcast_arrays(p0, p1)
        mean, sd = sys_.eq_moments(y, y + self.theta, p0, p1)
        t, sig = _standardize(sys_, mean, sd, _EQ)
        denom = self.root_n * sig
        basis = np.stack([np.ones_like(p0), p0, p1])
        total = np.zeros((sums.B,) + p0.shape)
        for z in (0, 1):
            w00, w01 = sums._lookup(z, 0, y, False), sums._lookup(z, 1, y, False)
            w10, w11 = sums._lookup(z, 0, y + self.theta, False), sums._lookup(z, 1, y + self.theta, False)
            zt = sums.z_total[:, z]
            coef = np.column_stack([w00 + w11 - tau * zt, tau * zt - w10 - w11, tau * zt - w00 - w01, sums.total])
            weights = np.concatenate([basis, -mean[None, ..., z]]) / denom[None, ..., z]
            v = np.tensordot(coef, weights, axes=1) + self.inv_kappa * t[..., z]
            total += v * v
        return total

    def minimise(self, ys, ps, lo, hi, hy, hp, config):
        B = self.sums.B
        a0 = self.ineq_part(0, ps, False)  # (B, Np)
        a1 = self.ineq_part(1, ps, False)
        infeasible = ps[:, None] + ps[None, :] >= 1.0
        best = np.full(B, np.inf)
        arg = np.zeros((B, 3))
        for y in ys:
            tot = self.eq_part_grid(float(y), ps[:, None], ps[None, :])
            tot = tot + a0[:, :, None] + a1[:, None, :]
            tot[:, infeasible] = np.inf
            flat = tot.reshape(B, -1)
            k = np.argmin(flat, axis=1)
            val = flat[np.arange(B), k]
            better = val < best
            best = np.where(better, val, best)
            j0, j1 = np.unravel_index(k, infeasible.shape)
            arg[better] = np.column_stack([np.full(B, y), ps[j0], ps[j1]])[better]
        off = _offsets(config)
        rows = np.arange(B)
        for _ in range(config.refine_rounds):
            hy /= config.refine_factor
            hp /= config.refine_factor
            yl = np.clip(arg[:, :1] + hy * off, lo, hi)
            p0l = np.clip(arg[:, 1:2] + hp * off, 0.0, config.p_max)
            p1l = np.clip(arg[:, 2:3] + hp * off, 0.0, config.p_max)
            K = off.size
            tot = self.eq_part(yl[:, :, None, None], p0l[:, None, :, None], p1l[:, None, None, :], True)
            tot = tot + self.ineq_part(0, p0l, True)[:, None, :, None] + self.ineq_part(1, p1l, True)[:, None, None, :]
            tot = np.where(p0l[:, None, :, None] + p1l[:, None, None, :] < 1.0, tot, np.inf)
            flat = tot.reshape(B, -1)
            k = np.argmin(flat, axis=1)
            val = flat[rows, k]
            better = val < best
            best = np.where(better, val, best)
            iy, i0, i1 = np.unravel_index(k, (K, K, K))
            cand = np.column_stack([yl[rows, iy], p0l[rows, i0], p1l[rows, i1]])
            arg[better] = cand[better]
        return best


def _level_quantile(draws: np.ndarray, alpha: float) -> float:
    if alpha >= 1.0:
        return 0.0
    return max(0.0, empirical_quantile(draws, 1.0 - alpha))


def min_resampling_draws(dataset: Dataset, spec: MomentSpec, theta_null: float, config: InferenceConfig,
                         xi: np.ndarray | None = None, profile: ProfileResult | None = None,
                         system: MomentSystem | None = None, sums: MultiplierSums | None = None):
    """Discard-style and penalised bootstrap statistics, each of length ``B``."""
    system = system or MomentSystem(dataset, spec)
    if sums is None:
        xi = bootstrap_multipliers(config.seed, config.n_bootstrap, dataset.n) if xi is None else xi
        sums = MultiplierSums(system, xi)
    elif xi is None:
        raise ConfigError("multipliers must accompany precomputed sums")
    profile = profile or profiled_statistic(dataset, spec, theta_null, config, system)
    kappa = config.kappa_n(dataset.n)
    dr = _discard_draws(dataset, system, profile.point, xi, kappa)
    lo, hi = profile.window
    ys = _axis(lo, hi, config.y_points)
    ps = np.linspace(0.0, config.p_max, config.p_points)
    hy = (hi - lo) / (config.y_points - 1) if config.y_points > 1 else 0.0
    hp = config.p_max / (config.p_points - 1)
    pr = _PenalisedProfiler(system, sums, theta_null, kappa).minimise(ys, ps, lo, hi, hy, hp, config)
    return dr, pr


def critical_value_min_resampling(dataset: Dataset, spec: MomentSpec, theta_null: float, config: InferenceConfig,
                                  **cached) -> float:
    """``(1 - alpha)`` quantile of the draw-wise minimum of the two bootstrap statistics."""
    dr, pr = min_resampling_draws(dataset, spec, theta_null, config, **cached)
    return _level_quantile(np.minimum(dr, pr), config.alpha)


class _Tester:
    """Shared state for testing many ``theta`` on one dataset."""

    def __init__(self, dataset: Dataset, spec: MomentSpec, config: InferenceConfig):
        self.dataset, self.spec, self.config = dataset, spec, config
        self.system = MomentSystem(dataset, spec)
        self._xi = None
        self._sums = None

    @property
    def xi(self):
        if self._xi is None:
            self._xi = bootstrap_multipliers(self.config.seed, self.config.n_bootstrap, self.dataset.n)
            self._sums = MultiplierSums(self.system, self._xi)
        return self._xi

    def test(self, theta: float) -> TestResult:
        cfg = self.config
        prof = profiled_statistic(self.dataset, self.spec, theta, cfg, self.system)
        xi = self.xi
        dr, pr = min_resampling_draws(self.dataset, self.spec, theta, cfg, xi=xi, profile=prof,
                                      system=self.system, sums=self._sums)
        cv = _level_quantile(np.minimum(dr, pr), cfg.alpha)
        return TestResult(float(theta), prof.statistic, cv, bool(prof.statistic > cv), prof.point,
                          _level_quantile(dr, cfg.alpha))


def test_theta(dataset: Dataset, spec: MomentSpec, theta_null: float, config: InferenceConfig) -> TestResult:
    """Minimum-resampling test of one hypothesised ``theta``."""
    return _Tester(dataset, spec, config).test(theta_null)


test_theta.__test__ = False


@dataclass(frozen=True)
class ConfidenceSet:
    """Accepted ``theta`` grid points and their hull ``[min, max]``."""

    thetas: np.ndarray
    results: tuple
    config: InferenceConfig
    diagnostics: dict = field(default_factory=dict)

    @property
    def accepted(self) -> np.ndarray:
        return np.array([r.theta_null for r in self.results if not r.reject])

    @property
    def hull(self) -> tuple[float, float] | None:
        acc = self.accepted
        return None if acc.size == 0 else (float(acc.min()), float(acc.max()))

    @property
    def empty(self) -> bool:
        return self.accepted.size == 0

    def contains(self, theta: float) -> bool:
        h = self.hull
        return h is not None and h[0] - 1e-12 <= theta <= h[1] + 1e-12

    def to_dict(self) -> dict:
        return {
            "accepted": self.accepted.tolist(),
            "hull": None if self.hull is None else list(self.hull),
            "results": [r.to_dict() for r in self.results],
            "config": self.config.to_dict(),
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["theta", "statistic", "critical_value", "reject"])
            for r in self.results:
                w.writerow([repr(r.theta_null), repr(r.statistic), repr(r.critical_value), int(r.reject)])


def test_thetas(dataset: Dataset, spec: MomentSpec, thetas, config: InferenceConfig) -> list[TestResult]:
    """Test every ``theta`` with one set of bootstrap multipliers.

    A ``theta`` for which no ``y0`` keeps both quantiles inside the sample
    range is rejected with an infinite statistic.
    """
    tester = _Tester(dataset, spec, config)
    out = []
    for th in thetas:
        try:
            out.append(tester.test(float(th)))
        except ConfigError:
            out.append(TestResult(float(th), math.inf, 0.0, True, None))
    return out


test_thetas.__test__ = False


def confidence_interval(dataset: Dataset, spec: MomentSpec | None, config: InferenceConfig,
                        tau: float = 0.5) -> ConfidenceSet:
    """Invert the test over ``config.thetas()``.

    ``spec=None`` builds the moment system at quantile level ``tau`` with
    ``config.n_bins`` bins.
    """
    spec = spec or build_moment_spec(dataset, tau, config.n_bins)
    thetas = config.thetas()
    results = tuple(test_thetas(dataset, spec, thetas, config))
    diag = {"n": dataset.n, "tau": spec.tau, "kappa_n": config.kappa_n(dataset.n),
            "multiplier": config.multiplier, "n_accepted": sum(not r.reject for r in results)}
    if diag["n_accepted"] == 0:
        finite = [r for r in results if math.isfinite(r.statistic)]
        closest = min(finite, key=lambda r: r.statistic - r.critical_value) if finite else None
        diag["all_rejected"] = True
        diag["closest_theta"] = None if closest is None else closest.theta_null
    return ConfidenceSet(thetas, results, config, diag)
