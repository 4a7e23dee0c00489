"""Finite moment system implied by the identified-set characterisation.

For a candidate ``(y0, y1, p0, p1)`` there are two equality moments, one
per instrument value,

    E[(1{Y <= y_D} - tau - p1 (1{Y <= y0} - tau) - p0 (1{Y <= y1} - tau)) | Z = z] = 0,

and ``4 * n_bins`` inequality moments instrumenting the conditional
bounds on ``(p0, p1)`` with outcome-bin by instrument-value indicators,

    E[(1{D = 1} - p0) 1{Y in bin_j, Z = z}] >= 0,
    E[(1{D = 0} - p1) 1{Y in bin_j, Z = z}] >= 0.

Every moment is a polynomial in ``(p0, p1)`` whose coefficients are
counts of observations below ``y0``, ``y1`` or inside a cell, so means,
variances and multiplier-bootstrap sums are computed from sorted data
and cumulative counts rather than from the ``n x m`` contribution matrix.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .bounds import empirical_quantile
from .dgp import Dataset
from .errors import BinDegeneracyError, DomainError, EstimationError

SIGMA_FLOOR = 1e-6
# a column whose standard deviation is below this is treated as constant
_DEGENERATE = 1e-12


@dataclass(frozen=True, eq=False)
class MomentSpec:
    """Quantile level, outcome bins and moment layout.

    Columns are ordered: the two equalities (z0, z1), then the
    ``p0``-type inequalities for (z0, bin 0..), (z1, bin 0..), then the
    ``p1``-type inequalities in the same order.
    """

    tau: float
    n_bins: int
    edges: np.ndarray

    @property
    def n_equalities(self) -> int:
        return 2

    @property
    def n_inequalities(self) -> int:
        return 4 * self.n_bins

    @property
    def n_moments(self) -> int:
        return self.n_equalities + self.n_inequalities

    @property
    def is_equality(self) -> np.ndarray:
        flags = np.zeros(self.n_moments, dtype=bool)
        flags[:2] = True
        return flags

    def labels(self) -> list[str]:
        out = ["eq[z=0]", "eq[z=1]"]
        for kind in ("p0", "p1"):
            out += [f"ineq_{kind}[z={z},bin={j}]" for z in (0, 1) for j in range(self.n_bins)]
        return out

    def bin_index(self, y) -> np.ndarray:
        """Bin of each outcome: bin ``j`` is ``(e_j, e_{j+1}]`` with open outer ends."""
        return np.searchsorted(self.edges, np.asarray(y, dtype=float), side="left")


def build_moment_spec(dataset: Dataset, tau: float, n_bins: int = 4) -> MomentSpec:
    """Bin edges at the pooled empirical outcome quantiles ``j / n_bins``."""
    if n_bins < 1:
        raise DomainError(f"n_bins must be >= 1, got {n_bins}")
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    if np.unique(dataset.y).size < n_bins:
        raise BinDegeneracyError(f"{np.unique(dataset.y).size} distinct outcomes cannot fill {n_bins} bins")
    edges = np.array([empirical_quantile(dataset.y, j / n_bins) for j in range(1, n_bins)])
    if edges.size and (np.any(np.diff(edges) <= 0) or edges[-1] >= dataset.y.max()):
        raise BinDegeneracyError(f"outcome ties leave empty bins (edges {edges.tolist()})")
    edges.setflags(write=False)
    return MomentSpec(float(tau), int(n_bins), edges)


def apply_sigma_rule(sd):
    """Floor small standard deviations; unit scale for constant columns."""
    sd = np.asarray(sd, dtype=float)
    return np.where(sd > SIGMA_FLOOR, sd, np.where(sd > _DEGENERATE, SIGMA_FLOOR, 1.0))


@dataclass(frozen=True, eq=False)
class MomentEvaluation:
    """Moments of one dataset at one parameter point.

    ``contributions[i, j]`` is observation ``i``'s term of moment ``j``
    (the equality terms are not divided by ``P(Z = z)``, which keeps every
    entry in (-1, 1)); ``scale`` holds the per-column factor ``n / n_z``
    for equalities and 1 otherwise, so ``means = scale * contributions.mean(0)``.
    """

    contributions: np.ndarray
    means: np.ndarray
    sigmas: np.ndarray
    is_equality: np.ndarray
    scale: np.ndarray
    labels: tuple

    @property
    def n(self) -> int:
        return self.contributions.shape[0]

    def standardized(self) -> np.ndarray:
        """``sqrt(n) * means / sigmas``."""
        return math.sqrt(self.n) * self.means / self.sigmas

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["moment", "equality", "mean", "sigma"])
            for lab, eq, m, s in zip(self.labels, self.is_equality, self.means, self.sigmas):
                w.writerow([lab, int(eq), repr(float(m)), repr(float(s))])


def _poly_moments(total, square, n):
    mean = total / n
    var = np.maximum(square / n - mean * mean, 0.0)
    return mean, np.sqrt(var)


class MomentSystem:
    """Sorted-data representation of a dataset for fast moment evaluation.

    All methods broadcast over their array arguments. Returned means and
    standard deviations are of the raw contributions (equalities not yet
    rescaled by ``n / n_z``).
    """

    def __init__(self, dataset: Dataset, spec: MomentSpec):
        self.spec = spec
        self.n = dataset.n
        self.tau = spec.tau
        y, d, z = dataset.y, dataset.d, dataset.z
        self.n_z = np.array([np.count_nonzero(z == k) for k in (0, 1)])
        if np.any(self.n_z == 0):
            raise EstimationError(f"empty instrument cell: counts {self.n_z.tolist()}")
        # order[z][d] sorts the indices of cell (z, d) by outcome
        self.order = [[None, None], [None, None]]
        self.sorted_y = [[None, None], [None, None]]
        for zk in (0, 1):
            for dk in (0, 1):
                idx = np.flatnonzero((z == zk) & (d == dk))
                o = idx[np.argsort(y[idx], kind="stable")]
                self.order[zk][dk] = o
                self.sorted_y[zk][dk] = y[o]
        b = spec.bin_index(y)
        self.cell_treated = np.zeros((2, spec.n_bins))
        self.cell_total = np.zeros((2, spec.n_bins))
        for zk in (0, 1):
            in_z = z == zk
            self.cell_total[zk] = np.bincount(b[in_z], minlength=spec.n_bins)
            self.cell_treated[zk] = np.bincount(b[in_z & (d == 1)], minlength=spec.n_bins)
        self._bins = b
        self._z = z
        self._d = d

    @cached_property
    def scale(self) -> np.ndarray:
        s = np.ones(self.spec.n_moments)
        s[:2] = self.n / self.n_z
        return s

    def count(self, z: int, d: int, y):
        return np.searchsorted(self.sorted_y[z][d], y, side="right")

    # equalities

    def _eq_terms(self, cnt, y0, y1, p0, p1):
        """Sum and sum of squares of equality contributions given count lookups."""
        ymin = np.minimum(y0, y1)
        tot, sq = [], []
        for z in (0, 1):
            n00, n01 = cnt(z, 0, y0), cnt(z, 1, y0)
            n10, n11 = cnt(z, 0, y1), cnt(z, 1, y1)
            nm0, nm1 = cnt(z, 0, ymin), cnt(z, 1, ymin)
            a = n00 + n11
            b0 = n00 + n01
            b1 = n10 + n11
            m12 = n00 + nm1
            m13 = nm0 + n11
            m23 = nm0 + nm1
            c = self.tau * (1.0 - p0 - p1)
            s1 = a - p1 * b0 - p0 * b1
            tot.append(s1 - c * self.n_z[z])
            sq.append(
                a + p1 * p1 * b0 + p0 * p0 * b1 - 2 * p1 * m12 - 2 * p0 * m13 + 2 * p0 * p1 * m23
                - 2 * c * s1 + c * c * self.n_z[z]
            )
        return np.stack(np.broadcast_arrays(*tot), -1), np.stack(np.broadcast_arrays(*sq), -1)

    def eq_moments(self, y0, y1, p0, p1):
        """Mean and sd of the two equality contributions, shape ``(..., 2)``."""
        y0, y1 = np.broadcast_arrays(np.asarray(y0, dtype=float), np.asarray(y1, dtype=float))
        tot, sq = self._eq_terms(self.count, y0, y1, np.asarray(p0, dtype=float), np.asarray(p1, dtype=float))
        return _poly_moments(tot, sq, self.n)

    # inequalities

    def ineq_p0_moments(self, p0):
        """Mean and sd of the ``p0``-type inequalities, shape ``(..., 2 * n_bins)``."""
        x = self.cell_treated.ravel()
        w = self.cell_total.ravel()
        p = np.asarray(p0, dtype=float)[..., None]
        return _poly_moments(x - p * w, x * (1 - p) ** 2 + (w - x) * p * p, self.n)

    def ineq_p1_moments(self, p1):
        x = (self.cell_total - self.cell_treated).ravel()
        w = self.cell_total.ravel()
        p = np.asarray(p1, dtype=float)[..., None]
        return _poly_moments(x - p * w, x * (1 - p) ** 2 + (w - x) * p * p, self.n)

    def moments(self, y0, y1, p0, p1):
        """Raw means and sds of all columns, shape ``(..., m)``."""
        em, es = self.eq_moments(y0, y1, p0, p1)
        shape = em.shape[:-1]
        am, as_ = (np.broadcast_to(a, shape + a.shape[-1:]) for a in self.ineq_p0_moments(p0))
        bm, bs = (np.broadcast_to(a, shape + a.shape[-1:]) for a in self.ineq_p1_moments(p1))
        return np.concatenate([em, am, bm], -1), np.concatenate([es, as_, bs], -1)

    def standardized(self, y0, y1, p0, p1):
        """``(sqrt(n) * mean / sigma, sigma / scale)`` for all columns."""
        mean, sd = self.moments(y0, y1, p0, p1)
        sig = apply_sigma_rule(sd * self.scale) / self.scale
        return math.sqrt(self.n) * mean / sig, sig

    def statistic(self, y0, y1, p0, p1):
        t, _ = self.standardized(y0, y1, p0, p1)
        return statistic_from_standardized(t, self.spec.is_equality)

    # per-observation view

    def contributions(self, y, d, z, y0, y1, p0, p1) -> np.ndarray:
        spec = self.spec
        tau = self.tau
        i0 = (y <= y0).astype(float)
        i1 = (y <= y1).astype(float)
        i_d = np.where(d == 1, i1, i0)
        bracket = i_d - tau - p1 * (i0 - tau) - p0 * (i1 - tau)
        cols = [bracket * (z == 0), bracket * (z == 1)]
        treated = (d == 1).astype(float)
        for kind, resp, p in (("p0", treated, p0), ("p1", 1.0 - treated, p1)):
            for zk in (0, 1):
                for j in range(spec.n_bins):
                    cols.append((resp - p) * ((self._bins == j) & (z == zk)))
        return np.column_stack(cols)


def statistic_from_standardized(t, is_equality) -> np.ndarray:
    """Sum of squared equalities plus squared negative parts of inequalities."""
    t = np.asarray(t, dtype=float)
    eq = np.where(is_equality, t, 0.0)
    ineq = np.where(is_equality, 0.0, np.minimum(t, 0.0))
    return np.sum(eq * eq, -1) + np.sum(ineq * ineq, -1)


def evaluate_moments(dataset: Dataset, spec: MomentSpec, point, system: MomentSystem | None = None) -> MomentEvaluation:
    """Per-observation contributions, means and scale estimates at ``point``."""
    if point.p0 < 0 or point.p1 < 0 or not point.p0 + point.p1 < 1:
        raise DomainError("point violates 0 <= p0, p1 and p0 + p1 < 1")
    system = system or MomentSystem(dataset, spec)
    contrib = system.contributions(dataset.y, dataset.d, dataset.z, point.y0, point.y1, point.p0, point.p1)
    mean, sd = system.moments(point.y0, point.y1, point.p0, point.p1)
    scale = system.scale
    return MomentEvaluation(
        contributions=contrib,
        means=mean * scale,
        sigmas=apply_sigma_rule(sd * scale),
        is_equality=spec.is_equality,
        scale=scale,
        labels=tuple(spec.labels()),
    )


def test_statistic(evaluation: MomentEvaluation, n: int | None = None) -> float:
    """``sum_eq (sqrt(n) m/s)^2 + sum_ineq min(sqrt(n) m/s, 0)^2``."""
    n = evaluation.n if n is None else n
    t = math.sqrt(n) * evaluation.means / evaluation.sigmas
    return float(statistic_from_standardized(t, evaluation.is_equality))


test_statistic.__test__ = False


class MultiplierSums:
    """Multiplier-weighted cumulative sums for fast bootstrap moments.

    For multipliers ``xi`` of shape ``(B, n)`` this gives, for any
    candidate point, ``sum_i xi[b, i] * g_ij`` for every column ``j``
    without forming the contribution matrix.
    """

    def __init__(self, system: MomentSystem, xi: np.ndarray):
        self.system = system
        self.B = xi.shape[0]
        self.cum = [[None, None], [None, None]]
        for z in (0, 1):
            for d in (0, 1):
                w = xi[:, system.order[z][d]]
                c = np.zeros((self.B, w.shape[1] + 1))
                np.cumsum(w, axis=1, out=c[:, 1:])
                self.cum[z][d] = c
        self.total = xi.sum(axis=1)
        self.z_total = np.stack([self.cum[z][0][:, -1] + self.cum[z][1][:, -1] for z in (0, 1)], -1)
        nb = system.spec.n_bins
        treated = np.zeros((self.B, 2, nb))
        allw = np.zeros((self.B, 2, nb))
        for z in (0, 1):
            for j in range(nb):
                cell = (system._z == z) & (system._bins == j)
                allw[:, z, j] = xi[:, cell].sum(axis=1)
                treated[:, z, j] = xi[:, cell & (system._d == 1)].sum(axis=1)
        self.cell_treated = treated.reshape(self.B, -1)
        self.cell_total = allw.reshape(self.B, -1)

    def _lookup(self, z, d, y, per_draw):
        """Weighted count of cell ``(z, d)`` at or below ``y``, leading axis ``B``."""
        idx = self.system.count(z, d, y)
        c = self.cum[z][d]
        if per_draw:
            flat = idx.reshape(self.B, -1)
            return np.take_along_axis(c, flat, axis=1).reshape(idx.shape)
        return c[:, idx]

    def eq_sums(self, y0, y1, p0, p1, per_draw: bool = False):
        """``sum_i xi_i g_i`` for the equality columns, shape ``(B, ..., 2)``.

        Without ``per_draw`` the arguments are shared by all draws and the
        result has shape ``(B, *broadcast_shape)``; with it, every argument
        already carries a leading axis of length ``B`` (or 1).
        """
        y0 = np.asarray(y0, dtype=float)
        y1 = np.asarray(y1, dtype=float)
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        y0, y1 = np.broadcast_arrays(y0, y1)
        p0, p1 = np.broadcast_arrays(p0, p1)
        if not per_draw:
            # numpy trailing alignment, then a leading draw axis
            k = max(y0.ndim, p0.ndim)
            y_shape = (1,) * (k - y0.ndim) + y0.shape
            p0 = p0.reshape((1,) * (k + 1 - p0.ndim) + p0.shape)
            p1 = p1.reshape(p0.shape)
            ndim = k + 1
        else:
            y_shape = y0.shape[1:]
            ndim = max(y0.ndim, p0.ndim)
        c = self.system.tau * (1.0 - p0 - p1)

        def look(z, d, y):
            v = self._lookup(z, d, y, per_draw)
            return v.reshape((self.B,) + y_shape) if not per_draw else v

        out = []
        for z in (0, 1):
            n00 = look(z, 0, y0)
            n01 = look(z, 1, y0)
            n10 = look(z, 0, y1)
            n11 = look(z, 1, y1)
            zt = self.z_total[:, z].reshape((self.B,) + (1,) * (ndim - 1))
            out.append((n00 + n11) - p1 * (n00 + n01) - p0 * (n10 + n11) - c * zt)
        return np.stack(np.broadcast_arrays(*out), -1)

    def ineq_p0_sums(self, p0, per_draw: bool = False):
        """``p0``-type columns, shape ``(B, ..., 2 * n_bins)``."""
        return self._ineq_sums(self.cell_treated, p0, per_draw)

    def ineq_p1_sums(self, p1, per_draw: bool = False):
        return self._ineq_sums(self.cell_total - self.cell_treated, p1, per_draw)

    def _ineq_sums(self, resp, p, per_draw):
        p = np.asarray(p, dtype=float)[..., None]
        lead = p.ndim - 1 if not per_draw else p.ndim - 2
        shape = (self.B,) + (1,) * lead + (resp.shape[1],)
        x = resp.reshape(shape)
        w = self.cell_total.reshape(shape)
        if not per_draw:
            p = p[None]
        return x - p * w
