"""Shared fixtures and independent oracles."""

import numpy as np
import pytest
from scipy.special import owens_t
from scipy.stats import norm

from misivqr.dgp import QuantileFamily, StructuralModel, sample_dataset
from misivqr.montecarlo import DESIGNS


def bvn_owen(h, k, rho):
    """Bivariate normal CDF via Owen's T function (closed form, no quadrature)."""
    h, k = float(h), float(k)
    s = np.sqrt(1 - rho * rho)
    if h == 0 and k == 0:
        return 0.25 + np.arcsin(rho) / (2 * np.pi)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ah = (k - rho * h) / (h * s) if h != 0 else np.inf * np.sign(k - rho * h)
        ak = (h - rho * k) / (k * s) if k != 0 else np.inf * np.sign(h - rho * k)
    val = 0.5 * norm.cdf(h) + 0.5 * norm.cdf(k) - owens_t(h, ah) - owens_t(k, ak)
    sh, sk = np.sign(h), np.sign(k)
    if sh * sk < 0 or (sh * sk == 0 and h + k < 0):
        val -= 0.5
    return float(val)


def make_model(family="sqrt_linear", rho=0.0, gamma=0.25, p0=0.25, p1=0.25):
    fam = getattr(QuantileFamily, family)()
    return StructuralModel(fam, rho, gamma, (0.0, 1.0), (0.5, 0.5), p0, p1)


@pytest.fixture(params=[1, 2, 3], ids=["design1", "design2", "design3"])
def design(request):
    return DESIGNS[request.param]


@pytest.fixture(scope="session")
def design_models():
    return {k: d.model() for k, d in DESIGNS.items()}


@pytest.fixture(scope="session")
def square_model():
    return make_model("square", rho=0.0, gamma=0.25)


@pytest.fixture(scope="session")
def small_data(design_models):
    """Design 2, n = 1000, fixed seed."""
    return sample_dataset(design_models[2], 1000, 7)


def _bvn_vec(h, k, rho):
    h = np.asarray(h, dtype=float)
    s = np.sqrt(1 - rho * rho)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ah = (k - rho * h) / (h * s)
        ak = (h - rho * k) / (k * s)
    val = 0.5 * norm.cdf(h) + 0.5 * norm.cdf(k) - owens_t(h, ah) - owens_t(k, ak)
    adj = (np.sign(h) * np.sign(k) < 0) | ((np.sign(h) * np.sign(k) == 0) & (h + k < 0))
    return val - 0.5 * adj


def oracle_sqrt_linear(rho, gamma, p0=0.25, p1=0.25, tau=0.5, step=0.005, n_caps=401):
    """Independent identified-interval computation for the square-root/linear family.

    Uses Owen's T for the copula, closed-form densities for the caps and a
    dense Cramer's-rule solve. Returns ``(caps, (lo, hi))``.
    """
    pis = [0.5 - gamma, 0.5 + gamma]

    def copula(u, pi):
        if pi <= 0:
            return np.zeros_like(u)
        if pi >= 1:
            return u.copy()
        if rho == 0:
            return u * pi
        inner = (u > 0) & (u < 1)
        val = _bvn_vec(norm.ppf(np.clip(u, 1e-300, 1 - 1e-16)), norm.ppf(pi), rho)
        return np.where(inner, val, np.where(u >= 1, pi, 0.0))

    def copula_du(u, pi):
        if pi <= 0:
            return np.zeros_like(u)
        if pi >= 1:
            return np.ones_like(u)
        if rho == 0:
            return np.full_like(u, pi)
        return norm.cdf((norm.ppf(pi) - rho * norm.ppf(u)) / np.sqrt(1 - rho * rho))

    ys = np.round(np.arange(0, 1 + 1e-12, step), 12)
    F, F0, F1 = [], [], []
    for pi in pis:
        g1 = copula(ys**2, pi)
        g0 = ys - copula(ys, pi)
        F.append(g0 + g1)
        F0.append((1 - p0) * g0 + p1 * g1)
        F1.append(p0 * g0 + (1 - p1) * g1)
    yg = np.clip(np.linspace(0, 1, n_caps), 1e-9, 1 - 1e-9)
    cap0 = cap1 = 1.0
    for pi in pis:
        f1 = copula_du(yg**2, pi) * 2 * yg
        f0 = 1 - copula_du(yg, pi)
        tot = f0 + f1
        ok = tot > 0
        cap0 = min(cap0, ((p0 * f0 + (1 - p1) * f1)[ok] / tot[ok]).min())
        cap1 = min(cap1, (((1 - p0) * f0 + p1 * f1)[ok] / tot[ok]).min())
    i0, i1 = np.meshgrid(np.arange(ys.size), np.arange(ys.size), indexing="ij")
    a11, a12 = F[0][i0] - tau, F[0][i1] - tau
    a21, a22 = F[1][i0] - tau, F[1][i1] - tau
    b1, b2 = F0[0][i0] + F1[0][i1] - tau, F0[1][i0] + F1[1][i1] - tau
    det = a11 * a22 - a12 * a21
    with np.errstate(divide="ignore", invalid="ignore"):
        q1 = (b1 * a22 - a12 * b2) / det
        q0 = (a11 * b2 - a21 * b1) / det
    tol = 1e-9
    with np.errstate(invalid="ignore"):
        ok = (np.abs(det) > 1e-12) & (q0 >= -tol) & (q1 >= -tol) & (q0 <= cap0 + tol) & (q1 <= cap1 + tol) & (q0 + q1 < 1)
    theta = ys[i1] - ys[i0]
    return (cap0, cap1), (float(np.round(theta[ok].min(), 12)), float(np.round(theta[ok].max(), 12)))
