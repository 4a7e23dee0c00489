"""Simulation designs, population summaries and coverage experiments."""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng
from .bounds import attenuation_kappa
from .dgp import QuantileFamily, StructuralModel, population_joint, sample_dataset
from .errors import DomainError
from .identify import identified_set
from .inference import InferenceConfig, test_thetas
from .moments import build_moment_spec

FULL_SCALE_REPS = 2000


@dataclass(frozen=True)
class Design:
    """One of the three simulation designs.

    All share ``p0 = p1 = 0.25``, ``tau = 0.5``, a balanced binary
    instrument and the square-root / linear structural quantiles.
    """

    id: int
    rho: float
    gamma: float
    p0: float = 0.25
    p1: float = 0.25
    tau: float = 0.5

    def model(self) -> StructuralModel:
        return StructuralModel(QuantileFamily.sqrt_linear(), self.rho, self.gamma, (0.0, 1.0), (0.5, 0.5),
                               self.p0, self.p1)

    @property
    def theta(self) -> float:
        """True structural effect ``sqrt(tau) - tau``."""
        fam = QuantileFamily.sqrt_linear()
        return float(fam.quantile(1, self.tau) - fam.quantile(0, self.tau))

    def to_dict(self) -> dict:
        return {"id": self.id, "rho": self.rho, "gamma": self.gamma, "p0": self.p0, "p1": self.p1, "tau": self.tau}


DESIGNS = {1: Design(1, 0.0, 0.5), 2: Design(2, 0.0, 0.25), 3: Design(3, 0.5, 0.25)}


def get_design(design) -> Design:
    if isinstance(design, Design):
        return design
    try:
        return DESIGNS[int(design)]
    except (KeyError, ValueError, TypeError):
        raise DomainError(f"unknown design {design!r}; choose from {sorted(DESIGNS)}") from None


@dataclass(frozen=True)
class Table1Row:
    design: int
    delta_q: float
    delta_rf: float
    set_lo: float | None
    set_hi: float | None

    def to_dict(self) -> dict:
        return {"design": self.design, "delta_q": self.delta_q, "delta_rf": self.delta_rf,
                "identified_set": None if self.set_lo is None else [self.set_lo, self.set_hi]}


def population_summary(model: StructuralModel, tau: float, grid_step: float = 0.005) -> dict:
    """Structural effect, reduced-form effect, ``kappa`` and identified interval."""
    rep = attenuation_kappa(model, tau)
    ident = identified_set(population_joint(model), tau, grid_step=grid_step)
    return {**rep.to_dict(), "identified_set": None if ident.empty else list(ident.theta_interval),
            "caps": list(ident.caps), "grid_step": grid_step}


def reproduce_table1(designs=(1, 2, 3), grid_step: float = 0.005) -> list[Table1Row]:
    rows = []
    for d in designs:
        des = get_design(d)
        s = population_summary(des.model(), des.tau, grid_step)
        lo, hi = s["identified_set"] if s["identified_set"] else (None, None)
        rows.append(Table1Row(des.id, s["delta_q"], s["delta_rf"], lo, hi))
    return rows


@dataclass(frozen=True)
class CoverageCurve:
    """Acceptance frequency of the confidence procedure at each ``theta``."""

    thetas: np.ndarray
    accept_counts: np.ndarray
    reps: int
    n: int
    alpha: float
    design: int
    fingerprint: str
    config: dict

    @property
    def coverage(self) -> np.ndarray:
        return self.accept_counts / self.reps

    def at(self, theta: float) -> float:
        i = int(np.argmin(np.abs(self.thetas - theta)))
        if abs(self.thetas[i] - theta) > 1e-9:
            raise DomainError(f"theta={theta} is not on the curve's grid")
        return float(self.coverage[i])

    def to_dict(self) -> dict:
        return {"thetas": self.thetas.tolist(), "coverage": self.coverage.tolist(),
                "accept_counts": self.accept_counts.tolist(), "reps": self.reps, "n": self.n,
                "alpha": self.alpha, "design": self.design, "fingerprint": self.fingerprint, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["theta", "coverage", "reps", "n", "alpha", "design", "fingerprint"])
            for th, c in zip(self.thetas, self.coverage):
                w.writerow([repr(float(th)), repr(float(c)), self.reps, self.n, repr(self.alpha), self.design,
                            self.fingerprint])


def _one_replication(args) -> np.ndarray:
    design, n, thetas, config, seed, r = args
    data = sample_dataset(design.model(), n, rng.derive_seed(seed, rng.REPLICATION, r, rng.DATA))
    cfg = config.replace(seed=rng.derive_seed(seed, rng.REPLICATION, r, rng.BOOTSTRAP))
    spec = build_moment_spec(data, design.tau, cfg.n_bins)
    return np.array([not res.reject for res in test_thetas(data, spec, thetas, cfg)], dtype=np.int64)


def run_coverage(design, n: int, reps: int, theta_grid=None, config: InferenceConfig | None = None,
                 seed: int = 0, workers: int = 1) -> CoverageCurve:
    """Simulate ``reps`` datasets and record acceptance at each ``theta``.

    ``theta_grid`` is an explicit sequence of values or ``None`` for
    ``config.thetas()``. Replication ``r`` draws its data and bootstrap
    multipliers from streams addressed by ``(seed, r)``, and acceptances
    are tallied as integers, so the curve does not depend on ``workers``.
    """
    design = get_design(design)
    if reps < 1:
        raise DomainError(f"reps must be >= 1, got {reps}")
    if n < 2:
        raise DomainError(f"n must be >= 2, got {n}")
    config = config or InferenceConfig()
    thetas = config.thetas() if theta_grid is None else np.asarray(theta_grid, dtype=float)
    if reps >= FULL_SCALE_REPS:
        warnings.warn(f"{reps} replications with B={config.n_bootstrap} may take many hours", stacklevel=2)
    tasks = [(design, n, thetas, config, seed, r) for r in range(reps)]
    counts = np.zeros(thetas.size, dtype=np.int64)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for acc in ex.map(_one_replication, tasks, chunksize=max(1, reps // (4 * workers))):
                counts += acc
    else:
        for t in tasks:
            counts += _one_replication(t)
    meta = {"design": design.to_dict(), "n": n, "reps": reps, "seed": seed, "thetas": thetas.tolist(),
            "inference": config.to_dict()}
    fp = hashlib.sha256(json.dumps(meta, sort_keys=True).encode()).hexdigest()
    return CoverageCurve(thetas, counts, reps, n, config.alpha, design.id, fp, meta)
