"""Jackknife replicate variance for the three-phase estimator.

Replicate weights come from deleting one sampled unit at a time and
re-running two generalized calibrations with the logistic adjustment
F(theta; a, b) = 1 + exp(-(a + b * theta)):

1. phase-two weights w1^(l) F(theta; alpha^(l)) are calibrated so the
   respondents reproduce the replicate first-phase total of
   z1 = pi p (1, theta);
2. phase-three weights w2^(l) F(theta; beta^(l)) are calibrated so the item
   respondents reproduce the replicate second-phase total of
   z2 = pi p q (1, theta).

Latent scores are held fixed across replicates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog
from scipy.stats import norm

from .data import SurveySample

log = logging.getLogger(__name__)

CALIB_TOL = 1e-8
CALIB_MAX_ITER = 200
MAX_FAILED_SHARE = 0.05


class CalibrationError(RuntimeError):
    pass


class JackknifeError(RuntimeError):
    pass


def logistic_distance(theta, coef) -> np.ndarray:
    """F(theta; a, b) = 1 + exp(-(a + b theta))."""
    return 1.0 + np.exp(-(coef[0] + coef[1] * np.asarray(theta)))


@dataclass(frozen=True)
class CalibrationSpec:
    """Calibrate ``base * F(theta; coef)`` so that sum(w * z) hits ``target``."""

    base_weights: np.ndarray
    z: np.ndarray
    theta: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        base = np.asarray(self.base_weights, dtype=float)
        z = np.asarray(self.z, dtype=float).reshape(base.size, -1)
        theta = np.asarray(self.theta, dtype=float)
        target = np.asarray(self.target, dtype=float)
        if np.any(base < 0):
            raise ValueError("base weights must be non-negative")
        if z.shape[1] != target.size or theta.shape != base.shape:
            raise ValueError("z, theta and target dimensions disagree")
        for name, val in (("base_weights", base), ("z", z), ("theta", theta), ("target", target)):
            object.__setattr__(self, name, val)


@dataclass(frozen=True)
class CalibrationResult:
    weights: np.ndarray
    coef: np.ndarray
    residual: float
    iterations: int


def _outside_cone(spec: CalibrationSpec) -> bool:
    """True when the target needs a non-positive adjustment somewhere.

    F - 1 > 0, so the calibrated total exceeds the base total by a
    positive combination of the z_k; a target outside that cone has no root.
    """
    gap = spec.target - spec.base_weights @ spec.z
    res = linprog(np.zeros(spec.z.shape[0]), A_eq=spec.z.T, b_eq=gap,
                  bounds=[(0, None)] * spec.z.shape[0], method="highs")
    return res.status == 2


def _fail(spec, msg):
    if _outside_cone(spec):
        msg += "; target is unreachable with positive adjustments"
    return CalibrationError(msg)


def gencalib_solve(spec: CalibrationSpec, start=None, tol: float = CALIB_TOL,
                   max_iter: int = CALIB_MAX_ITER) -> CalibrationResult:
    """Newton solve of sum_k base_k F(theta_k; coef) z_k = target."""
    d, z, th, T = spec.base_weights, spec.z, spec.theta, spec.target
    X = np.column_stack([np.ones_like(th), th])
    coef = np.zeros(2) if start is None else np.array(start, dtype=float)

    def resid(c):
        # overflowing trial steps give a non-finite residual and are rejected
        with np.errstate(over="ignore", invalid="ignore"):
            return (d * logistic_distance(th, c)) @ z - T

    g = resid(coef)
    norm_g = np.linalg.norm(g)
    for it in range(1, max_iter + 1):
        if norm_g < tol:
            return CalibrationResult(d * logistic_distance(th, coef), coef, float(norm_g), it - 1)
        e = np.exp(-(X @ coef))
        J = -(z * (d * e)[:, None]).T @ X
        cond = np.linalg.cond(J)
        if not np.isfinite(cond) or cond > 1e14:
            raise _fail(spec, f"singular calibration Jacobian (condition number {cond:.3g})")
        step = -np.linalg.solve(J, g)
        t = 1.0
        while t > 1e-12:
            trial = coef + t * step
            g_trial = resid(trial)
            n_trial = np.linalg.norm(g_trial)
            if np.isfinite(n_trial) and n_trial < norm_g:
                break
            t *= 0.5
        else:
            raise _fail(spec, f"calibration stalled at residual {norm_g:.3g}")
        coef, g, norm_g = trial, g_trial, n_trial
    if norm_g < tol:
        return CalibrationResult(d * logistic_distance(th, coef), coef, float(norm_g), max_iter)
    raise _fail(spec, f"calibration did not converge in {max_iter} iterations "
                      f"(residual {norm_g:.3g})")


@dataclass(frozen=True)
class ReplicateWeights:
    """Per-replicate phase-three weights on the item respondents.

    ``w3_center`` holds the weights the same two calibrations give with no
    unit deleted.
    """

    c: np.ndarray
    w3_rep: np.ndarray
    units: np.ndarray
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    failed: tuple = ()
    L_total: int = 0
    w3_center: Optional[np.ndarray] = None

    @property
    def L(self) -> int:
        return self.w3_rep.shape[0]


def _phase_degenerate(prob) -> bool:
    return bool(np.all(np.asarray(prob) == 1.0))


def jackknife_replicates(sample: SurveySample, theta, p, q, j: int,
                         alpha_start=None, beta_start=None) -> ReplicateWeights:
    """Delete-one jackknife weights for the three-phase total of item ``j``.

    ``theta`` and ``p`` are per sampled unit; ``q`` is per unit for item j
    or an (n, m) matrix. A phase whose probabilities are all exactly one
    has nothing to calibrate and passes its weights through.
    """
    theta = np.asarray(theta, dtype=float)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    q = q[:, j] if q.ndim == 2 else q
    n = sample.n
    pi = sample.pi
    r = np.asarray(sample.unit_respondent)
    rj = r & ~np.isnan(sample.y[:, j])
    if not rj.any():
        raise JackknifeError(f"no respondents for item {j}")

    w1 = 1.0 / pi
    unit_flat = _phase_degenerate(p[r])
    item_flat = _phase_degenerate(q[rj])
    z1 = (pi * p)[:, None] * np.column_stack([np.ones(n), theta])
    z2 = (pi * p * q)[:, None] * np.column_stack([np.ones(n), theta])

    def calibrate(w1l):
        if unit_flat:
            w2l, res1 = w1l[r], 0.0
        else:
            sol = gencalib_solve(
                CalibrationSpec(w1l[r], z1[r], theta[r], w1l @ z1), start=alpha_start)
            w2l, res1 = sol.weights, sol.residual
        w2_full = np.zeros(n)
        w2_full[r] = w2l
        if item_flat:
            return w2_full[rj], res1
        sol = gencalib_solve(
            CalibrationSpec(w2_full[rj], z2[rj], theta[rj], w2_full @ z2), start=beta_start)
        return sol.weights, max(res1, sol.residual)

    try:
        center, _ = calibrate(w1.copy())
    except CalibrationError as err:
        raise JackknifeError(f"full-sample calibration has no solution: {err}") from err

    reps, resids, failed = [], [], []
    for l in range(n):
        w1l = w1 * n / (n - 1)
        w1l[l] = 0.0
        try:
            w3l, res = calibrate(w1l)
        except CalibrationError as err:
            log.warning("replicate %d dropped: %s", l, err)
            failed.append(l)
            continue
        reps.append(w3l)
        resids.append(res)

    L_ok = len(reps)
    if len(failed) > MAX_FAILED_SHARE * n:
        raise JackknifeError(f"{len(failed)} of {n} replicate calibrations failed")
    c = np.full(L_ok, (n - 1) / n * (n / L_ok))
    w3_rep = np.array(reps).reshape(L_ok, int(rj.sum()))
    return ReplicateWeights(c=c, w3_rep=w3_rep, units=sample.unit_id[rj],
                            residuals=np.array(resids), failed=tuple(failed), L_total=n,
                            w3_center=center)


def replicate_variance(reps: ReplicateWeights, y, point_estimate: Optional[float] = None) -> float:
    """sum_l c_l (Y^(l) - Y)^2 with Y^(l) = sum_k w3_k^(l) y_k over item respondents.

    Without ``point_estimate`` the deviations are taken from the
    full-sample calibrated total, so that an offset between the calibrated
    and the model-based weights does not enter the variance.
    """
    y = np.asarray(y, dtype=float)
    if point_estimate is None:
        if reps.w3_center is None:
            raise ValueError("no point estimate given and no calibrated center stored")
        point_estimate = float(reps.w3_center @ y)
    est = reps.w3_rep @ y
    return float(np.sum(reps.c * (est - point_estimate) ** 2))


def confidence_interval(estimate: float, variance: float, level: float = 0.95):
    """Normal-theory interval estimate +/- z * sqrt(variance)."""
    if variance < 0:
        raise ValueError("variance must be non-negative")
    z = norm.ppf(0.5 + level / 2)
    half = z * np.sqrt(variance)
    return (estimate - half, estimate + half)
