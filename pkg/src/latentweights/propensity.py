"""Unit and item response propensities from the latent score.

Stage I fits the latent model on the respondents plus one phantom unit that
answered nothing; every unit nonrespondent inherits the phantom's score.
Stage II regresses unit response on that score by maximum likelihood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit, log_expit

from .data import ItemResponseMatrix, SurveySample, derive_indicators
from .latent import FitConfig, LatentFit, TwoPLParams, fit_latent

log = logging.getLogger(__name__)

PHANTOM_ID = -1
_ONE_BELOW = np.nextafter(1.0, 0.0)


class SeparationError(RuntimeError):
    """Logistic MLE does not exist and the remedy did not restore it."""


@dataclass
class PropensityConfig:
    remedy: str = "jitter"
    jitter_sd: float = 1.0
    p_min: float = 0.01
    q_min: float = 0.01
    tol: float = 1e-8
    max_iter: int = 100
    design_weighted: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.remedy not in ("jitter", "firth", "none"):
            raise ValueError(f"unknown separation remedy {self.remedy!r}")


@dataclass(frozen=True)
class PropensityModel:
    alpha0: float
    alpha1: float
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fitted: np.ndarray = field(default_factory=lambda: np.zeros(0))
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    separation_handled: bool = False
    converged: bool = True
    iterations: int = 0
    p_min: float = 0.01

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([[self.alpha0, self.alpha1], self.gamma])


@dataclass(frozen=True)
class StageOne:
    theta: np.ndarray
    phantom_theta: float
    fit: LatentFit


def augment_phantom(matrix: ItemResponseMatrix) -> ItemResponseMatrix:
    """Append an all-zero row carrying the reserved phantom id."""
    if np.any(matrix.unit_id == PHANTOM_ID):
        raise ValueError("matrix already contains the phantom unit")
    x = np.vstack([matrix.x, np.zeros((1, matrix.m), dtype=matrix.x.dtype)])
    return ItemResponseMatrix(x, np.append(matrix.unit_id, PHANTOM_ID))


def estimate_thetas_stage1(sample: SurveySample, matrix: Optional[ItemResponseMatrix] = None,
                           config: Optional[FitConfig] = None) -> StageOne:
    """Latent score for every sampled unit via the phantom respondent."""
    matrix = matrix if matrix is not None else derive_indicators(sample)
    resp = np.asarray(sample.unit_respondent)
    if not resp.any():
        raise ValueError("no unit respondents; the latent model cannot be fitted")
    fit = fit_latent(augment_phantom(matrix.subset(resp)), config)
    phantom = float(fit.theta[-1])
    theta = np.full(sample.n, phantom)
    theta[resp] = fit.theta[:-1]
    return StageOne(theta=theta, phantom_theta=phantom, fit=fit)


def detect_separation(X: np.ndarray, y: np.ndarray) -> bool:
    """True when some direction separates the classes (complete or quasi-complete).

    Solves max sum_i s_i x_i'b subject to s_i x_i'b >= 0 and |b| <= 1,
    with s_i = +1/-1 for y_i = 1/0. A positive optimum means the MLE is
    not finite.
    """
    s = np.where(np.asarray(y) > 0, 1.0, -1.0)
    A = -(s[:, None] * X)
    res = linprog(A.sum(axis=0), A_ub=A, b_ub=np.zeros(len(s)),
                  bounds=[(-1, 1)] * X.shape[1], method="highs")
    if res.status != 0:
        return False
    scale = np.abs(X).sum()
    return -res.fun > 1e-9 * max(scale, 1.0)


def _loglik(beta, X, y, w):
    eta = X @ beta
    return float(w @ (y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def irls(X, y, w=None, tol=1e-8, max_iter=100, firth=False, beta0=None):
    """Weighted logistic MLE by Newton-Raphson / IRLS with step halving.

    With ``firth=True`` the Jeffreys-penalised likelihood is maximised
    instead, which stays finite under separation.
    Returns (beta, converged, iterations).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    beta = np.zeros(X.shape[1]) if beta0 is None else np.array(beta0, dtype=float)

    def objective(b):
        val = _loglik(b, X, y, w)
        if firth:
            p = expit(X @ b)
            info = X.T @ ((w * p * (1 - p))[:, None] * X)
            sign, logdet = np.linalg.slogdet(info)
            val += 0.5 * logdet if sign > 0 else -np.inf
        return val

    current = objective(beta)
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        v = w * p * (1 - p)
        info = X.T @ (v[:, None] * X)
        resid = w * (y - p)
        if firth:
            inv = np.linalg.pinv(info)
            h = v * np.einsum("ij,jk,ik->i", X, inv, X)
            resid = resid + h * (0.5 - p)
        grad = X.T @ resid
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-8:
            trial = objective(beta + t * step)
            if trial >= current - 1e-12:
                break
            t *= 0.5
        beta = beta + t * step
        current = trial
        if np.max(np.abs(t * step)) < tol:
            return beta, True, it
    return beta, False, max_iter


def _design(theta, covariates):
    cols = [np.ones_like(theta), theta]
    if covariates is not None:
        z = np.asarray(covariates, dtype=float)
        z = z.reshape(len(theta), -1)
        cols.extend(z.T)
    return np.column_stack(cols)


def fit_response_logistic(theta, R, covariates=None, config: Optional[PropensityConfig] = None,
                          design_weights=None, rng: Optional[np.random.Generator] = None
                          ) -> PropensityModel:
    """Logistic regression of unit response on the latent score.

    Separation is checked before fitting. The ``jitter`` remedy adds
    N(0, jitter_sd^2) noise to the nonrespondents' scores and retries with
    doubled noise until the classes overlap; ``firth`` maximises the
    penalised likelihood on the original scores.
    """
    config = config or PropensityConfig()
    theta = np.asarray(theta, dtype=float).copy()
    R = np.asarray(R).astype(bool)
    if R.all() or not R.any():
        raise ValueError("unit response must contain both respondents and nonrespondents")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    w = None
    if config.design_weighted:
        if design_weights is None:
            raise ValueError("design_weighted=True needs design weights")
        w = np.asarray(design_weights, dtype=float)

    X = _design(theta, covariates)
    handled = False
    firth = False
    if detect_separation(X, R):
        handled = True
        if config.remedy == "jitter":
            sd = config.jitter_sd
            base = theta.copy()
            for _ in range(30):
                theta = base.copy()
                theta[~R] += rng.normal(0.0, sd, size=int((~R).sum()))
                X = _design(theta, covariates)
                if not detect_separation(X, R):
                    break
                sd *= 2.0
            else:
                raise SeparationError("jitter did not remove separation")
            if sd != config.jitter_sd:
                log.info("jitter sd raised to %g to break separation", sd)
        elif config.remedy == "firth":
            firth = True
        else:
            raise SeparationError("response classes are separated by the latent score")

    beta, converged, iters = irls(X, R.astype(float), w, config.tol, config.max_iter, firth=firth)
    if not converged or not np.all(np.isfinite(beta)):
        log.warning("Stage II logistic fit did not converge")
    fitted = np.clip(expit(X @ beta), config.p_min, _ONE_BELOW)
    return PropensityModel(
        alpha0=float(beta[0]), alpha1=float(beta[1]), gamma=beta[2:],
        fitted=fitted, theta=theta, separation_handled=handled,
        converged=bool(converged), iterations=iters, p_min=config.p_min,
    )


def unit_response_prob(model: PropensityModel, theta, covariates=None, p_min=None):
    """Fitted unit response probability, floored at ``p_min``."""
    p_min = model.p_min if p_min is None else p_min
    theta = np.asarray(theta, dtype=float)
    u = model.alpha0 + model.alpha1 * theta
    if model.gamma.size:
        z = np.asarray(covariates, dtype=float).reshape(*theta.shape, -1)
        u = u + z @ model.gamma
    out = np.clip(expit(u), p_min, _ONE_BELOW)
    return float(out) if out.ndim == 0 else out


def item_probs_hat(params: TwoPLParams, theta, q_min: float = 0.01) -> np.ndarray:
    """Matrix of fitted item response probabilities, floored at ``q_min``."""
    theta = np.asarray(theta, dtype=float)
    q = expit(params.beta0[None, :] + params.beta1[None, :] * theta[:, None])
    return np.clip(q, q_min, _ONE_BELOW)


def item_response_prob_hat(fit: LatentFit, k: int, j: int, q_min: float = 0.01) -> float:
    """Fitted probability that the unit at row ``k`` of the fit answers item ``j``."""
    q = expit(fit.params.beta0[j] + fit.params.beta1[j] * fit.theta[k])
    return float(np.clip(q, q_min, _ONE_BELOW))


@dataclass(frozen=True)
class Adjustment:
    """Everything the estimators need from the two-stage procedure."""

    theta: np.ndarray
    p_hat: np.ndarray
    q_hat: np.ndarray
    stage1: Optional[StageOne]
    model: Optional[PropensityModel]


def adjust_sample(sample: SurveySample, fit_config: Optional[FitConfig] = None,
                  config: Optional[PropensityConfig] = None,
                  rng: Optional[np.random.Generator] = None, covariates=None) -> Adjustment:
    """Run Stage I and Stage II on a sample.

    Without unit nonrespondents the unit phase is degenerate and p_hat = 1.
    Without any item nonresponse among respondents the latent model carries
    no information; theta = 0 and q_hat = 1.
    """
    config = config or PropensityConfig()
    x = derive_indicators(sample)
    resp = np.asarray(sample.unit_respondent)
    if not resp.any():
        raise ValueError("no unit respondents")
    if np.all(x.x[resp] == 1):
        theta = np.zeros(sample.n)
        stage1 = None
        q_hat = np.ones((sample.n, sample.m))
    else:
        stage1 = estimate_thetas_stage1(sample, x, fit_config)
        theta = stage1.theta
        q_hat = item_probs_hat(stage1.fit.params, theta, config.q_min)
    if resp.all():
        return Adjustment(theta, np.ones(sample.n), q_hat, stage1, None)
    model = fit_response_logistic(theta, resp, covariates, config,
                                  design_weights=1.0 / sample.pi, rng=rng)
    return Adjustment(model.theta, model.fitted, q_hat, stage1, model)
