"""Two-parameter logistic latent trait model.

Item parameters are fitted by marginal maximum likelihood with the
Bock-Aitkin EM algorithm: the N(0, 1) prior on the latent score is
discretised with Gauss-Hermite quadrature, the E-step spreads every
response pattern over the nodes, and the M-step solves one weighted
logistic regression per item on the node abscissae. Unit scores are
empirical Bayes posterior modes (or means).

The Rasch variant shares one slope across items and runs through the same
M-step with a different slope grouping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import minimize_scalar
from scipy.special import expit, log_expit, logsumexp

from .data import ItemResponseMatrix

log = logging.getLogger(__name__)


class DegenerateItemError(ValueError):
    """An item column is constant, so its intercept has no finite MLE."""


class NumericFailure(ArithmeticError):
    """A likelihood evaluation produced a non-finite value."""


def item_response_prob(beta0, beta1, theta):
    """P(x = 1 | theta) = 1 / (1 + exp(-(beta0 + beta1 * theta)))."""
    return expit(np.add(beta0, np.multiply(beta1, theta)))


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape or nodes.size < 2:
            raise ValueError("quadrature needs at least 2 nodes with matching weights")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)


def gauss_hermite(points: int = 21) -> QuadratureRule:
    """Gauss-Hermite rule for E[f(theta)], theta ~ N(0, 1); weights sum to 1."""
    x, w = hermegauss(points)
    w = w / np.sqrt(2 * np.pi)
    # Far-tail weights underflow for large G; they contribute nothing.
    keep = w > 1e-300
    return QuadratureRule(x[keep], w[keep] / w[keep].sum())


@dataclass(frozen=True)
class TwoPLParams:
    beta0: np.ndarray
    beta1: np.ndarray

    def __post_init__(self):
        b0 = np.atleast_1d(np.asarray(self.beta0, dtype=float))
        b1 = np.atleast_1d(np.asarray(self.beta1, dtype=float))
        if b0.shape != b1.shape:
            raise ValueError("beta0 and beta1 must have the same length")
        if not (np.all(np.isfinite(b0)) and np.all(np.isfinite(b1))):
            raise NumericFailure("item parameters are not finite")
        object.__setattr__(self, "beta0", b0)
        object.__setattr__(self, "beta1", b1)

    @property
    def m(self) -> int:
        return self.beta0.size

    @property
    def nonpositive_slopes(self) -> np.ndarray:
        """Indices of items whose slope is not strictly positive."""
        return np.flatnonzero(self.beta1 <= 0)


@dataclass
class FitConfig:
    quadrature_points: int = 21
    tol: float = 1e-5
    max_iter: int = 500
    scoring: str = "mode"
    model: str = "2pl"

    def __post_init__(self):
        if self.scoring not in ("mode", "mean"):
            raise ValueError(f"scoring must be 'mode' or 'mean', not {self.scoring!r}")
        if self.model not in ("2pl", "rasch"):
            raise ValueError(f"model must be '2pl' or 'rasch', not {self.model!r}")
        if self.quadrature_points < 2:
            raise ValueError("quadrature_points must be at least 2")

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fit settings: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LatentFit:
    params: TwoPLParams
    theta: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    model: str = "2pl"
    loglik_trace: tuple = ()
    quad: Optional[QuadratureRule] = field(default=None, repr=False)
    scoring: str = "mode"

    def score(self, pattern) -> float:
        quad = self.quad if self.quad is not None else gauss_hermite()
        return posterior_theta(self.params, pattern, quad, method=self.scoring)


def _pattern_loglik(params: TwoPLParams, patterns: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """log g(x_p | theta_g) for every pattern p and node g."""
    eta = params.beta0[:, None] + params.beta1[:, None] * nodes[None, :]  # (m, G)
    lp1 = log_expit(eta)
    lp0 = log_expit(-eta)
    x = patterns.astype(float)
    return x @ lp1 + (1.0 - x) @ lp0


def _unique_patterns(x: np.ndarray):
    patterns, inverse, counts = np.unique(x, axis=0, return_inverse=True, return_counts=True)
    return patterns, inverse.reshape(-1), counts.astype(float)


def _check_columns(x: np.ndarray, params: Optional[TwoPLParams] = None):
    if params is not None and x.shape[1] != params.m:
        raise ValueError(f"matrix has {x.shape[1]} items, params have {params.m}")


def marginal_loglik(params: TwoPLParams, matrix, quad: Optional[QuadratureRule] = None) -> float:
    """Sum over units of log of the integral of g(x_k | theta) against N(0, 1)."""
    quad = quad if quad is not None else gauss_hermite()
    x = matrix.x if isinstance(matrix, ItemResponseMatrix) else np.atleast_2d(matrix)
    _check_columns(x, params)
    patterns, inverse, counts = _unique_patterns(x)
    logf = logsumexp(_pattern_loglik(params, patterns, quad.nodes) + quad.log_weights, axis=1)
    if not np.all(np.isfinite(logf)):
        bad = int(np.flatnonzero(~np.isfinite(logf[inverse]))[0])
        raise NumericFailure(f"non-finite marginal likelihood for unit at row {bad}")
    return float(counts @ logf)


def item_score(b0: float, b1: float, nodes, n_g, r_g) -> np.ndarray:
    """Gradient of the expected complete-data loglik of one item.

    ``n_g`` is the expected number of units at each node and ``r_g`` the
    expected number of them answering the item.
    """
    resid = np.asarray(r_g) - np.asarray(n_g) * expit(b0 + b1 * np.asarray(nodes))
    return np.array([resid.sum(), resid @ nodes])


def item_expected_loglik(b0, b1, nodes, n_g, r_g) -> float:
    eta = b0 + b1 * np.asarray(nodes)
    return float(np.asarray(r_g) @ log_expit(eta) + (np.asarray(n_g) - r_g) @ log_expit(-eta))


def _m_step(b0, b1, slope_group, nodes, n_g, r_lg, max_newton=50):
    """Maximise the expected complete-data loglik over all item parameters.

    Damped Newton on the joint parameter vector [b0 (m), slopes (S)]; each
    accepted step increases the objective, which keeps EM monotone.
    """
    m = b0.size
    S = int(slope_group.max()) + 1
    onehot = np.zeros((m, S))
    onehot[np.arange(m), slope_group] = 1.0
    slopes = np.array([b1[slope_group == s].mean() for s in range(S)])

    def objective(b0_, slopes_):
        eta = b0_[:, None] + (onehot @ slopes_)[:, None] * nodes[None, :]
        return float(np.sum(r_lg * log_expit(eta) + (n_g[None, :] - r_lg) * log_expit(-eta)))

    current = objective(b0, slopes)
    for _ in range(max_newton):
        eta = b0[:, None] + (onehot @ slopes)[:, None] * nodes[None, :]
        prob = expit(eta)
        resid = r_lg - n_g[None, :] * prob  # (m, G)
        info = n_g[None, :] * prob * (1.0 - prob)
        g0 = resid.sum(axis=1)
        g1 = onehot.T @ (resid @ nodes)
        h00 = info.sum(axis=1)
        h01 = info @ nodes  # (m,)
        h11_item = info @ nodes**2
        H = np.zeros((m + S, m + S))
        H[np.arange(m), np.arange(m)] = h00
        H[:m, m:] = h01[:, None] * onehot
        H[m:, :m] = H[:m, m:].T
        H[m:, m:] = np.diag(onehot.T @ h11_item)
        grad = np.concatenate([g0, g1])
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(m + S), grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            nb0, ns = b0 + t * step[:m], slopes + t * step[m:]
            trial = objective(nb0, ns)
            if trial >= current:
                break
            t *= 0.5
        else:
            break
        b0, slopes = nb0, ns
        gain = trial - current
        current = trial
        if np.max(np.abs(t * step)) < 1e-10 or gain < 1e-13:
            break
    return b0, onehot @ slopes


def _starting_values(x: np.ndarray):
    p = x.mean(axis=0).clip(0.01, 0.99)
    return np.log(p / (1 - p)), np.ones(x.shape[1])


def _fit(matrix: ItemResponseMatrix, config: FitConfig, slope_group: np.ndarray) -> LatentFit:
    x = matrix.x if isinstance(matrix, ItemResponseMatrix) else np.atleast_2d(matrix)
    if x.shape[1] < 3:
        raise ValueError("at least 3 items are needed to identify the model")
    col = x.mean(axis=0)
    for l in np.flatnonzero((col == 0) | (col == 1)):
        raise DegenerateItemError(f"item {l + 1} is constant ({int(col[l])}); its intercept diverges")

    quad = gauss_hermite(config.quadrature_points)
    nodes, logw = quad.nodes, quad.log_weights
    patterns, inverse, counts = _unique_patterns(x)
    pf = patterns.astype(float)
    b0, b1 = _starting_values(x)
    params = TwoPLParams(b0, b1)
    trace = []
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        # E-step
        joint = _pattern_loglik(params, patterns, nodes) + logw
        logf = logsumexp(joint, axis=1)
        ll = float(counts @ logf)
        if not np.isfinite(ll):
            raise NumericFailure("marginal loglik became non-finite during EM")
        trace.append(ll)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) < config.tol:
            converged = True
            break
        post = np.exp(joint - logf[:, None]) * counts[:, None]  # (P, G)
        n_g = post.sum(axis=0)
        r_lg = pf.T @ post  # (m, G)
        # M-step
        b0, b1 = _m_step(params.beta0, params.beta1, slope_group, nodes, n_g, r_lg)
        params = TwoPLParams(b0, b1)
    else:
        ll = marginal_loglik(params, x, quad)
        trace.append(ll)
        converged = len(trace) > 1 and abs(trace[-1] - trace[-2]) < config.tol
    if not converged:
        log.warning("EM stopped after %d iterations without reaching tol=%g", it, config.tol)
    bad = params.nonpositive_slopes
    if bad.size:
        log.warning("items %s have non-positive slopes", (bad + 1).tolist())

    pattern_theta = score_patterns(params, patterns, quad, method=config.scoring)
    return LatentFit(
        params=params,
        theta=pattern_theta[inverse],
        loglik=trace[-1],
        iterations=it,
        converged=converged,
        model=config.model,
        loglik_trace=tuple(trace),
        quad=quad,
        scoring=config.scoring,
    )


def fit_2pl_em(matrix: ItemResponseMatrix, config: Optional[FitConfig] = None) -> LatentFit:
    """Fit the 2PL model by marginal ML (Bock-Aitkin EM) and score every row."""
    config = config or FitConfig()
    if config.model != "2pl":
        config = FitConfig(**{**config.__dict__, "model": "2pl"})
    return _fit(matrix, config, np.arange(matrix.x.shape[1]))


def fit_rasch(matrix: ItemResponseMatrix, config: Optional[FitConfig] = None) -> LatentFit:
    """Fit the model with one slope shared by all items."""
    config = config or FitConfig(model="rasch")
    if config.model != "rasch":
        config = FitConfig(**{**config.__dict__, "model": "rasch"})
    return _fit(matrix, config, np.zeros(matrix.x.shape[1], dtype=int))


def fit_latent(matrix: ItemResponseMatrix, config: Optional[FitConfig] = None) -> LatentFit:
    config = config or FitConfig()
    return fit_rasch(matrix, config) if config.model == "rasch" else fit_2pl_em(matrix, config)


def _log_posterior(theta, params: TwoPLParams, x):
    eta = params.beta0 + params.beta1 * theta
    return float(x @ log_expit(eta) + (1 - x) @ log_expit(-eta) - 0.5 * theta * theta)


def _mode_fallback(params: TwoPLParams, x) -> float:
    grid = np.linspace(-10, 10, 401)
    vals = [_log_posterior(t, params, x) for t in grid]
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(lambda t: -_log_posterior(t, params, x), bracket=(lo, grid[i], hi)
                          if 0 < i < grid.size - 1 else None, bounds=None, method="golden")
    return float(res.x)


def score_patterns(params: TwoPLParams, patterns, quad: Optional[QuadratureRule] = None,
                   method: str = "mode") -> np.ndarray:
    """Empirical Bayes theta for each row of ``patterns``."""
    x = np.atleast_2d(np.asarray(patterns, dtype=float))
    if method == "mean":
        quad = quad if quad is not None else gauss_hermite()
        joint = _pattern_loglik(params, x, quad.nodes) + quad.log_weights
        post = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
        return post @ quad.nodes
    if method != "mode":
        raise ValueError(f"unknown scoring method {method!r}")

    b0, b1 = params.beta0, params.beta1
    theta = np.zeros(x.shape[0])

    def logpost(t):
        eta = b0[None, :] + b1[None, :] * t[:, None]
        return np.sum(x * log_expit(eta) + (1 - x) * log_expit(-eta), axis=1) - 0.5 * t * t

    # The log-posterior is strictly concave: its second derivative is
    # -sum(b1^2 q (1 - q)) - 1 whatever the slope signs.
    done = np.zeros(x.shape[0], dtype=bool)
    current = logpost(theta)
    for _ in range(100):
        q = expit(b0[None, :] + b1[None, :] * theta[:, None])
        grad = (x - q) @ b1 - theta
        hess = -(q * (1 - q)) @ b1**2 - 1.0
        step = np.where(done, 0.0, -grad / hess)
        t = np.ones_like(theta)
        trial_theta = theta + step
        trial = logpost(trial_theta)
        for _ in range(40):
            worse = trial < current - 1e-14
            if not worse.any():
                break
            t = np.where(worse, t * 0.5, t)
            trial_theta = np.where(worse, theta + t * step, trial_theta)
            trial = np.where(worse, logpost(trial_theta), trial)
        theta, current = trial_theta, trial
        done |= np.abs(t * step) < 1e-12
        if done.all():
            break
    bad = ~done | ~np.isfinite(theta)
    for p in np.flatnonzero(bad):
        theta[p] = _mode_fallback(params, x[p])
    return theta


def posterior_theta(params: TwoPLParams, pattern, quad: Optional[QuadratureRule] = None,
                    method: str = "mode") -> float:
    """Empirical Bayes score of a single response pattern."""
    pattern = np.asarray(pattern, dtype=float).reshape(1, -1)
    if pattern.shape[1] != params.m:
        raise ValueError("pattern length differs from the number of items")
    return float(score_patterns(params, pattern, quad, method)[0])
