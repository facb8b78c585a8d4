"""Goodness-of-fit checks for a fitted latent trait model."""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import log_expit, logsumexp

from .data import ItemResponseMatrix
from .latent import LatentFit, QuadratureRule, gauss_hermite

log = logging.getLogger(__name__)

FIT_BAND = (0.5, 1.5)
UNIDIM_EIGEN = 2.0
_Q_CLAMP = 1e-10


class UndefinedStatistic(ValueError):
    pass


@dataclass(frozen=True)
class MarginCell:
    items: tuple
    pattern: tuple
    observed: int
    expected: float
    R: float


@dataclass(frozen=True)
class ItemFitReport:
    infit: np.ndarray
    outfit: np.ndarray
    point_measure_corr: np.ndarray
    margins: tuple = ()

    def flagged(self) -> np.ndarray:
        """Items with a mean-square outside the acceptance band or a non-positive correlation."""
        lo, hi = FIT_BAND
        bad = (self.infit < lo) | (self.infit > hi) | (self.outfit < lo) | (self.outfit > hi)
        bad |= ~(self.point_measure_corr > 0)
        return np.flatnonzero(bad)


def _x(matrix) -> np.ndarray:
    x = matrix.x if isinstance(matrix, ItemResponseMatrix) else np.asarray(matrix)
    return np.atleast_2d(x).astype(float)


def cronbach_alpha(matrix) -> float:
    x = _x(matrix)
    n, m = x.shape
    if m < 2 or n < 2:
        raise UndefinedStatistic("Cronbach's alpha needs at least 2 items and 2 rows")
    total_var = x.sum(axis=1).var(ddof=1)
    if total_var == 0:
        raise UndefinedStatistic("total score has zero variance")
    return float(m / (m - 1) * (1 - x.var(axis=0, ddof=1).sum() / total_var))


def margin_residuals(matrix, fit: LatentFit, order: int = 2, quad: QuadratureRule = None):
    """Observed vs expected counts for every cell of every order-way margin.

    Expected counts integrate the fitted pattern probability over the N(0, 1)
    prior. Returns a list of :class:`MarginCell` with R = (O - E)^2 / E.
    """
    if order not in (2, 3):
        raise ValueError("order must be 2 or 3")
    x = _x(matrix)
    n, m = x.shape
    if fit.params.m != m:
        raise ValueError("fit and matrix disagree on the number of items")
    quad = quad or fit.quad or gauss_hermite()
    eta = fit.params.beta0[:, None] + fit.params.beta1[:, None] * quad.nodes[None, :]
    lp = (log_expit(-eta), log_expit(eta))  # log P(x=0|node), log P(x=1|node)
    cells = []
    for items in itertools.combinations(range(m), order):
        for pattern in itertools.product((0, 1), repeat=order):
            logp = sum(lp[v][l] for l, v in zip(items, pattern))
            expected = n * float(np.exp(logsumexp(logp + quad.log_weights)))
            observed = int(np.all(x[:, items] == pattern, axis=1).sum())
            if expected < 1e-12:
                warnings.warn(f"expected count below 1e-12 for items {items} pattern {pattern}")
                continue
            cells.append(MarginCell(tuple(i + 1 for i in items), pattern, observed,
                                    expected, (observed - expected) ** 2 / expected))
    return cells


def _fitted_probs(x, fit: LatentFit) -> np.ndarray:
    theta = np.asarray(fit.theta, dtype=float)
    if theta.shape[0] != x.shape[0]:
        raise ValueError("fit scores do not align with the matrix rows")
    q = 1.0 / (1.0 + np.exp(-(fit.params.beta0[None, :] + fit.params.beta1[None, :] * theta[:, None])))
    if np.any((q < _Q_CLAMP) | (q > 1 - _Q_CLAMP)):
        warnings.warn("fitted probabilities at 0 or 1 clamped")
        q = np.clip(q, _Q_CLAMP, 1 - _Q_CLAMP)
    return q


def standardized_residuals(matrix, fit: LatentFit) -> np.ndarray:
    x = _x(matrix)
    q = _fitted_probs(x, fit)
    return (x - q) / np.sqrt(q * (1 - q))


def mean_squares(x, q):
    """Per-item (infit, outfit) from observations and fitted probabilities."""
    x = np.asarray(x, dtype=float)
    v = q * (1 - q)
    sq = (x - q) ** 2
    outfit = (sq / v).mean(axis=0)
    infit = sq.sum(axis=0) / v.sum(axis=0)
    return infit, outfit


def infit_outfit(matrix, fit: LatentFit):
    x = _x(matrix)
    return mean_squares(x, _fitted_probs(x, fit))


def point_measure_correlation(matrix, theta) -> np.ndarray:
    """Pearson correlation of each item column with the latent score.

    Constant columns give NaN (undefined) and are reported with a warning.
    """
    x = _x(matrix)
    theta = np.asarray(theta, dtype=float)
    out = np.full(x.shape[1], np.nan)
    tc = theta - theta.mean()
    for l in range(x.shape[1]):
        xc = x[:, l] - x[:, l].mean()
        denom = np.sqrt((xc @ xc) * (tc @ tc))
        if denom == 0:
            warnings.warn(f"item {l + 1} (or the score) is constant; correlation undefined")
            continue
        out[l] = np.clip((xc @ tc) / denom, -1.0, 1.0)
    for l in np.flatnonzero(~(out > 0)):
        log.info("item %d has non-positive point-measure correlation", l + 1)
    return out


def first_eigenvalue(residuals) -> float:
    """Largest eigenvalue of the column correlation matrix of ``residuals``."""
    z = np.asarray(residuals, dtype=float)
    if z.shape[0] < z.shape[1]:
        warnings.warn("fewer rows than items; residual correlation matrix is rank deficient")
    corr = np.corrcoef(z, rowvar=False)
    return float(np.linalg.eigvalsh(corr)[-1])


def residual_pca_first_eigenvalue(matrix, fit: LatentFit) -> float:
    return first_eigenvalue(standardized_residuals(matrix, fit))


def item_fit_report(matrix, fit: LatentFit, orders=(2, 3)) -> ItemFitReport:
    infit, outfit = infit_outfit(matrix, fit)
    margins = tuple(c for o in orders for c in margin_residuals(matrix, fit, o))
    return ItemFitReport(infit, outfit, point_measure_correlation(matrix, fit.theta), margins)
