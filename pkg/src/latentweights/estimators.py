"""Point estimators of a population total.

All estimators take probabilities as explicit arrays so the same code
serves fitted and true response probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SurveySample


@dataclass(frozen=True)
class WeightSet:
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray


def build_weights(pi, p, q) -> WeightSet:
    """Design, unit-adjusted and fully adjusted weights 1/pi, 1/(pi p), 1/(pi p q).

    ``q`` may be a vector (one item) or an (n, m) matrix.
    """
    pi = np.asarray(pi, dtype=float)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    for name, arr in (("pi", pi), ("p", p), ("q", q)):
        if np.any(~np.isfinite(arr)) or np.any(arr <= 0) or np.any(arr > 1):
            raise ValueError(f"{name} must lie in (0, 1]")
    w1 = 1.0 / pi
    w2 = w1 / p
    w3 = (w2[:, None] / q) if q.ndim == 2 else w2 / q
    return WeightSet(w1, w2, w3)


def _item(sample: SurveySample, j: int):
    y = sample.y[:, j]
    observed = ~np.isnan(y) & sample.unit_respondent
    return y, observed


def ht_estimator(sample: SurveySample, j: int) -> float:
    """Horvitz-Thompson total of item j; needs full response on that item."""
    y, observed = _item(sample, j)
    if not observed.all():
        raise ValueError(f"item {j} is not fully observed; HT total undefined")
    return float(np.sum(y / sample.pi))


def naive_estimator(sample: SurveySample, j: int) -> float:
    """N times the design-weighted respondent mean of item j."""
    y, observed = _item(sample, j)
    if not observed.any():
        raise ValueError(f"no respondents for item {j}")
    w = 1.0 / sample.pi[observed]
    return float(sample.N * np.sum(w * y[observed]) / np.sum(w))


def three_phase_estimator(sample: SurveySample, j: int, p, q) -> float:
    """Sum over item respondents of y / (pi p q).

    ``p`` is per unit; ``q`` is per unit for item j, or an (n, m) matrix.
    Entries for units outside the item's respondent set are ignored.
    """
    y, observed = _item(sample, j)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if q.ndim == 2:
        q = q[:, j]
    pk, qk = p[observed], q[observed]
    if np.any(pk <= 0) or np.any(qk <= 0):
        raise ValueError("response probabilities must be positive on item respondents")
    return float(np.sum(y[observed] / (sample.pi[observed] * pk * qk)))
