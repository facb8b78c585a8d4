"""Finite-population Monte Carlo studies.

Two population generators are provided: one built on a real four-item
binary data set (setting ``abortion``) and one drawn from a multivariate
normal (setting ``synthetic``). Each replicate draws an SRSWOR sample,
Poisson unit response from p_k, Poisson item response from q_kl, runs the
latent adjustment and evaluates four estimators of the target item total.

Replicate ``i`` draws from its own Philox stream keyed on (seed, i), so
results do not depend on worker count or scheduling.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit

from .data import SchemaError, SurveySample
from .estimators import ht_estimator, naive_estimator, three_phase_estimator
from .data import ItemResponseMatrix
from .latent import FitConfig, fit_2pl_em
from .propensity import PropensityConfig, adjust_sample
from .variance import JackknifeError, confidence_interval, jackknife_replicates, replicate_variance

log = logging.getLogger(__name__)

ESTIMATORS = ("HT", "naive", "pq", "pq_true")
MAX_FAILED_SHARE = 0.02

ABORTION_INTERCEPTS = (1.0, 0.0, -0.5, 1.0)
ABORTION_SLOPE = 3.0
SYNTHETIC_INTERCEPTS = (1.0, 0.0, -0.5, 1.0, 0.0, -0.5)
SYNTHETIC_SLOPES = (1.0, 1.0, 1.0, 1.5, 1.5, 1.5)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the substream identified by ``key``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


@dataclass
class PopulationSpec:
    setting: str = "synthetic"
    N: int = 2000
    m: int = 6
    rho: float = 0.5
    a: tuple = SYNTHETIC_INTERCEPTS
    b: tuple = SYNTHETIC_SLOPES
    p_bounds: tuple = (0.1, 0.9)
    q_bounds: tuple = (0.1, 0.95)
    item_corr: float = 0.8
    seed: int = 0
    data: Optional[str] = None
    item_draw: str = "raw"

    def __post_init__(self):
        if self.setting not in ("abortion", "synthetic"):
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.N <= 0:
            raise ValueError("N must be positive")
        if self.item_draw not in ("raw", "rescaled"):
            raise ValueError(f"item_draw must be 'raw' or 'rescaled', not {self.item_draw!r}")
        if self.setting == "abortion" and self.data is None:
            raise ValueError("the abortion setting needs a data file")


@dataclass(frozen=True)
class Population:
    """Finite population with its true response probabilities.

    ``q_draw`` is what item response is drawn from when it differs from the
    ``q`` handed to the true-probability estimator.
    """

    y: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray
    target: int
    setting: str = ""
    q_draw: Optional[np.ndarray] = None

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def total(self) -> float:
        return float(self.y[:, self.target].sum())


def load_abortion_csv(path) -> np.ndarray:
    """Read the 379 x 4 binary attitude data.

    Accepts a header row; columns named ``""``, ``rownames``, ``id`` or
    ``unit_id`` are treated as labels and dropped.
    """
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header = [h.strip() for h in rows[0]]
    keep = [i for i, h in enumerate(header) if h.lower() not in ("", "rownames", "id", "unit_id")]
    if len(keep) != 4:
        raise SchemaError(f"{path}: expected 4 item columns, found {len(keep)}")
    y = np.array([[float(r[i]) for i in keep] for r in rows[1:] if r], dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise SchemaError(f"{path}: items must be coded 0/1")
    return y


def build_population_abortion(path, seed: int = 0, fit_config: Optional[FitConfig] = None,
                              target: int = 1) -> Population:
    """Setting 1: latent scores from a 2PL fit on the data themselves.

    p_k = logistic(0.7 + y_k2 + theta_k + 0.2 eps_k), eps_k ~ U(0, 1),
    q_kl = logistic(3 theta_k + a_l + y_kl).
    """
    y = load_abortion_csv(path)
    fit = fit_2pl_em(ItemResponseMatrix(y.astype(int)), fit_config)
    theta = fit.theta
    eps = stream(seed, 0).uniform(0.0, 1.0, size=y.shape[0])
    p = expit(0.7 + y[:, 1] + theta + 0.2 * eps)
    q = expit(ABORTION_SLOPE * theta[:, None] + np.asarray(ABORTION_INTERCEPTS) + y)
    return Population(y=y, theta=theta, p=p, q=q, target=target, setting="abortion")


def _rescale(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    vmin, vmax = v.min(axis=0), v.max(axis=0)
    return (v - vmin) / (vmax - vmin) * (hi - lo) + lo


def synthetic_correlation(m: int, item_corr: float, rho: float) -> np.ndarray:
    """Exchangeable item correlation; every item correlates ``rho`` with theta."""
    C = np.full((m + 1, m + 1), item_corr)
    C[:m, m] = C[m, :m] = rho
    np.fill_diagonal(C, 1.0)
    return C


def gen_population_synthetic(spec: PopulationSpec) -> Population:
    """Setting 2: multivariate normal items and score, rescaled probabilities."""
    m = spec.m
    C = synthetic_correlation(m, spec.item_corr, spec.rho)
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise ValueError(f"correlation matrix for rho={spec.rho} is not positive definite") from None
    rng = stream(spec.seed, 0)
    draws = rng.standard_normal((spec.N, m + 1)) @ L.T + 1.0
    y = draws[:, :m]
    theta = draws[:, m]
    theta = (theta - theta.mean()) / theta.std(ddof=1)
    p0 = expit(0.5 + y[:, 0] + theta)
    p = _rescale(p0, *spec.p_bounds)
    a = np.asarray(spec.a, dtype=float)[:m]
    b = np.asarray(spec.b, dtype=float)[:m]
    q0 = expit(b * theta[:, None] + a + y)
    q = _rescale(q0, *spec.q_bounds)
    q_draw = q0 if spec.item_draw == "raw" else None
    return Population(y=y, theta=theta, p=p, q=q, target=m - 1, setting="synthetic",
                      q_draw=q_draw)


def build_population(spec: PopulationSpec, fit_config: Optional[FitConfig] = None) -> Population:
    if spec.setting == "abortion":
        return build_population_abortion(spec.data, spec.seed, fit_config)
    return gen_population_synthetic(spec)


def srswor(N: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of a simple random sample without replacement."""
    if not 0 < n <= N:
        raise ValueError(f"sample size {n} not in 1..{N}")
    return np.sort(rng.choice(N, size=n, replace=False))


def poisson_response(probs, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(prob) draws, same shape as ``probs``."""
    probs = np.asarray(probs, dtype=float)
    return rng.random(probs.shape) < probs


@dataclass
class MonteCarloOptions:
    coverage: bool = False
    level: float = 0.95
    jackknife_center: str = "calibrated"
    threads: int = 1
    fit: FitConfig = field(default_factory=FitConfig)
    propensity: PropensityConfig = field(default_factory=PropensityConfig)


@dataclass(frozen=True)
class ReplicateOutcome:
    index: int
    estimates: Optional[dict] = None
    covered: Optional[bool] = None
    sqrt_vhat: Optional[float] = None
    item_nonresponse: Optional[np.ndarray] = None
    unit_response: Optional[float] = None
    error: Optional[str] = None
    jackknife_error: Optional[str] = None


def draw_sample(pop: Population, n: int, rng: np.random.Generator,
                p=None, q=None):
    """One SRSWOR sample with simulated unit and item response.

    Returns the observed sample and the sample indices in the population.
    """
    p = pop.p if p is None else p
    if q is None:
        q = pop.q if pop.q_draw is None else pop.q_draw
    idx = srswor(pop.N, n, rng)
    R = poisson_response(p[idx], rng)
    X = poisson_response(q[idx], rng) & R[:, None]
    y_obs = np.where(X, pop.y[idx], np.nan)
    sample = SurveySample(idx, np.full(n, n / pop.N), y_obs, R, pop.N)
    return sample, idx


def run_replicate(pop: Population, n: int, seed: int, i: int,
                  options: MonteCarloOptions, p=None, q=None) -> ReplicateOutcome:
    rng = stream(seed, 1, i)
    sample, idx = draw_sample(pop, n, rng, p, q)
    p = pop.p if p is None else p
    q = pop.q if q is None else q
    j = pop.target
    full = SurveySample(idx, sample.pi, pop.y[idx], np.ones(n, bool), pop.N)
    try:
        adj = adjust_sample(sample, options.fit, options.propensity, rng=rng)
        est = {
            "HT": ht_estimator(full, j),
            "naive": naive_estimator(sample, j),
            "pq": three_phase_estimator(sample, j, adj.p_hat, adj.q_hat),
            "pq_true": three_phase_estimator(sample, j, p[idx], q[idx]),
        }
        covered = sqrt_v = jk_error = None
        if options.coverage:
            try:
                covered, sqrt_v = _jackknife_coverage(sample, adj, j, est["pq"], pop.total,
                                                      options.level, options.jackknife_center)
            except JackknifeError as err:
                jk_error = str(err)
    except (ValueError, ArithmeticError, RuntimeError) as err:
        return ReplicateOutcome(i, error=f"{type(err).__name__}: {err}")
    R = sample.unit_respondent
    inr = 1.0 - (~np.isnan(sample.y[R])).mean(axis=0)
    return ReplicateOutcome(i, est, covered, sqrt_v, inr, float(R.mean()), jackknife_error=jk_error)


def _jackknife_coverage(sample, adj, j, estimate, total, level, center="calibrated"):
    beta = None
    if adj.stage1 is not None:
        prm = adj.stage1.fit.params
        beta = (prm.beta0[j], prm.beta1[j])
    alpha = None if adj.model is None else (adj.model.alpha0, adj.model.alpha1)
    reps = jackknife_replicates(sample, adj.theta, adj.p_hat, adj.q_hat, j,
                                alpha_start=alpha, beta_start=beta)
    rj = sample.unit_respondent & ~np.isnan(sample.y[:, j])
    v = replicate_variance(reps, sample.y[rj, j], None if center == "calibrated" else estimate)
    lo, hi = confidence_interval(estimate, v, level)
    return bool(lo <= total <= hi), math.sqrt(v)


@dataclass(frozen=True)
class EstimatorMetrics:
    B: float
    RB: float
    sqrt_var: float
    MSE: float
    coverage: Optional[float] = None


@dataclass(frozen=True)
class SimulationResult:
    metrics: dict
    M: int
    n: int
    seed: int
    total: float
    failures: int = 0
    jackknife_failures: int = 0
    mean_sqrt_vhat: Optional[float] = None
    item_nonresponse: Optional[np.ndarray] = None
    unit_response: Optional[float] = None
    estimates: Optional[np.ndarray] = field(default=None, repr=False)

    def rows(self):
        for name in ESTIMATORS:
            mt = self.metrics[name]
            yield {"estimator": name, "B": mt.B, "RB": mt.RB, "sqrt_var": mt.sqrt_var,
                   "MSE": mt.MSE, "coverage": mt.coverage}

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, ["estimator", "B", "RB", "sqrt_var", "MSE", "coverage"])
            w.writeheader()
            for row in self.rows():
                w.writerow({k: ("" if v is None else repr(float(v)) if k != "estimator" else v)
                            for k, v in row.items()})


def performance_metrics(estimates: np.ndarray, total: float) -> EstimatorMetrics:
    """Monte Carlo bias, relative bias, standard deviation and MSE."""
    est = np.asarray(estimates, dtype=float)
    B = float(math.fsum(est) / est.size - total)
    var = float(np.var(est, ddof=1)) if est.size > 1 else 0.0
    rb = B / total if total != 0 else math.nan
    return EstimatorMetrics(B=B, RB=rb, sqrt_var=math.sqrt(var), MSE=B * B + var)


def _run_chunk(args):
    pop, n, seed, indices, options, p, q = args
    return [run_replicate(pop, n, seed, i, options, p, q) for i in indices]


def run_monte_carlo(spec, n: int, M: int, seed: int,
                    options: Optional[MonteCarloOptions] = None,
                    population: Optional[Population] = None,
                    p=None, q=None) -> SimulationResult:
    """Run M replicates and aggregate the four estimators.

    ``p`` and ``q`` override the population's true probabilities for the
    response draws (used for degenerate-mechanism checks).
    """
    options = options or MonteCarloOptions()
    pop = population if population is not None else build_population(spec, options.fit)
    if options.threads > 1:
        chunks = np.array_split(np.arange(M), options.threads * 4)
        with ProcessPoolExecutor(options.threads) as ex:
            parts = ex.map(_run_chunk, [(pop, n, seed, c.tolist(), options, p, q)
                                        for c in chunks if c.size])
            outcomes = [o for part in parts for o in part]
    else:
        outcomes = [run_replicate(pop, n, seed, i, options, p, q) for i in range(M)]
    outcomes.sort(key=lambda o: o.index)

    ok = [o for o in outcomes if o.error is None]
    failures = M - len(ok)
    if failures:
        log.warning("%d of %d replicates failed; first: %s", failures, M,
                    next(o.error for o in outcomes if o.error))
    if failures > MAX_FAILED_SHARE * M:
        raise RuntimeError(f"{failures} of {M} replicates failed")

    est = np.array([[o.estimates[k] for k in ESTIMATORS] for o in ok])
    total = pop.total
    metrics = {}
    cov = None
    with_var = [o for o in ok if o.covered is not None]
    jk_failures = sum(o.jackknife_error is not None for o in ok)
    if jk_failures:
        log.warning("jackknife failed on %d of %d samples", jk_failures, len(ok))
    if options.coverage and with_var:
        cov = float(np.mean([o.covered for o in with_var]))
    for c, name in enumerate(ESTIMATORS):
        mt = performance_metrics(est[:, c], total)
        if name == "pq" and cov is not None:
            mt = EstimatorMetrics(mt.B, mt.RB, mt.sqrt_var, mt.MSE, cov)
        metrics[name] = mt
    return SimulationResult(
        metrics=metrics, M=len(ok), n=n, seed=seed, total=total, failures=failures,
        jackknife_failures=jk_failures,
        mean_sqrt_vhat=float(np.mean([o.sqrt_vhat for o in with_var])) if with_var else None,
        item_nonresponse=np.mean([o.item_nonresponse for o in ok], axis=0),
        unit_response=float(np.mean([o.unit_response for o in ok])),
        estimates=est,
    )
