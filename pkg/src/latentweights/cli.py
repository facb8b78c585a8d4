"""Command-line front end.

Every subcommand reads a survey CSV (or, for ``simulate``, builds a
population), runs one step of the pipeline and writes CSV/JSON results.
A JSON file passed with ``--config`` supplies defaults for any flag;
explicit flags win. Logs go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys

import numpy as np

from .data import ItemResponseMatrix, derive_indicators, load_survey_csv
from .diagnostics import (
    FIT_BAND, UNIDIM_EIGEN, UndefinedStatistic, cronbach_alpha, infit_outfit, margin_residuals,
    point_measure_correlation, residual_pca_first_eigenvalue,
)
from .estimators import build_weights, ht_estimator, naive_estimator, three_phase_estimator
from .latent import FitConfig, fit_latent
from .propensity import PropensityConfig, adjust_sample, augment_phantom
from .simulation import MonteCarloOptions, PopulationSpec, run_monte_carlo
from .variance import confidence_interval, jackknife_replicates, replicate_variance

log = logging.getLogger("latentweights")

NA = "NA"


# -- argument plumbing -------------------------------------------------------

def _add_input(p, need_pi=True):
    p.add_argument("--input", required=True, help="survey CSV")
    p.add_argument("--items", required=True,
                   help="comma-separated item columns, in order")
    p.add_argument("--id-column", default="unit_id")
    if need_pi:
        p.add_argument("--pi-column", default="pi")
        p.add_argument("--respondent-column", default=None)
        p.add_argument("--N", type=int, default=None, help="population size")


def _add_fit(p):
    p.add_argument("--model", choices=("2pl", "rasch"), default="2pl")
    p.add_argument("--quadrature-points", type=int, default=21)
    p.add_argument("--scoring", choices=("mode", "mean"), default="mode")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-iter", type=int, default=500)


def _add_propensity(p):
    p.add_argument("--p-min", type=float, default=0.01)
    p.add_argument("--q-min", type=float, default=0.01)
    p.add_argument("--remedy", choices=("jitter", "firth", "none"), default="jitter")
    p.add_argument("--jitter-sd", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)


def _add_out(p, help_text="output CSV (stdout when omitted)"):
    p.add_argument("--out", default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentweights",
                                     description="Latent-trait nonresponse adjustment.")
    parser.add_argument("--config", default=None, help="JSON file of flag defaults")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=int, default=1, help="worker processes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-2pl", help="fit the latent model and report item parameters")
    _add_input(p)
    _add_fit(p)
    p.add_argument("--indicators", action="store_true",
                   help="item columns already hold 0/1 response indicators")
    p.add_argument("--phantom", action="store_true", help="append the all-zero phantom row")
    _add_out(p, "JSON report (stdout when omitted)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="goodness-of-fit report")
    _add_input(p)
    _add_fit(p)
    p.add_argument("--indicators", action="store_true")
    p.add_argument("--phantom", action="store_true",
                   help="run on the phantom-augmented matrix instead of respondents only")
    _add_out(p, "CSV report; the text report always goes to stdout")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("weights", help="per-unit scores, propensities and weights")
    _add_input(p)
    _add_fit(p)
    _add_propensity(p)
    _add_out(p)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("estimate", help="HT, naive, three-phase and true-probability totals")
    _add_input(p)
    _add_fit(p)
    _add_propensity(p)
    p.add_argument("--p-true-column", default="p_true")
    p.add_argument("--q-true-prefix", default="q_true_")
    _add_out(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("variance", help="jackknife variance of the three-phase total")
    _add_input(p)
    _add_fit(p)
    _add_propensity(p)
    p.add_argument("--item", required=True, help="item column to total")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--replicates", default=None, help="CSV of replicate totals")
    _add_out(p)
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("simulate", help="Monte Carlo study")
    p.add_argument("--setting", choices=("abortion", "synthetic"), default="synthetic")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--M", type=int, default=1000)
    p.add_argument("--N", type=int, default=2000, help="synthetic population size")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--population-seed", type=int, default=None,
                   help="population seed (defaults to --seed)")
    p.add_argument("--coverage", action="store_true")
    p.add_argument("--data", default=None, help="abortion CSV")
    p.add_argument("--item-draw", choices=("raw", "rescaled"), default="raw")
    p.add_argument("--jitter-sd", type=float, default=1.0)
    _add_out(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return
    with open(known.config) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        parser.error("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    valid = {a.dest for a in parser._actions}
    for sp in subs.choices.values():
        valid |= {a.dest for a in sp._actions}
    unknown = sorted(set(cfg) - valid)
    if unknown:
        parser.error(f"unknown config keys: {unknown}")
    parser.set_defaults(**cfg)
    for sp in subs.choices.values():
        own = {a.dest for a in sp._actions}
        sp.set_defaults(**{k: v for k, v in cfg.items() if k in own})


def _fit_config(a) -> FitConfig:
    return FitConfig(quadrature_points=a.quadrature_points, tol=a.tol, max_iter=a.max_iter,
                     scoring=a.scoring, model=a.model)


def _prop_config(a) -> PropensityConfig:
    return PropensityConfig(remedy=a.remedy, jitter_sd=a.jitter_sd, p_min=a.p_min,
                            q_min=a.q_min, seed=a.seed)


def _items(a):
    items = [s.strip() for s in a.items.split(",") if s.strip()]
    if len(set(items)) != len(items):
        raise ValueError("duplicate item names")
    return items


def _load(a):
    return load_survey_csv(a.input, _items(a), N=a.N, id_column=a.id_column,
                           pi_column=a.pi_column, respondent_column=a.respondent_column)


def _matrix(a) -> ItemResponseMatrix:
    """Respondent indicator matrix, optionally with the phantom row."""
    sample = _load(a)
    if a.indicators:
        y = sample.y[sample.unit_respondent]
        if np.isnan(y).any() or not np.all((y == 0) | (y == 1)):
            raise ValueError("--indicators needs complete 0/1 item columns")
        mat = ItemResponseMatrix(y.astype(np.int8), sample.unit_id[sample.unit_respondent])
    else:
        mat = derive_indicators(sample).subset(sample.unit_respondent)
    return augment_phantom(mat) if a.phantom else mat


class _Output:
    """Context manager yielding a text stream for --out or stdout."""

    def __init__(self, path):
        self.path = path
        self.fh = None

    def __enter__(self):
        self.fh = open(self.path, "w", newline="") if self.path else sys.stdout
        return self.fh

    def __exit__(self, *exc):
        if self.path:
            self.fh.close()
        return False


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return NA
    return repr(float(v))


# -- subcommands -------------------------------------------------------------

def cmd_fit(a) -> int:
    mat = _matrix(a)
    fit = fit_latent(mat, _fit_config(a))
    try:
        alpha = cronbach_alpha(mat)
    except UndefinedStatistic as err:
        log.warning("Cronbach's alpha undefined: %s", err)
        alpha = None
    items = _items(a)
    report = {
        "model": fit.model,
        "n_rows": int(mat.x.shape[0]),
        "items": items,
        "beta0": fit.params.beta0.tolist(),
        "beta1": fit.params.beta1.tolist(),
        "loglik": fit.loglik,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "cronbach_alpha": alpha,
        "nonpositive_slopes": [items[i] for i in fit.params.nonpositive_slopes],
    }
    with _Output(a.out) as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return 0


def cmd_diagnose(a) -> int:
    mat = _matrix(a)
    fit = fit_latent(mat, _fit_config(a))
    items = _items(a)
    infit, outfit = infit_outfit(mat, fit)
    pm = point_measure_correlation(mat, fit.theta)
    cells = margin_residuals(mat, fit, 2) + margin_residuals(mat, fit, 3)
    eig = residual_pca_first_eigenvalue(mat, fit)
    try:
        alpha = cronbach_alpha(mat)
    except UndefinedStatistic:
        alpha = float("nan")
    lo, hi = FIT_BAND

    print(f"rows: {mat.x.shape[0]}  items: {mat.m}  converged: {fit.converged}")
    print(f"Cronbach alpha: {alpha:.3f}")
    print(f"residual PCA first eigenvalue: {eig:.3f} "
          f"({'unidimensional' if eig < UNIDIM_EIGEN else 'check dimensionality'})")
    print(f"{'item':<12}{'infit':>8}{'outfit':>8}{'pm_corr':>9}  flag")
    for l, name in enumerate(items):
        bad = not (lo <= infit[l] <= hi and lo <= outfit[l] <= hi) or not pm[l] > 0
        print(f"{name:<12}{infit[l]:8.3f}{outfit[l]:8.3f}{pm[l]:9.3f}  {'*' if bad else ''}")
    for order in (2, 3):
        rs = [c.R for c in cells if len(c.items) == order]
        if rs:
            print(f"{order}-way margin residuals: {min(rs):.3f} to {max(rs):.3f}")

    if a.out:
        with open(a.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "items", "pattern", "infit", "outfit", "point_measure_corr",
                        "observed", "expected", "R"])
            for l, name in enumerate(items):
                w.writerow(["item", name, "", _fmt(infit[l]), _fmt(outfit[l]), _fmt(pm[l]),
                            "", "", ""])
            for c in cells:
                w.writerow([f"margin{len(c.items)}", "|".join(items[i - 1] for i in c.items),
                            "".join(map(str, c.pattern)), "", "", "", c.observed,
                            _fmt(c.expected), _fmt(c.R)])
            w.writerow(["pca", "", "", "", "", "", "", "", _fmt(eig)])
    return 0


def _adjust(a, sample):
    rng = np.random.default_rng(a.seed)
    return adjust_sample(sample, _fit_config(a), _prop_config(a), rng=rng)


def cmd_weights(a) -> int:
    sample = _load(a)
    adj = _adjust(a, sample)
    ws = build_weights(sample.pi, adj.p_hat, adj.q_hat)
    m = sample.m
    with _Output(a.out) as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "theta_hat", "p_hat"] + [f"q_hat_{l + 1}" for l in range(m)]
                   + [f"w3_{l + 1}" for l in range(m)])
        for k in range(sample.n):
            w.writerow([int(sample.unit_id[k]), _fmt(adj.theta[k]), _fmt(adj.p_hat[k])]
                       + [_fmt(v) for v in adj.q_hat[k]] + [_fmt(v) for v in ws.w3[k]])
    return 0


def _true_probs(a, sample, items):
    """(p, q) from optional true-probability columns, else None."""
    with open(a.input, newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh))]
    q_cols = [a.q_true_prefix + it for it in items]
    if a.p_true_column in header and all(c in header for c in q_cols):
        tp = load_survey_csv(a.input, [a.p_true_column] + q_cols, N=sample.N,
                             id_column=a.id_column, pi_column=a.pi_column)
        if np.isnan(tp.y).any():
            raise ValueError("true-probability columns have missing values")
        return tp.y[:, 0], tp.y[:, 1:]
    observed = ~np.isnan(sample.y)
    if sample.unit_respondent.all() and observed.all():
        return np.ones(sample.n), np.ones((sample.n, sample.m))
    return None


def cmd_estimate(a) -> int:
    sample = _load(a)
    items = _items(a)
    adj = _adjust(a, sample)
    true = _true_probs(a, sample, items)
    with _Output(a.out) as fh:
        w = csv.writer(fh)
        w.writerow(["item", "HT", "naive", "pq", "pq_true"])
        for j, name in enumerate(items):
            try:
                ht = ht_estimator(sample, j)
            except ValueError:
                ht = None
            pq_true = None if true is None else three_phase_estimator(sample, j, *true)
            w.writerow([name, _fmt(ht), _fmt(naive_estimator(sample, j)),
                        _fmt(three_phase_estimator(sample, j, adj.p_hat, adj.q_hat)),
                        _fmt(pq_true)])
    return 0


def cmd_variance(a) -> int:
    sample = _load(a)
    items = _items(a)
    if a.item not in items:
        raise ValueError(f"--item {a.item!r} is not among --items")
    j = items.index(a.item)
    adj = _adjust(a, sample)
    est = three_phase_estimator(sample, j, adj.p_hat, adj.q_hat)
    beta = None
    if adj.stage1 is not None:
        prm = adj.stage1.fit.params
        beta = (prm.beta0[j], prm.beta1[j])
    alpha = None if adj.model is None else (adj.model.alpha0, adj.model.alpha1)
    reps = jackknife_replicates(sample, adj.theta, adj.p_hat, adj.q_hat, j, alpha, beta)
    rj = sample.unit_respondent & ~np.isnan(sample.y[:, j])
    y = sample.y[rj, j]
    v = replicate_variance(reps, y)
    lo, hi = confidence_interval(est, v, a.level)
    if reps.failed:
        log.warning("%d replicate calibrations failed and were dropped", len(reps.failed))
    with _Output(a.out) as fh:
        w = csv.writer(fh)
        w.writerow(["item", "estimate", "sqrt_var", "ci_low", "ci_high", "level",
                    "replicates", "failed"])
        w.writerow([a.item, _fmt(est), _fmt(math.sqrt(v)), _fmt(lo), _fmt(hi), a.level,
                    reps.L, len(reps.failed)])
    if a.replicates:
        deleted = [k for k in range(sample.n) if k not in set(reps.failed)]
        with open(a.replicates, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["deleted_unit_id", "c", "estimate"])
            for row, k in enumerate(deleted):
                w.writerow([int(sample.unit_id[k]), _fmt(reps.c[row]),
                            _fmt(reps.w3_rep[row] @ y)])
    return 0


def cmd_simulate(a) -> int:
    if a.setting == "abortion" and not a.data:
        raise ValueError("--setting abortion needs --data")
    pop_seed = a.seed if a.population_seed is None else a.population_seed
    spec = PopulationSpec(setting=a.setting, N=a.N, rho=a.rho, seed=pop_seed, data=a.data,
                          item_draw=a.item_draw)
    options = MonteCarloOptions(coverage=a.coverage, threads=a.threads,
                                propensity=PropensityConfig(jitter_sd=a.jitter_sd))
    res = run_monte_carlo(spec, a.n, a.M, a.seed, options)
    if res.failures:
        log.warning("%d replicates failed and were excluded", res.failures)
    if a.coverage:
        log.info("coverage %.3f over %d samples (%d jackknife failures)",
                 res.metrics["pq"].coverage or float("nan"),
                 res.M - res.jackknife_failures, res.jackknife_failures)
    if a.out:
        res.to_csv(a.out)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["estimator", "B", "RB", "sqrt_var", "MSE", "coverage"])
        for row in res.rows():
            w.writerow([row["estimator"]] + [_fmt(row[k]) if row[k] is not None else ""
                                             for k in ("B", "RB", "sqrt_var", "MSE", "coverage")])
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (OSError, json.JSONDecodeError) as err:
        print(f"latentweights: cannot read config: {err}", file=sys.stderr)
        return 2
    a = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.WARNING - 10 * min(a.verbose, 2))
    if a.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return a.func(a)
    except (ValueError, RuntimeError, ArithmeticError, OSError) as err:
        log.error("%s: %s", type(err).__name__, err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
