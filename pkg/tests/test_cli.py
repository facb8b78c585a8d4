import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from latentweights.cli import main
from latentweights.simulation import PopulationSpec, build_population, draw_sample, stream

ITEMS = "y1,y2,y3,y4,y5,y6"


@pytest.fixture(scope="module")
def survey(tmp_path_factory):
    pop = build_population(PopulationSpec(seed=1))
    s, idx = draw_sample(pop, 200, stream(3, 1))
    path = tmp_path_factory.mktemp("cli") / "survey.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit_id", "pi"] + ITEMS.split(","))
        for k in range(s.n):
            w.writerow([s.unit_id[k], s.pi[k]] + ["" if np.isnan(v) else v for v in s.y[k]])
    return path


def read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_fit_report(survey, tmp_path, capsys):
    out = tmp_path / "fit.json"
    assert main(["fit-2pl", "--input", str(survey), "--items", ITEMS, "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert len(rep["beta0"]) == 6 and rep["converged"]
    assert 0 < rep["cronbach_alpha"] < 1


def test_diagnose_text_and_csv(survey, tmp_path, capsys):
    out = tmp_path / "diag.csv"
    assert main(["diagnose", "--input", str(survey), "--items", ITEMS, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "Cronbach alpha" in text and "first eigenvalue" in text
    rows = read(out)
    assert sum(r["kind"] == "item" for r in rows) == 6
    assert sum(r["kind"] == "margin2" for r in rows) == 60


def test_weights_columns(survey, tmp_path):
    out = tmp_path / "w.csv"
    assert main(["weights", "--input", str(survey), "--items", ITEMS, "--out", str(out)]) == 0
    rows = read(out)
    assert len(rows) == 200
    assert list(rows[0])[:3] == ["unit_id", "theta_hat", "p_hat"]
    assert "q_hat_6" in rows[0] and "w3_6" in rows[0]


def test_estimate_na_without_truth(survey, tmp_path):
    out = tmp_path / "e.csv"
    assert main(["estimate", "--input", str(survey), "--items", ITEMS, "--out", str(out)]) == 0
    rows = read(out)
    assert [r["item"] for r in rows] == ITEMS.split(",")
    assert all(r["HT"] == "NA" and r["pq_true"] == "NA" for r in rows)
    assert all(float(r["pq"]) > 0 for r in rows)


def test_estimate_full_response_all_equal(tmp_path):
    path = tmp_path / "full.csv"
    rng = np.random.default_rng(0)
    rows = ["unit_id,a,b,c"] + [f"{k},{','.join(map(str, rng.normal(size=3).round(3)))}"
                                for k in range(25)]
    path.write_text("\n".join(rows) + "\n")
    out = tmp_path / "e.csv"
    assert main(["estimate", "--input", str(path), "--items", "a,b,c", "--N", "250",
                 "--out", str(out)]) == 0
    for r in read(out):
        vals = [float(r[k]) for k in ("HT", "naive", "pq", "pq_true")]
        np.testing.assert_allclose(vals, vals[0], rtol=1e-12, atol=1e-9)


def test_variance_and_replicates(survey, tmp_path):
    out, reps = tmp_path / "v.csv", tmp_path / "r.csv"
    assert main(["variance", "--input", str(survey), "--items", ITEMS, "--item", "y6",
                 "--out", str(out), "--replicates", str(reps)]) == 0
    row = read(out)[0]
    assert float(row["ci_low"]) < float(row["estimate"]) < float(row["ci_high"])
    assert len(read(reps)) == int(row["replicates"])


def test_simulate_deterministic(tmp_path):
    args = ["simulate", "--setting", "synthetic", "--rho", "0.5", "--n", "100", "--M", "8",
            "--seed", "7"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert list(read(a)[0]) == ["estimator", "B", "RB", "sqrt_var", "MSE", "coverage"]


def test_config_file_defaults_and_override(survey, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "q-min": 0.05}))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    base = ["estimate", "--input", str(survey), "--items", ITEMS]
    assert main(["--config", str(cfg)] + base + ["--out", str(a)]) == 0
    assert main(base + ["--seed", "5", "--q-min", "0.05", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    cfg.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit) as err:
        main(["--config", str(cfg)] + base)
    assert err.value.code == 2


def test_exit_codes(tmp_path):
    cmd = [sys.executable, "-m", "latentweights"]
    bad_flag = subprocess.run(cmd + ["estimate", "--bogus"], capture_output=True, text=True)
    assert bad_flag.returncode == 2 and "usage" in bad_flag.stderr
    missing = subprocess.run(cmd + ["estimate", "--input", str(tmp_path / "nope.csv"),
                                    "--items", "a,b,c", "--N", "5"],
                             capture_output=True, text=True)
    assert missing.returncode == 1 and "ERROR" in missing.stderr and missing.stdout == ""
    no_data = subprocess.run(cmd + ["simulate", "--setting", "abortion", "--M", "1"],
                             capture_output=True, text=True)
    assert no_data.returncode == 1
