import json

import numpy as np
import pytest

from endosurv import cli
from endosurv import simulate as sim
from endosurv.errors import ConfigurationError, IngestionError


def write_sim_csv(path, n=350, seed=0, **kw):
    config = sim.DgpConfig(n=n, monotone_J=6, **kw)
    data = sim.generate(config, seed=seed)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("unemp.dur,status,agree,age,bonus\n")
        for i in range(data.n):
            fh.write(f"{float(data.time[i])!r},{int(data.status[i])},"
                     f"{int(data.treatment[i])},{float(data.covariates['x'][i])!r},"
                     f"{int(data.covariates['w'][i])}\n")
    return data


def write_config(path, data_path, out_dir, extra=""):
    path.write_text(f"""
# joint model configuration
data = {data_path}
time = unemp.dur
status = status
treatment = agree
out_dir = {out_dir}
seed = 7
draws = 30
grid_points = 12

outcome_term = monotone J=6
outcome_term = linear:age
outcome_term = treatment

selection_term = linear:age
selection_term = ridge:bonus
{extra}
""")


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------

def test_ingest_three_row_toy(tmp_path):
    p = tmp_path / "toy.csv"
    p.write_text("unemp.dur,status,agree,age\n1.5,1,0,30\n2.5,0,1,40\n3.5,1,1,50\n")
    data = cli.ingest(str(p), "unemp.dur", "status", "agree")
    assert data.n == 3
    assert np.array_equal(data.covariates["age"], [30.0, 40.0, 50.0])


def test_ingest_hie_style_columns(tmp_path):
    p = tmp_path / "hie.csv"
    header = "agree,bonus,unemp.dur,status,age,prearn,benefit,gender,ethnicity"
    lines = [header]
    rng = np.random.default_rng(0)
    for i in range(25):
        lines.append(",".join(map(str, [
            rng.integers(0, 2), rng.integers(0, 2),
            round(rng.uniform(1, 26), 3), rng.integers(0, 2),
            rng.integers(20, 55), round(rng.uniform(500, 3000), 2),
            rng.integers(50, 200), rng.integers(0, 2), rng.integers(0, 2)])))
    p.write_text("\n".join(lines) + "\n")
    data = cli.ingest(str(p), "unemp.dur", "status", "agree")
    assert data.n == 25
    assert set(data.covariates) == {"bonus", "age", "prearn", "benefit",
                                    "gender", "ethnicity"}


def test_ingest_bad_status_names_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("unemp.dur,status,agree\n1.0,1,0\n2.0,2,1\n")
    with pytest.raises(IngestionError, match="row 2"):
        cli.ingest(str(p), "unemp.dur", "status", "agree")


def test_ingest_nonpositive_time_and_missing(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("unemp.dur,status,agree\n-1.0,1,0\n")
    with pytest.raises(IngestionError, match="row 1"):
        cli.ingest(str(p), "unemp.dur", "status", "agree")
    p.write_text("unemp.dur,status,agree\n1.0,1,\n")
    with pytest.raises(IngestionError, match="missing"):
        cli.ingest(str(p), "unemp.dur", "status", "agree")


def test_ingest_records_level_map(tmp_path):
    p = tmp_path / "cat.csv"
    p.write_text("unemp.dur,status,agree,eth\n1.0,1,0,white\n2.0,0,1,black\n"
                 "3.0,1,1,white\n")
    data = cli.ingest(str(p), "unemp.dur", "status", "agree")
    assert data.level_maps["eth"] == {"black": 0.0, "white": 1.0}
    assert np.array_equal(data.covariates["eth"], [1.0, 0.0, 1.0])


# --------------------------------------------------------------------------
# config parsing
# --------------------------------------------------------------------------

def test_config_unknown_key_fails_before_data(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("data = nonexistent.csv\ntime = t\nstatus = s\n"
                   "treatment = d\nbogus_key = 1\noutcome_term = monotone\n")
    assert cli.main(["fit", "--config", str(cfg)]) == 2


def test_config_term_parsing():
    t = cli._parse_term("smooth:age J=12")
    assert t.kind == "smooth" and t.column == "age" and t.J == 12
    t = cli._parse_term("interaction:gender")
    assert t.modifier == "gender"
    with pytest.raises(ConfigurationError):
        cli._parse_term("smooth")
    with pytest.raises(ConfigurationError):
        cli._parse_term("monotone K=3")


def test_config_role_column_clash(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("data = d.csv\ntime = t\nstatus = s\ntreatment = d\n"
                   "outcome_term = monotone\noutcome_term = treatment\n"
                   "outcome_term = linear:s\nselection_term = linear:x\n")
    with pytest.raises(ConfigurationError, match="role"):
        cli.build_model_spec(cli.parse_config(str(cfg)))


# --------------------------------------------------------------------------
# end-to-end pipeline
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def fit_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data_path = root / "sim.csv"
    write_sim_csv(str(data_path), n=350, seed=1)
    cfg = root / "model.cfg"
    out = root / "out"
    write_config(cfg, data_path, out)
    code = cli.main(["fit", "--config", str(cfg)])
    assert code == 0
    return root, cfg, out


def test_fit_writes_outputs(fit_run):
    _, _, out = fit_run
    for name in ("summary.json", "curves.tsv", "sate.tsv", "manifest.json"):
        assert (out / name).exists()
    payload = json.loads((out / "summary.json").read_text())
    assert payload["converged"] is True
    assert "rho" in payload
    assert {r["name"] for r in payload["terms"]} >= {"intercept", "treatment",
                                                     "mono(time)"}


def test_curves_non_increasing(fit_run):
    _, _, out = fit_run
    lines = (out / "curves.tsv").read_text().strip().splitlines()[1:]
    by_group = {}
    for line in lines:
        t, group, est, lo, hi = line.split("\t")
        by_group.setdefault(group, []).append((float(t), float(est)))
    assert set(by_group) == {"treated", "control"}
    for pts in by_group.values():
        est = [e for _, e in sorted(pts)]
        assert all(b - a <= 1e-12 for a, b in zip(est, est[1:]))


def test_manifest_replay_byte_identical(fit_run):
    root, _, out = fit_run
    out2 = root / "replay"
    code = cli.main(["fit", "--config", str(out / "manifest.json"),
                     "--out", str(out2)])
    assert code == 0
    assert (out / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()
    assert (out / "curves.tsv").read_bytes() == (out2 / "curves.tsv").read_bytes()
    assert (out / "sate.tsv").read_bytes() == (out2 / "sate.tsv").read_bytes()


def test_sate_week_single_row(fit_run):
    root, cfg, _ = fit_run
    out = root / "sate-week"
    code = cli.main(["sate", "--config", str(cfg), "--out", str(out),
                     "--sate-week", "2.0"])
    assert code == 0
    lines = (out / "sate.tsv").read_text().strip().splitlines()
    assert len(lines) == 2
    assert float(lines[1].split("\t")[0]) == 2.0


def test_missing_data_file_exit_code(tmp_path):
    cfg = tmp_path / "c.cfg"
    write_config(cfg, tmp_path / "nope.csv", tmp_path / "o")
    assert cli.main(["fit", "--config", str(cfg)]) == 3


def test_nonconvergence_exit_code(tmp_path, monkeypatch):
    data_path = tmp_path / "d.csv"
    write_sim_csv(str(data_path), n=120, seed=2)
    cfg = tmp_path / "c.cfg"
    write_config(cfg, data_path, tmp_path / "o")

    real_fit = cli.op.fit

    def tired_fit(bundle, options=None):
        fit = real_fit(bundle, options)
        fit.convergence.converged = False
        return fit

    monkeypatch.setattr(cli.op, "fit", tired_fit)
    assert cli.main(["fit", "--config", str(cfg)]) == 4


def test_inference_failure_exit_code(tmp_path, monkeypatch):
    data_path = tmp_path / "d.csv"
    write_sim_csv(str(data_path), n=150, seed=4)
    cfg = tmp_path / "c.cfg"
    write_config(cfg, data_path, tmp_path / "o")

    from endosurv.errors import InferenceError

    def broken_summary(fit, level=0.05):
        raise InferenceError("synthetic failure")

    monkeypatch.setattr(cli.inference, "summary", broken_summary)
    assert cli.main(["fit", "--config", str(cfg)]) == 5


def test_malformed_manifest_exit_code(tmp_path):
    bad = tmp_path / "manifest.json"
    bad.write_text("{ not json")
    assert cli.main(["fit", "--config", str(bad)]) == 2
    bad.write_text('{"config": {"data": "x.csv"}}')  # missing required keys
    assert cli.main(["fit", "--config", str(bad)]) == 2


def test_univariate_summary_included(tmp_path):
    data_path = tmp_path / "d.csv"
    write_sim_csv(str(data_path), n=300, seed=3)
    cfg = tmp_path / "c.cfg"
    out = tmp_path / "o"
    write_config(cfg, data_path, out, extra="fit_univariate = true\n")
    assert cli.main(["fit", "--config", str(cfg)]) == 0
    payload = json.loads((out / "summary.json").read_text())
    assert payload["univariate"]["converged"] is True
    assert "rho" not in payload["univariate"]


def test_simulate_emit_data(tmp_path):
    target = tmp_path / "sim.csv"
    code = cli.main(["simulate", "--preset", "strong", "--n", "80",
                     "--seed", "5", "--emit-data", str(target)])
    assert code == 0
    lines = target.read_text().strip().splitlines()
    assert lines[0] == "time,status,treatment,x,w"
    assert len(lines) == 81


def test_simulate_small_study(tmp_path):
    out = tmp_path / "study"
    code = cli.main(["simulate", "--preset", "strong", "--n", "250",
                     "--replicates", "2", "--seed", "9", "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["replicates"] == 2
    assert (out / "report.tsv").exists()


def test_check_subcommand_passes():
    assert cli.main(["check", "--n", "50", "--seed", "0"]) == 0


def test_scripted_runs_recover_beta_d(tmp_path):
    # simulated datasets round-trip through the CLI: the fitted 95% interval
    # for the treatment coefficient covers the truth in most runs
    runs, hits = 10, 0
    truth_gamma = -0.6  # working-scale coefficient of D in eta1
    for r in range(runs):
        data_path = tmp_path / f"d{r}.csv"
        write_sim_csv(str(data_path), n=400, seed=(60, r), beta_d=0.6,
                      transform="spline", censor_max=14.0)
        cfg = tmp_path / f"c{r}.cfg"
        out = tmp_path / f"o{r}"
        write_config(cfg, data_path, out)
        if cli.main(["fit", "--config", str(cfg)]) != 0:
            continue
        payload = json.loads((out / "summary.json").read_text())
        row = next(t for t in payload["terms"] if t["name"] == "treatment")
        lo = row["estimate"] - 1.959963984540054 * row["std_error"]
        hi = row["estimate"] + 1.959963984540054 * row["std_error"]
        if lo <= truth_gamma <= hi:
            hits += 1
    assert hits >= 0.9 * runs


def test_float_formatting_17_digits():
    assert cli._fmt_float(1.0 / 3.0) == "0.33333333333333331"
    with pytest.raises(Exception):
        cli._fmt_float(float("nan"))
