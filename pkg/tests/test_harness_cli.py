import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from mibounds import bounds_static as bs
from mibounds import harness as h
from mibounds.cli import main
from mibounds.models import model_from_config
from mibounds.variational import TableProposal, load_checkpoint

DATA = Path(__file__).parent / "data"


def write_cfg(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


DISCRETE = {"model": {"kind": "discrete", "nx": 3, "nz": 4, "seed": 1},
            "proposal": {"kind": "table", "seed": 2}, "n": 500, "seed": 4}


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("bad, match", [
    ({"estimators": []}, "missing 'model'"),
    ({**DISCRETE, "colour": 1}, "unknown top-level keys"),
    ({**DISCRETE, "model": {"kind": "hopfield"}}, "model.kind"),
    ({**DISCRETE, "estimators": [{"id": "vae"}]}, "unknown estimator id"),
    ({**DISCRETE, "estimators": [{"K": 3}]}, "'id' key"),
    ({**DISCRETE, "estimators": [{"id": "iwae_lower", "K": 0}]}, "'K' must be an integer"),
    ({**DISCRETE, "estimators": [{"id": "ais", "T": [10, 2.5]}]}, "'T' must be an integer"),
    ({**DISCRETE, "estimators": [{"id": "ais", "schedule": "cosine"}]}, "schedule"),
    ({**DISCRETE, "estimators": [{"id": "ais", "kernel": "gibbs"}]}, "kernel"),
    ({**DISCRETE, "n": -3}, "'n' must be"),
    ({**DISCRETE, "tight_threshold": 0}, "tight_threshold"),
])
def test_config_errors_name_the_key(bad, match):
    with pytest.raises(h.ConfigError, match=match):
        h.parse_config(bad)


def test_giwae_upper_is_rejected_with_explanation():
    with pytest.raises(h.ConfigError, match=bs.GIWAE_UPPER_MESSAGE[:20]):
        h.parse_config({**DISCRETE, "estimators": [{"id": "giwae_upper"}]})


def test_load_config_reports_yaml_errors(tmp_path):
    p = tmp_path / "broken.yaml"
    p.write_text("model: {kind: discrete\n")
    with pytest.raises(h.ConfigError, match="not valid YAML"):
        h.load_config(p)


def test_config_round_trips_through_to_dict():
    cfg = h.parse_config({**DISCRETE, "estimators": [{"id": "ba_lower"}]})
    again = h.parse_config(cfg.to_dict())
    assert again == cfg
    json.dumps(cfg.to_dict())


# ---------------------------------------------------------------------------
# run_experiment
# ---------------------------------------------------------------------------

def test_empty_estimator_list_gives_valid_empty_report(tmp_path):
    out = {"csv": str(tmp_path / "r.csv"), "json": str(tmp_path / "r.json")}
    rep = h.run_experiment({**DISCRETE, "estimators": []}, out=out)
    assert rep.rows == []
    text = Path(out["csv"]).read_text()
    assert text.splitlines() == [h.CSV_HEADER_COMMENT, ",".join(h.CSV_COLUMNS)]
    js = json.loads(Path(out["json"]).read_text())
    assert js["rows"] == [] and js["units"] == "nats" and js["schema"] == "mibounds-report v1"


def test_archived_sweep_replays_byte_identically():
    rep = h.run_experiment(h.load_config(DATA / "archived_discrete.yaml"))
    assert rep.csv_text() == (DATA / "archived_discrete.csv").read_text()


def test_output_independent_of_worker_count():
    cfg = h.load_config(DATA / "archived_discrete.yaml")
    one = h.run_experiment(cfg, workers=1).csv_text()
    cfg = h.load_config(DATA / "archived_discrete.yaml")
    assert h.run_experiment(cfg, workers=4).csv_text() == one


def test_rows_are_traceable_and_cis_come_from_the_draws():
    cfg = {**DISCRETE, "estimators": [{"id": "ba_lower"}, {"id": "iwae_lower", "K": [2, 3]}]}
    rep = h.run_experiment(cfg)
    assert [(r.estimator, r.K) for r in rep.rows] == [("ba_lower", 1), ("iwae_lower", 2), ("iwae_lower", 3)]
    model = model_from_config(DISCRETE["model"])
    q = TableProposal.random(3, 4, 2)
    for r in rep.rows:
        assert r.seed == h.row_seed(4, r.row_id)
        again = (bs.ba_lower(model, q, r.n, r.seed) if r.K == 1
                 else bs.iwae_lower_mi(model, q, r.K, r.n, r.seed)[0])
        assert again.value == r.lower.value
        lo, hi = r.lower.ci95
        assert lo == r.lower.value - 1.96 * r.lower.std_error
        assert hi == r.lower.value + 1.96 * r.lower.std_error
    rec = h.read_csv(rep.csv_text())
    assert [float(x["lower_mi"]) for x in rec] == [r.lower.value for r in rep.rows]
    assert {x["stochastic"] for x in rec} == {"true"}


def test_missing_capability_marks_row_skipped():
    cfg = {"model": {"kind": "linear_gaussian", "latent_dim": 2, "obs_dim": 3, "seed": 0,
                     "disable": ["exact_posterior_sample"]},
           "n": 50, "estimators": [{"id": "riwae", "K": 2}, {"id": "ba_lower"},
                                   {"id": "giwae", "K": 2, "critic": {"kind": "table"}}]}
    rep = h.run_experiment(cfg)
    assert [r.status for r in rep.rows] == ["SKIPPED", "OK", "FAILED"]
    assert "EXACT_POSTERIOR_SAMPLE" in rep.rows[0].reason
    assert rep.rows[0].lower is None and rep.any_failed


def test_tight_flag_follows_threshold():
    cfg = {**DISCRETE, "estimators": [{"id": "ba_lower"}]}
    r = h.run_experiment(cfg).rows[0]
    gap = abs(r.lower.value - r.reference_mi)
    assert r.tight == (gap < 2.0)
    r2 = h.run_experiment({**cfg, "tight_threshold": gap / 2}).rows[0]
    assert r2.tight is False


def test_auto_k_uses_worker_count():
    cfg = h.parse_config({**DISCRETE, "workers": 3,
                          "estimators": [{"id": "im_ais", "K": "auto", "T": "auto", "budget": 12}]})
    assert [(r["K"], r["T"]) for r in h.expand_rows(cfg)] == [(3, 4)]


def test_table1_pattern_ais_tighter_than_iwae():
    cfg = {"model": {"kind": "linear_gaussian", "latent_dim": 10, "obs_dim": 100, "seed": 0},
           "n": 16, "seed": 0,
           "estimators": [{"id": "iwae_lower", "K": [1, 1000]}, {"id": "iwae_upper", "K": [1, 1000]},
                          {"id": "ais", "T": [1, 500], "schedule": "sigmoid"}]}
    rows = {(r.estimator, r.K, r.T): r for r in h.run_experiment(cfg).rows}
    mi = rows[("ais", 1, 500)].reference_mi
    assert mi > 3 * np.log(1000)
    iw_lo = rows[("iwae_lower", 1000, 1)].lower.value
    iw_hi = rows[("iwae_upper", 1000, 1)].upper.value
    ais = rows[("ais", 1, 500)]
    assert ais.upper.value - ais.lower.value < iw_hi - iw_lo
    assert ais.tight and not rows[("iwae_lower", 1000, 1)].tight
    # the IWAE lower bound cannot exceed BA by more than log K
    assert iw_lo <= rows[("iwae_lower", 1, 1)].lower.value + np.log(1000) + 1e-9


# ---------------------------------------------------------------------------
# sweeps and decompositions
# ---------------------------------------------------------------------------

def test_perfect_bridge_sweep_slope(tmp_path):
    cfg = {"model": {"kind": "linear_gaussian", "latent_dim": 1, "obs_dim": 1},
           "bridge": {"target_mean": 3.0}, "sweep": {"T": [10, 30, 100, 300, 1000]},
           "n": 20_000, "seed": 0}
    out = tmp_path / "gap.csv"
    rows = h.sweep_gap_vs_T(cfg, out=out)
    Ts = [r["T"] for r in rows]
    assert Ts == sorted(set(Ts))
    assert all(r["gap"] > 0 for r in rows)
    slope = h.loglog_slope(Ts, [r["gap"] for r in rows])
    assert -1.15 <= slope <= -0.85
    rec = h.read_csv(out)
    assert list(rec[0]) == list(h.GAP_COLUMNS)
    assert float(rec[0]["predicted_gap"]) == pytest.approx(9.0 / 10)


def test_hmc_gap_shrinks_with_t_in_repeated_runs():
    base = {"model": {"kind": "linear_gaussian", "latent_dim": 10, "obs_dim": 100, "seed": 1},
            "sweep": {"variant": "bdmc", "K": 1, "T": [100, 1000], "leapfrog": 3, "warmup": 1,
                      "warmup_batch": 8},
            "n": 4}
    wins = 0
    for s in range(20):
        g = h.sweep_gap_vs_T({**base, "seed": s})
        wins += g[1]["gap"] < g[0]["gap"]
    assert wins >= 18


def test_decomposition_table(tmp_path):
    cfg = {"model": {"kind": "linear_gaussian", "latent_dim": 10, "obs_dim": 100, "seed": 0},
           "n": 100, "seed": 0, "decompose": {"estimators": ["s_infonce", "iwae_lower"], "K": [1, 1000]}}
    rows = h.decompose_report(cfg, out=tmp_path / "d.csv")
    for r in rows:
        assert r["total"] == r["ba_term"] + r["contrastive_term"]
        assert r["cap_ok"]
        if r["estimator"] == "s_infonce":
            assert r["ba_term"] == 0.0
    big = [r for r in rows if r["estimator"] == "iwae_lower" and r["K"] == 1000][0]
    assert abs(big["contrastive_term"] - np.log(1000)) < 0.1
    rec = h.read_csv(tmp_path / "d.csv")
    assert list(rec[0]) == list(h.DECOMP_COLUMNS) and len(rec) == 4


def test_selftest_passes():
    checks = h.selftest(instances=3, seed=1, n=20_000)
    assert all(ok for _, ok, _ in checks), [c for c in checks if not c[1]]


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_estimate_writes_csv_and_json(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**DISCRETE, "estimators": [{"id": "ba_lower"}, {"id": "iwae_lower", "K": 2}]})
    out = tmp_path / "res.csv"
    assert main(["estimate", "--config", cfg, "--out", str(out), "--check"]) == 0
    assert out.read_text().startswith(h.CSV_HEADER_COMMENT)
    js = json.loads(out.with_suffix(".json").read_text())
    assert len(js["rows"]) == 2
    assert main(["estimate", "--config", cfg, "--seed", "9"]) == 0
    printed = capsys.readouterr().out
    assert str(h.row_seed(9, 0)) in printed


def test_cli_exit_codes(tmp_path, capsys):
    bad = write_cfg(tmp_path, {**DISCRETE, "estimators": [{"id": "giwae_upper"}]}, "bad.yaml")
    assert main(["estimate", "--config", bad]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["estimate"]) == 2
    failing = write_cfg(tmp_path, {**DISCRETE, "estimators": [{"id": "giwae", "critic": {"kind": "mlp"}}]},
                        "fail.yaml")
    assert main(["estimate", "--config", failing, "--check"]) == 1
    assert main(["estimate", "--config", failing]) == 0


def test_cli_sweep_and_decompose(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"model": {"kind": "linear_gaussian", "latent_dim": 1, "obs_dim": 1},
                               "bridge": {"target_mean": 3.0}, "sweep": {"T": [10, 100, 1000]},
                               "n": 5000})
    assert main(["sweep", "--config", cfg]) == 0
    out = capsys.readouterr().out
    slope = float(out.splitlines()[0].split(":")[1])
    assert -1.15 <= slope <= -0.85
    bad = write_cfg(tmp_path, {"model": {"kind": "linear_gaussian", "latent_dim": 1, "obs_dim": 1},
                               "bridge": {}, "sweep": {"T": [100, 10]}, "n": 500}, "bad.yaml")
    assert main(["sweep", "--config", bad]) == 1
    dec = write_cfg(tmp_path, {**DISCRETE, "decompose": {"estimators": ["s_infonce"], "K": [2]}}, "dec.yaml")
    assert main(["sweep", "--config", dec, "--out", str(tmp_path / "d.csv")]) == 0


def test_cli_train_critic_then_eval_ibal(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**DISCRETE,
                               "critic": {"kind": "table", "train": {"steps": 50, "batch": 32, "lr": 0.05}},
                               "ibal": {"T": 3, "K": 2}})
    ck = tmp_path / "critic.json"
    assert main(["train-critic", "--config", cfg, "--objective", "mine-ais", "--out", str(ck)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["steps"] == 50
    crit = load_checkpoint(ck)
    assert crit.table.shape == (3, 4)
    assert json.loads(ck.read_text())["extra"]["objective"] == "mine_ais"
    out = tmp_path / "ibal.csv"
    assert main(["eval-ibal", "--config", cfg, "--critic", str(ck), "--out", str(out)]) == 0
    row = h.read_csv(out)[0]
    assert row["approximate"] == "true" and row["lower_mi"] and row["upper_mi"]
    assert main(["eval-ibal", "--config", cfg, "--critic", str(ck), "--mode", "upper", "--T", "1",
                 "--K", "3"]) == 0
    row = h.read_csv(capsys.readouterr().out)[0]
    assert row["lower_mi"] == "" and row["T"] == "1" and row["K"] == "3"


def test_cli_selftest(capsys):
    assert main(["selftest", "--instances", "2", "--n", "5000"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "checks passed" in out


def test_cli_chain_flags_override_config(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**DISCRETE, "estimators": [{"id": "im_ais", "K": 2, "T": 2}]})
    assert main(["estimate", "--config", cfg, "--K", "1", "3", "--T", "2", "--kernel", "perfect"]) == 0
    rows = h.read_csv(capsys.readouterr().out)
    assert [(r["K"], r["T"]) for r in rows] == [("1", "2"), ("3", "2")]
    sw = write_cfg(tmp_path, {"model": {"kind": "linear_gaussian", "latent_dim": 1, "obs_dim": 1},
                              "bridge": {}, "sweep": {"T": [10, 20]}, "n": 2000}, "sw.yaml")
    assert main(["sweep", "--config", sw, "--T", "10", "100"]) == 0
    assert [r["T"] for r in h.read_csv(capsys.readouterr().out.split("\n", 1)[1])] == ["10", "100"]
