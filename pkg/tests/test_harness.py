import json

import numpy as np
import pytest

from reaper import cli
from reaper.envs import ChainEnv, GridWorldEnv
from reaper.harness import (
    CampaignConfig,
    aggregate,
    box_summary,
    cumulative_normalized,
    estimate_random_score,
    improvement,
    normalize_scores,
    read_rows,
    run_campaign,
    run_seed,
    tukey_outliers,
    verify_report,
    write_rows,
    REPORT_COLUMNS,
)

SMALL = {"budget": 300, "warmup": 50, "batch_size": 4, "learning_rate": 0.25, "n_evaluations": 3,
         "eval_episodes": 1}


def small_campaign(tmp_path, name="c", **kw):
    data = {"env_id": "chain:6", "strategies": ["per", "reaper"], "seed_count": 3,
            "out_dir": str(tmp_path / name), "train": dict(SMALL)}
    data.update(kw)
    return CampaignConfig.from_dict(data)


def test_run_seed_is_stable_and_shared():
    assert run_seed(0, 3) == run_seed(0, 3)
    assert run_seed(0, 3) != run_seed(0, 4) != run_seed(1, 3)
    assert 0 <= run_seed(7, 0) < 2 ** 64


def test_config_validation_and_aliases():
    with pytest.raises(ValueError):
        CampaignConfig("chain:5", seed_count=0)
    with pytest.raises(ValueError):
        CampaignConfig("nowhere")
    cfg = CampaignConfig.from_dict({"env": "chain:5", "seeds": 2, "out": "x", "budget": 200, "warmup": 10})
    assert (cfg.env_id, cfg.seed_count, cfg.out_dir) == ("chain:5", 2, "x")
    assert cfg.train_config().budget == 200


def test_campaign_row_counts_and_files(tmp_path):
    report = run_campaign(small_campaign(tmp_path))
    assert len(report.rows) == 6 + 2
    assert [r["row_type"] for r in report.rows].count("aggregate") == 2
    out = tmp_path / "c"
    for name in ("report.csv", "curves.csv", "curves.svg", "meta.json"):
        assert (out / name).exists()
    assert len(list((out / "runs").glob("*.csv"))) == 6
    meta = json.loads((out / "meta.json").read_text())
    assert "PCG64" in meta["prng"] and len(meta["seeds"]) == 3
    rows = read_rows(out / "report.csv")
    runs = [r for r in rows if r["row_type"] == "run"]
    assert {r["seed"] for r in runs} == {str(s) for s in meta["seeds"].values()}
    assert (out / "curves.svg").read_text().startswith("<svg")


def test_campaign_is_byte_identical(tmp_path):
    run_campaign(small_campaign(tmp_path, "a"))
    run_campaign(small_campaign(tmp_path, "b"))
    for name in ("report.csv", "curves.csv", "curves.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_censoring_when_threshold_missed(tmp_path):
    # a frozen zero-weight policy on cart-pole acts at random and never balances for 475 steps
    cfg = small_campaign(tmp_path, env_id="cartpole", seed_count=2,
                         train={**SMALL, "learning_rate": 0.0, "representation": "linear"})
    report = run_campaign(cfg, write=False)
    for r in report.results:
        assert r.censored and r.steps_to_threshold == 300


def test_verify_report_detects_tampering(tmp_path):
    run_campaign(small_campaign(tmp_path))
    path = tmp_path / "c" / "report.csv"
    assert verify_report(path) == []
    rows = read_rows(path)
    rows[-1]["peak_score"] = "123.0"
    write_rows(path, rows, REPORT_COLUMNS)
    assert verify_report(path)


def test_aggregate_excludes_failed_runs():
    base = {k: "" for k in REPORT_COLUMNS}
    rows = [dict(base, row_type="run", env_id="e", strategy="per", status="ok", steps_to_threshold="10",
                 peak_score="1", censored="False", uniform_fallbacks="0"),
            dict(base, row_type="run", env_id="e", strategy="per", status="aborted", uniform_fallbacks="0")]
    agg = aggregate(rows, "per")
    assert agg["n_runs"] == 2 and agg["failures"] == 1 and agg["steps_to_threshold"] == 10.0


def test_normalize_endpoints():
    curves, degenerate = normalize_scores({"a": [10.0, 2.0, 6.0]}, random_score=2.0)
    np.testing.assert_allclose(curves["a"], [1.0, 0.0, 0.5])
    assert not degenerate
    curves, degenerate = normalize_scores({"a": [2.0, 2.0]}, random_score=2.0)
    assert degenerate and not curves["a"].any()


def test_cumulative_normalized_is_running_mean():
    s = np.array([0.0, 1.0, 1.0, 0.5])
    np.testing.assert_allclose(cumulative_normalized(s, 0.0, 1.0), np.cumsum(s) / np.arange(1, 5))


def _chain_absorption(n: int, horizon: int) -> float:
    # probability a uniform random walk from 0 reaches n-1 within the horizon
    p = np.zeros(n)
    p[0] = 1.0
    absorbed = 0.0
    for _ in range(horizon):
        nxt = np.zeros(n)
        for s in range(n - 1):
            nxt[max(s - 1, 0)] += 0.5 * p[s]
            nxt[s + 1] += 0.5 * p[s]
        absorbed += nxt[n - 1]
        nxt[n - 1] = 0.0
        p = nxt
    return absorbed


def test_random_score_matches_absorption_oracle():
    env = ChainEnv(10)
    exact = _chain_absorption(10, env.spec.max_episode_length)
    episodes = 4000
    est = estimate_random_score(env, episodes, seed=5)
    assert 0.0 < exact < 1.0
    assert abs(est - exact) <= 3 * np.sqrt(exact * (1 - exact) / episodes)


def test_random_score_zero_for_unreachable_reward():
    env = GridWorldEnv(6, 6, max_episode_length=5)  # goal needs 10 moves
    assert estimate_random_score(env, 50, seed=0) == 0.0
    with pytest.raises(ValueError):
        estimate_random_score(env, 0, seed=0)


def test_tukey_rule():
    v = [1, 2, 3, 4, 100]
    np.testing.assert_array_equal(tukey_outliers(v), [False, False, False, False, True])
    summary = box_summary(v)
    assert summary["outliers"] == [100.0] and summary["whisker_high"] == 4.0


def test_improvement_sign(tmp_path):
    report = run_campaign(small_campaign(tmp_path), write=False)
    gain = improvement(report)
    b, c = report.mean_steps("per"), report.mean_steps("reaper")
    assert gain == pytest.approx(100 * (b - c) / b)


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"env_id": "chain:6", "seed_count": 2, "strategies": ["per", "reaper"], **SMALL}))
    out = tmp_path / "camp"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_OK
    assert cli.main(["report", "--out", str(out)]) == cli.EXIT_OK
    rows = read_rows(out / "report.csv")
    rows[-1]["n_runs"] = "9"
    write_rows(out / "report.csv", rows, REPORT_COLUMNS)
    assert cli.main(["report", "--out", str(out)]) == cli.EXIT_CHECK_FAILED

    diverge = tmp_path / "bad.json"
    diverge.write_text(json.dumps({"env_id": "chain:6", "seed_count": 1, "strategies": ["per"], **SMALL,
                                   "learning_rate": 1e308, "q_init": {"kind": "uniform"}}))
    assert cli.main(["train", "--config", str(diverge), "--out", str(tmp_path / "bad")]) == cli.EXIT_ABORTED

    assert cli.main(["stylized", "--lengths", "10,20", "--seeds", "3", "--out",
                     str(tmp_path / "s.csv")]) == cli.EXIT_OK
    assert cli.main(["theory", "--check", "bound", "--out", str(tmp_path / "t.csv")]) == cli.EXIT_OK
    assert (tmp_path / "t.csv").read_text().startswith("check,metric,value,passed")
