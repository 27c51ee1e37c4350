# backend/tests/test_bench.py
import json

import numpy as np
import pytest

from ope_pipeline.bench.config import ExperimentConfig, build_config
from ope_pipeline import settings
from ope_pipeline.bench.harness import (
    derive_seed,
    episode_split,
    evaluate_dataset,
    run_adversarial,
    run_batch_compare,
    run_ci_sweep,
    run_coverage,
)
from ope_pipeline.bench.results import ResultTable, default_output
from ope_pipeline.bench.runs import batch_run, generate_dataset, ope_run, sweep_run
from ope_pipeline.data_module.empirical import build_empirical, plug_in_value
from ope_pipeline.data_module.trajectory import load_dataset, simulate
from ope_pipeline.errors import InputError, NonConvergenceError
from ope_pipeline.mdp_model.environments import make_env, policy_pair
from ope_pipeline.mdp_model.mdp_core import importance_ratios, optimal_policy, reward_under_policy
from ope_pipeline.wdro_module.cost_metric import CostMetric, save_cost


def small(**overrides) -> ExperimentConfig:
    base = dict(env="hmp", behavior="target", episodes=[50], horizons=[50], trials=2, seed=3, n_jobs=1)
    base.update(overrides)
    return ExperimentConfig(**base)


# -------------------------------------------------------------------
# Configuration
# -------------------------------------------------------------------
def test_unset_flags_keep_defaults():
    cfg = build_config({"env": "hmp", "gamma": None, "episodes": [10, 20]})
    assert cfg.gamma == 0.95
    assert cfg.episodes == [10, 20]
    assert cfg.behavior_spec == "q5"
    assert ExperimentConfig().behavior_spec == "uniform"


def test_config_file_overrides_flags(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("env: hmp\ntrials: 5\nradii:\n  '0': 0.2\n")
    cfg = build_config({"env": "mrp", "trials": 1}, path)
    assert (cfg.env, cfg.trials) == ("hmp", 5)
    assert cfg.radii_mode == "fixed"
    np.testing.assert_allclose(cfg.fixed_radii(3), [0.2, 0.0, 0.0])


def test_invalid_config_names_the_field():
    with pytest.raises(InputError, match="gamma"):
        build_config({"gamma": 1.5})
    with pytest.raises(InputError, match="episodes"):
        build_config({"episodes": [0]})
    with pytest.raises(InputError):
        build_config({"unknown": 1})
    with pytest.raises(InputError):
        build_config({"radii_mode": "fixed"})


def test_radius_precedence(tmp_path):
    radii_file = tmp_path / "radii.json"
    radii_file.write_text(json.dumps({"1": 0.5}))
    assert ExperimentConfig().fixed_radii(2) is None
    np.testing.assert_allclose(ExperimentConfig(radius=0.1).fixed_radii(2), [0.1, 0.1])
    np.testing.assert_allclose(ExperimentConfig(radius=0.1, radii_file=radii_file).fixed_radii(2), [0.0, 0.5])
    np.testing.assert_allclose(
        ExperimentConfig(radius=0.1, radii_file=radii_file, radii={"0": 0.3}).fixed_radii(2), [0.3, 0.0]
    )


def test_presets_follow_the_experiment():
    for name in ("ci-sweep", "coverage"):
        cfg = ExperimentConfig(experiment=name)
        assert cfg.radius_scale == pytest.approx(settings.CI_RADIUS_SCALE)
        assert cfg.clip_values is True
        assert cfg.episode_length is None
    for name in ("batch-opt", "batch-compare"):
        cfg = ExperimentConfig(experiment=name)
        assert cfg.radius_scale == pytest.approx(settings.BATCH_RADIUS_SCALE)
        assert cfg.clip_values is False
    adv = ExperimentConfig(experiment="adversarial")
    assert (adv.radius_scale, adv.clip_values, adv.episode_length) == (1.0, False, settings.ADV_EPISODE_LENGTH)
    plain = ExperimentConfig()
    assert (plain.radius_scale, plain.clip_values, plain.episode_length) == (1.0, False, None)


def test_explicit_settings_override_presets():
    fixed = ExperimentConfig(experiment="ci-sweep", radius=0.1)
    assert (fixed.radius_scale, fixed.clip_values) == (1.0, True)
    chosen = ExperimentConfig(experiment="coverage", radius_scale=0.5, clip_values=False)
    assert (chosen.radius_scale, chosen.clip_values) == (0.5, False)
    assert build_config({"experiment": "adversarial", "episode_length": 20}).episode_length == 20
    with pytest.raises(InputError, match="episode_length"):
        build_config({"episode_length": 0})


def test_episode_split_keeps_the_transition_budget():
    cfg = ExperimentConfig(experiment="adversarial", episode_length=50)
    assert episode_split(cfg, 1, 1000) == (20, 50)
    assert episode_split(cfg, 3, 40) == (3, 40)
    assert episode_split(cfg, 1, 75) == (1, 50)
    assert episode_split(ExperimentConfig(), 1, 1000) == (1, 1000)


def test_cost_file_replaces_the_default_metric(tmp_path):
    path = tmp_path / "cost.jsonl"
    save_cost(CostMetric.normalized(6, 3), path)
    cfg = small(cost_file=path)
    np.testing.assert_array_equal(cfg.cost_metric(6, 3).table, CostMetric.normalized(6, 3).table)
    assert small().cost_metric(10, 2).kind == "normalized"
    with pytest.raises(InputError, match="environment is 10x2"):
        cfg.cost_metric(10, 2)
    custom, default = ope_run(small(cost_file=path))["estimate"], ope_run(small())["estimate"]
    assert (custom["L"], custom["U"]) == (default["L"], default["U"])


# -------------------------------------------------------------------
# Result tables
# -------------------------------------------------------------------
def test_result_table_csv_and_sidecar(tmp_path):
    table = ResultTable("demo", ("J", "trial"), ("value", "flag"), meta={"note": "x"})
    table.add({"J": 20, "trial": 1}, {"value": 0.5, "flag": True})
    table.add({"J": 10, "trial": 0}, {"value": None, "flag": False})
    table.add_failure({"J": 10, "trial": 1}, NonConvergenceError("diverged"))
    lines = table.to_csv().splitlines()
    assert lines[0] == "J,trial,value,flag,status,error"
    assert lines[1] == "10,0,,false,ok,"
    assert lines[2] == "10,1,,,error,NonConvergenceError: diverged"
    assert lines[3] == "20,1,0.5,true,ok,"
    assert table.column("value") == [None, 0.5]

    path = table.write(tmp_path / "out" / "demo.csv")
    meta = json.loads((tmp_path / "out" / "demo.meta.json").read_text())
    assert path.read_text() == table.to_csv()
    assert meta["experiment"] == "demo" and meta["note"] == "x"
    assert "conventions" in meta


def test_result_table_rejects_incomplete_rows():
    table = ResultTable("demo", ("J",), ("value",))
    with pytest.raises(InputError):
        table.add({"J": 1}, {})
    with pytest.raises(InputError):
        table.add({"T": 1}, {"value": 1.0})


def test_default_output(tmp_path):
    assert default_output("coverage", None, tmp_path) == tmp_path / "coverage.csv"
    assert default_output("coverage", tmp_path / "x.csv", "ignored") == tmp_path / "x.csv"


# -------------------------------------------------------------------
# Harnesses
# -------------------------------------------------------------------
def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(7, 0, 0) == derive_seed(7, 0, 0)
    seeds = {derive_seed(7, cell, trial) for cell in range(3) for trial in range(3)}
    assert len(seeds) == 9


def test_zero_radius_evaluation_is_the_plug_in(hmp):
    cfg = small(radius=0.0)
    target, behavior, _ = policy_pair(hmp, "target")
    ds = simulate(hmp, behavior, 50, 50, seed=1)
    rep = evaluate_dataset(hmp, target, behavior, ds, cfg)
    emp = build_empirical(ds, 6, 3)
    beta = importance_ratios(target, behavior)
    plug = plug_in_value(emp, beta, reward_under_policy(hmp.rewards, target), hmp.initial_dist, hmp.discount)
    assert rep.L == pytest.approx(plug, abs=1e-7)
    assert rep.U == pytest.approx(plug, abs=1e-7)
    assert rep.plug_in == pytest.approx(plug)
    assert rep.ci.lower == pytest.approx(rep.L - rep.correction)
    assert rep.schedule.mode == "fixed"


def test_ci_sweep_rows_and_reproducibility():
    cfg = small()
    first = run_ci_sweep(cfg, progress=False)
    assert [(r["J"], r["T"], r["trial"]) for r in first.sorted_rows()] == [(50, 50, 0), (50, 50, 1)]
    assert first.to_csv() == run_ci_sweep(cfg, progress=False).to_csv()
    for row in first.ok_rows():
        assert row["lower"] <= row["L"] <= row["U"] <= row["upper"]
        assert row["L_norm"] == pytest.approx(row["L"] / row["R_true"])


@pytest.mark.slow
def test_ci_sweep_independent_of_worker_count():
    cfg = small()
    assert run_ci_sweep(cfg, progress=False).to_csv() == run_ci_sweep(small(n_jobs=2), progress=False).to_csv()


def test_coverage_aggregates_trials():
    table = run_coverage(small(trials=3, horizons=[30, 50]), progress=False)
    assert len(table.rows) == 2
    for row in table.ok_rows():
        assert row["n_ok"] + row["n_failed"] == 3
        assert 0.0 <= row["coverage"] <= 1.0
        assert row["miss_rate"] == pytest.approx(1.0 - row["coverage"])


def test_batch_compare_has_both_arms():
    table = run_batch_compare(small(trials=1), progress=False)
    assert sorted(r["arm"] for r in table.rows) == ["robust", "saa"]
    for row in table.ok_rows():
        # on-policy data leaves a single admissible action per state
        assert row["gap"] == pytest.approx(0.0, abs=1e-9)


def test_adversarial_sweep_uses_fixed_radii():
    table = run_adversarial(small(behavior=None, radius=0.01, trials=1, episodes=[60], horizons=[60]),
                            progress=False)
    assert table.meta["rho"] == [0.01] * 6
    assert len(table.rows) == 1
    for row in table.ok_rows():
        assert row["lower"] <= row["value"] <= row["upper"]
        assert row["abs_error"] == pytest.approx(abs(row["value"] - row["L_adv"]))


def test_sweep_run_rejects_single_dataset_experiments():
    with pytest.raises(InputError):
        sweep_run(small(experiment="ope"), progress=False)
    table, summary = sweep_run(small(experiment="ci-sweep", trials=1), progress=False)
    assert summary == {"experiment": "ci-sweep", "rows": 1, "failed": sum(r["status"] != "ok" for r in table.rows)}


# -------------------------------------------------------------------
# Single-dataset runs
# -------------------------------------------------------------------
def test_generated_dataset_feeds_ope_run(tmp_path):
    cfg = small(experiment="gen-data")
    path = tmp_path / "hmp.jsonl"
    record = generate_dataset(cfg, path)
    assert record["transitions"] == 2500
    assert load_dataset(path).meta.env == "hmp"
    simulated = ope_run(small(experiment="ope"))
    loaded = ope_run(small(experiment="ope"), path)
    assert loaded["estimate"]["L"] == pytest.approx(simulated["estimate"]["L"])
    _, j_star = optimal_policy(make_env("hmp"))
    assert loaded["R_true"] == pytest.approx(j_star)
    assert loaded["covered"] == (loaded["estimate"]["ci"]["lower"] <= j_star <= loaded["estimate"]["ci"]["upper"])
    assert set(loaded) >= {"version", "config", "conventions"}


def test_ope_run_rejects_mismatched_dataset(tmp_path):
    path = tmp_path / "mrp.jsonl"
    generate_dataset(ExperimentConfig(env="mrp", episodes=[2], horizons=[5]), path)
    with pytest.raises(InputError):
        ope_run(small(), path)


def test_batch_run_methods():
    robust = batch_run(small(experiment="batch-opt"), "robust")
    saa = batch_run(small(experiment="batch-opt"), "saa")
    assert robust["gap"] == pytest.approx(0.0, abs=1e-9)
    assert saa["gap"] == pytest.approx(0.0, abs=1e-9)
    assert len(robust["worst_case"]) == 6
    assert "worst_case" not in saa
    with pytest.raises(InputError):
        batch_run(small(experiment="batch-opt"), "greedy")


# -------------------------------------------------------------------
# Off-policy data
# -------------------------------------------------------------------
def test_off_policy_ci_sweep_gives_informative_intervals():
    cfg = small(experiment="ci-sweep", behavior=None, missing_state="bound", episodes=[100], horizons=[100])
    table = run_ci_sweep(cfg, progress=False)
    assert [r["status"] for r in table.rows] == ["ok", "ok"]
    for row in table.ok_rows():
        assert row["lower"] <= row["L"] < row["U"] <= row["upper"]


def test_off_policy_batch_compare_runs_both_arms():
    cfg = small(experiment="batch-compare", behavior=None, missing_state="bound", trials=1,
                episodes=[100], horizons=[100])
    table = run_batch_compare(cfg, progress=False)
    rows = {r["arm"]: r for r in table.rows}
    assert rows["robust"]["status"] == "ok"
    assert rows["robust"]["gap"] >= -1e-12
    if rows["saa"]["status"] == "ok":
        assert rows["robust"]["value"] <= rows["saa"]["value"] + 1e-9


def test_adversarial_rows_record_the_episode_split():
    cfg = small(experiment="adversarial", behavior=None, missing_state="bound", radius=0.01, trials=1,
                episodes=[2], horizons=[1000])
    table = run_adversarial(cfg, progress=False)
    row = table.rows[0]
    assert (row["J"], row["T"]) == (2, 1000)
    assert row["status"] == "ok"
    assert (row["episodes"], row["length"]) == (40, 50)
    assert row["lower"] <= row["value"] <= row["upper"]


# -------------------------------------------------------------------
# Statistical reproductions
# -------------------------------------------------------------------
@pytest.mark.slow
def test_interval_coverage_on_the_replacement_chain():
    cfg = ExperimentConfig(experiment="coverage", env="mrp", behavior="uniform", alpha=0.05,
                           episodes=[300], horizons=[300], trials=50, seed=7)
    row = run_coverage(cfg, progress=False).rows[0]
    assert row["status"] == "ok"
    assert row["n_ok"] >= 45
    assert row["coverage"] >= 0.85


@pytest.mark.slow
@pytest.mark.parametrize("env", ["mrp", "hmp"])
def test_interval_width_shrinks_with_episodes(env):
    cfg = ExperimentConfig(experiment="coverage", env=env, episodes=[100, 500], horizons=[300], trials=5, seed=7)
    widths = {r["J"]: r["mean_width"] for r in run_coverage(cfg, progress=False).ok_rows()}
    assert widths[500] < widths[100]


@pytest.mark.slow
def test_adversarial_estimate_is_consistent_and_calibrated():
    cfg = ExperimentConfig(experiment="adversarial", env="mrp", episodes=[1], horizons=[1000, 20000], trials=5,
                           seed=7)
    table = run_adversarial(cfg, progress=False)
    assert table.meta["rho"][0] > 0.0
    errors = {T: [r["abs_error"] for r in table.ok_rows() if r["T"] == T] for T in (1000, 20000)}
    assert len(errors[1000]) >= 4 and len(errors[20000]) == 5
    assert np.mean(errors[20000]) < np.mean(errors[1000])

    table = run_adversarial(cfg.model_copy(update={"horizons": [5000], "trials": 100}), progress=False)
    rows = table.ok_rows()
    assert len(rows) >= 95
    assert np.mean([r["covers_adv"] for r in rows]) >= 0.85
    spread = np.std([r["value"] for r in rows], ddof=1)
    assert np.mean([r["std_error"] for r in rows]) == pytest.approx(spread, rel=0.3)


@pytest.mark.slow
def test_robust_batch_policy_improves_with_data():
    def arm_rows(n, arm):
        cfg = ExperimentConfig(experiment="batch-compare", env="hmp", episodes=[n], horizons=[n], trials=20,
                               seed=7, missing_state="bound")
        rows = run_batch_compare(cfg, progress=False).ok_rows()
        return [r for r in rows if r["arm"] == arm], {r["trial"]: r for r in rows if r["arm"] == "saa"}

    robust, saa = arm_rows(300, "robust")
    assert len(robust) == 20
    checked = [r["bound_holds"] for r in robust if r["bound_holds"] is not None]
    assert len(checked) >= 18
    assert np.mean(checked) >= 0.9
    for r in robust:
        if r["trial"] in saa:
            assert r["value"] <= saa[r["trial"]]["value"] + 1e-9
    small_data, _ = arm_rows(50, "robust")
    assert np.mean([r["gap"] for r in robust]) <= np.mean([r["gap"] for r in small_data])
