import dataclasses
import json

import numpy as np
import pytest

from conftest import small_config
from lpreg.config import ConfigError, ExperimentConfig, TrainSchedule, dump_config, from_dict, load_config
from lpreg.envs import generate, make_eval_set
from lpreg.objective import ObjectiveConfig, batch_delta
from lpreg.policy import default_vocabulary, init_params, zero_params
from lpreg.telemetry import read_metrics
from lpreg.trainer import (TrainBatch, TrainState, evaluate, initial_params, minibatch_partition, rollout,
                           run_experiment, supervised_fit, train_step, training_instances)

V = default_vocabulary()


def make_batch(cfg, step=1, params=None):
    params = params or initial_params(cfg, V)
    inst = training_instances(cfg.env, V, cfg.schedule.seed, step, cfg.schedule.rollout_batch)
    return params, rollout(params, inst, cfg.schedule, cfg.objective, V, step)


def test_rollout_counts_trajectories():
    cfg = small_config(**{"schedule.group_size": 8})
    _, batch = make_batch(cfg)
    assert batch.n_trajectories == 32
    assert all(len(g.trajectories) == 8 for g in batch.groups)
    assert batch.tokens.n_traj == 32


def test_rollout_is_deterministic():
    cfg = small_config()
    p, a = make_batch(cfg)
    _, b = make_batch(cfg, params=p)
    assert a.fingerprint == b.fingerprint
    np.testing.assert_array_equal(a.tokens.contexts, b.tokens.contexts)


def test_delta_recomputed_from_step_probs():
    cfg = small_config(**{"objective.rho": 0.1})
    _, batch = make_batch(cfg)
    probs = [p for g in batch.groups for tr in g.trajectories for p in tr.step_probs]
    assert batch.delta == batch_delta(probs, 0.1)


def test_behavior_streams_are_frozen():
    cfg = small_config()
    _, batch = make_batch(cfg)
    with pytest.raises(ValueError):
        batch.tokens.behavior_probs[0] = 0.5


def test_off_policy_proxy_comes_from_behavior_distributions():
    from lpreg.objective import make_proxy
    cfg = small_config()
    _, batch = make_batch(cfg)
    np.testing.assert_array_equal(batch.tokens.proxy, make_proxy(batch.tokens.behavior_dists, cfg.objective))
    on = small_config(**{"schedule.regime": "on_policy"})
    assert make_batch(on)[1].tokens.proxy is None


def test_minibatches_hold_whole_groups():
    cfg = small_config(**{"schedule.rollout_batch": 6, "schedule.mini_batch": 2})
    _, batch = make_batch(cfg)
    parts = minibatch_partition(batch, cfg.schedule)
    assert len(parts) == cfg.schedule.updates_per_rollout == 3
    G = cfg.schedule.group_size
    for part in parts:
        assert part.size == 2 * G and part[0] % G == 0


@pytest.mark.parametrize("variant,beta", [("grpo", 1.0), ("lp_reg", 0.0)])
def test_zero_advantages_leave_params_unchanged(variant, beta):
    cfg = small_config(**{"objective.variant": variant, "objective.beta": beta})
    params, batch = make_batch(cfg)
    tb = dataclasses.replace(batch.tokens, advantages=np.zeros(len(batch.tokens)))
    tb.freeze()
    batch = TrainBatch(batch.groups, tb, batch.behavior_snapshot, batch.step, tb.fingerprint())
    before = params.to_vector().copy()
    state, _ = train_step(TrainState(params), batch, cfg.objective, cfg.schedule)
    np.testing.assert_array_equal(state.params.to_vector(), before)


@pytest.mark.parametrize("variant", ["lp_reg", "grpo", "top_entropy_8020"])
def test_regime_equivalence_first_update(variant):
    over = {"objective.variant": variant, "schedule.mini_batch": 4, "objective.rho": 0.2}
    off = small_config(**over)
    on = small_config(**over, **{"schedule.regime": "on_policy"})
    p0 = initial_params(off, V)
    _, b_off = make_batch(off, params=p0.copy())
    _, b_on = make_batch(on, params=p0.copy())
    _, _, g_off = train_step(TrainState(p0.copy()), b_off, off.objective, off.schedule, return_grads=True)
    _, _, g_on = train_step(TrainState(p0.copy()), b_on, on.objective, on.schedule, return_grads=True)
    for k in g_off:
        assert np.max(np.abs(g_off[k] - g_on[k])) <= 1e-12


def test_delta_constant_across_minibatch_updates():
    cfg = small_config(**{"objective.rho": 0.2})
    params, batch = make_batch(cfg)
    _, diag = train_step(TrainState(params), batch, cfg.objective, cfg.schedule)
    assert diag["delta"] == batch.delta and diag["updates"] == 2


def test_uniform_policy_is_at_chance_on_mod_arith():
    inst = make_eval_set("mod_arith", 1000, 1, vocab=V)
    acc, per = evaluate(zero_params(64), inst, V)
    assert abs(acc - 0.1) <= 0.03
    assert per == {"mod_arith": acc}


def test_evaluation_is_deterministic_and_memorizes_singleton():
    inst = [generate("seq_transform", 3, 2, V)]
    p = supervised_fit(init_params(64, seed=1), [(inst[0].prompt, inst[0].reference)], 200, 0.05, 8, 0, V)
    assert evaluate(p, inst, V) == (1.0, {"seq_transform": 1.0})
    assert evaluate(p, inst, V) == evaluate(p, inst, V)


def test_grpo_improves_mod_arith_from_random_start():
    cfg = small_config(**{
        "env.family": "mod_arith", "env.eval_size": 200, "objective.variant": "grpo",
        "schedule.rollout_batch": 16, "schedule.group_size": 8, "schedule.mini_batch": 16,
        "schedule.max_steps": 50, "schedule.eval_every": 50, "schedule.learning_rate": 0.5,
        "telemetry.enabled": False})
    rows = run_experiment(cfg, "/tmp/lpreg_test_modarith")
    acc = [r.eval_accuracy for r in rows if r.eval_accuracy is not None]
    assert acc[-1] > acc[0]


def test_max_steps_zero_emits_only_baseline_row(tmp_path):
    rows = run_experiment(small_config(**{"schedule.max_steps": 0}), tmp_path)
    assert len(rows) == 1 and rows[0].step == 0 and rows[0].eval_accuracy is not None
    assert len(read_metrics(tmp_path / "metrics.csv")) == 1


def test_one_row_per_step(tmp_path):
    rows = run_experiment(small_config(), tmp_path)
    assert [r.step for r in rows] == list(range(0, 7))
    assert [r.step for r in rows if r.eval_accuracy is not None] == [0, 3, 6]
    assert sorted(p.name for p in (tmp_path / "ckpt").iterdir()) == [
        "step_000000.ckpt", "step_000003.ckpt", "step_000006.ckpt"]


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = small_config(**{"schedule.optimizer": "adam", "schedule.learning_rate": 0.01})
    run_experiment(cfg, tmp_path / "full")
    run_experiment(cfg, tmp_path / "cut", stop_after=4)
    run_experiment(cfg, tmp_path / "cut", resume=tmp_path / "cut" / "ckpt" / "step_000003.ckpt")
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "cut" / "metrics.csv").read_bytes()
    assert (tmp_path / "full" / "probes.jsonl").read_bytes() == (tmp_path / "cut" / "probes.jsonl").read_bytes()


def test_resume_rejects_other_config(tmp_path):
    run_experiment(small_config(), tmp_path / "a")
    with pytest.raises(ValueError, match="different config"):
        run_experiment(small_config(**{"objective.beta": 0.5}), tmp_path / "b",
                       resume=tmp_path / "a" / "ckpt" / "step_000003.ckpt")


def test_variant_echoes_differ_only_in_variant(tmp_path):
    base = small_config(**{"schedule.max_steps": 0})
    run_experiment(base, tmp_path / "lp")
    run_experiment(base.replace(**{"objective.variant": "grpo"}), tmp_path / "grpo")
    a = json.loads((tmp_path / "lp" / "config.json").read_text())
    b = json.loads((tmp_path / "grpo" / "config.json").read_text())
    assert a["objective"].pop("variant") == "lp_reg" and b["objective"].pop("variant") == "grpo"
    assert a == b


def test_config_round_trip_and_field_path_errors(tmp_path):
    cfg = ExperimentConfig()
    dump_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg
    with pytest.raises(ConfigError, match="schedule.mini_batch"):
        from_dict({"schedule": {"mini_batch": "eight"}})
    with pytest.raises(ConfigError, match="objective.betta"):
        from_dict({"objective": {"betta": 1.0}})
    with pytest.raises(ConfigError, match="schedule"):
        from_dict({"schedule": {"rollout_batch": 10, "mini_batch": 3}})
    with pytest.raises(ConfigError, match="objective.threshold_rule"):
        from_dict({"objective": {"threshold_rule": {"kind": "top_k", "value": 0.1}}})


def test_schedule_invariants():
    assert TrainSchedule(regime="on_policy").updates_per_rollout == 1
    assert TrainSchedule().updates_per_rollout == 8
    with pytest.raises(ValueError):
        TrainSchedule(group_size=1)


def test_shipped_configs_load():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for path in sorted(root.glob("*.json")):
        if path.stem.startswith("grid_"):
            continue
        load_config(path)
