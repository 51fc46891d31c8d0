import json
import warnings

import numpy as np
import pytest
import torch

from tokenprune.atp import AtpPlan
from tokenprune.decoder import ModelConfig, read_checkpoint
from tokenprune.flops import FlopsSpec, model_reduction
from tokenprune.harness.config import RunConfig
from tokenprune.harness.data import gen_dataset
from tokenprune.harness.evaluate import evaluate, recount_average_tokens
from tokenprune.harness.sweep import (
    apply_setting,
    clamp_schedule,
    fixed_plan,
    matched_schedules,
    ratio_schedule,
    summarize,
    sweep,
)
from tokenprune.harness.train import DivergenceError, load_model, train
from tokenprune.objective import BudgetConfig, average_token_count

TINY = ModelConfig(n_layers=3, d_model=16, n_heads=2, d_ff=32)


def tiny(**kw) -> RunConfig:
    base = dict(model=TINY, plan=AtpPlan(sites=(1, 2)), epochs=1, n_train=32, n_eval=24,
                batch_size=8, warmup_steps=2)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def data():
    return gen_dataset(0, 32), gen_dataset(0, 24, start=10_000)


def test_config_round_trip(tmp_path):
    cfg = tiny(budget=BudgetConfig(lambda_atp=0.1), freeze_model=True, pretrain_epochs=2,
               precision="float32")
    assert RunConfig.from_json(cfg.to_json()) == cfg
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg
    no_plan = cfg.with_(plan=None)
    assert RunConfig.from_json(no_plan.to_json()) == no_plan


def test_config_rejects_unknown_keys():
    doc = tiny().to_dict()
    doc["bogus"] = 1
    with pytest.raises(ValueError):
        RunConfig.from_dict(doc)


def test_training_is_deterministic(data, tmp_path):
    a = train(tiny(), data[0], out_dir=tmp_path / "a")
    b = train(tiny(), data[0], out_dir=tmp_path / "b")
    assert a.log == b.log
    _, ka = read_checkpoint(tmp_path / "a" / "checkpoint.npz")
    _, kb = read_checkpoint(tmp_path / "b" / "checkpoint.npz")
    assert ka.keys() == kb.keys()
    assert all(np.array_equal(ka[k], kb[k]) for k in ka)
    assert (tmp_path / "a" / "train_log.jsonl").read_text() == (tmp_path / "b" / "train_log.jsonl").read_text()
    assert RunConfig.load(tmp_path / "a" / "config.json") == tiny()


def test_log_fields(data):
    model = train(tiny(), data[0])
    assert len(model.log) == 4
    assert {"step", "epoch", "loss", "ntp", "atp", "target", "n_bar"} <= set(model.log[0])


def test_freeze_model_keeps_decoder(data):
    cfg = tiny(freeze_model=True)
    from tokenprune.harness.train import build_model

    before = {k: v.clone() for k, v in build_model(cfg)[0].state_dict().items()}
    model = train(cfg, data[0])
    after = model.decoder.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    head_before = build_model(cfg)[1].state_dict()
    assert any(not torch.equal(head_before[k], v) for k, v in model.pruner.state_dict().items())


def test_no_budget_pressure_keeps_all_tokens(data):
    cfg = tiny(budget=BudgetConfig(lambda_atp=0.0, lambda_target=0.0),
               plan=AtpPlan(sites=(1, 2), head_init_bias=-6.0))
    model = train(cfg, data[0])
    assert all(r["n_bar"] > 63.0 for r in model.log)


def test_divergence_aborts(data):
    cfg = tiny(lr_model=float("nan"))
    with pytest.raises((DivergenceError, ValueError, ArithmeticError)):
        train(cfg.with_(epochs=2), data[0])


def test_pretrain_stage_is_cached(data, tmp_path):
    cfg = tiny(pretrain_epochs=1)
    a = train(cfg, data[0], cache_dir=tmp_path)
    assert len(list(tmp_path.glob("base-*.npz"))) == 1
    b = train(cfg, data[0], cache_dir=tmp_path)
    assert a.log == b.log
    assert [r["stage"] for r in a.log] == ["pretrain"] * 4 + ["train"] * 4
    for k, v in a.decoder.state_dict().items():
        assert torch.equal(v, b.decoder.state_dict()[k])


def test_budget_only_changes_share_a_base(data, tmp_path):
    cfg = tiny(pretrain_epochs=1)
    train(cfg, data[0], cache_dir=tmp_path)
    other = apply_setting(cfg, "lambda_atp", 0.3).with_(lr_atp=0.5, n_eval=7)
    train(other, data[0], cache_dir=tmp_path)
    assert len(list(tmp_path.glob("base-*.npz"))) == 1
    train(cfg.with_(lr_model=1e-3), data[0], cache_dir=tmp_path)
    assert len(list(tmp_path.glob("base-*.npz"))) == 2


def test_float32_run(data):
    model = train(tiny(precision="float32"), data[0])
    assert model.decoder.lm_head.dtype == torch.float32
    m = evaluate(model, data[1], "hard")
    assert 0.0 <= m["accuracy"] <= 1.0


def test_eval_without_pruning_reports_all_tokens(data):
    model = train(tiny(plan=None), data[0])
    for mode in ("soft", "hard"):
        m = evaluate(model, data[1], mode)
        assert m["n_bar"] == 64.0
        assert m["flops_reduction"] == 0.0


def test_hard_nbar_matches_layer_walk(data, tmp_path):
    model = train(tiny(), data[0], out_dir=tmp_path)
    m = evaluate(load_model(tmp_path / "checkpoint.npz"), data[1], "hard")
    retained = [r["retained"] for r in m["records"]]
    recount = recount_average_tokens(retained, [1, 2], 3, 64)
    assert [r["n_bar"] for r in m["records"]] == recount
    assert m["n_bar"] == float(np.mean(recount))
    assert all(r["retained"][1] <= r["retained"][0] for r in m["records"])
    flops = [model_reduction(FlopsSpec(3, 16, 32, 64, list(zip([1, 2], map(int, r))))).pruned_total
             for r in retained]
    base = model_reduction(FlopsSpec(3, 16, 32, 64, [])).baseline_total
    assert m["flops_reduction"] == 1 - float(np.mean(flops)) / base


def test_eval_reports_splits(data):
    model = train(tiny(), data[0])
    m = evaluate(model, data[1], "hard")
    for key in ("accuracy_fine", "accuracy_coarse", "n_bar_fine", "n_bar_coarse",
                "flops_reduction_fine", "flops_reduction_coarse"):
        assert key in m
    with pytest.raises(ValueError):
        evaluate(model, data[1], "bogus")


def test_loaded_checkpoint_reproduces_metrics(data, tmp_path):
    model = train(tiny(), data[0], out_dir=tmp_path)
    a = evaluate(model, data[1], "hard")
    b = evaluate(load_model(tmp_path / "checkpoint.npz"), data[1], "hard")
    assert a == b


# ---------------------------------------------------------------- baselines and sweeps

def test_clamp_schedule_warns():
    with pytest.warns(UserWarning):
        assert clamp_schedule([(1, 20), (4, 30)], 64) == [(1, 20), (4, 20)]
    with pytest.warns(UserWarning):
        assert clamp_schedule([(1, 80)], 64) == [(1, 64)]
    with pytest.raises(ValueError):
        clamp_schedule([(1, 0)], 64)


def test_full_keep_baseline_equals_unpruned(data):
    plain = train(tiny(plan=None), data[0])
    full = train(tiny(plan=fixed_plan([(1, 64), (2, 64)], 64)), data[0])
    a, b = evaluate(plain, data[1], "hard"), evaluate(full, data[1], "hard")
    assert a["accuracy"] == b["accuracy"]
    assert b["n_bar"] == 64.0
    assert [r["pred"] for r in a["records"]] == [r["pred"] for r in b["records"]]


def test_fixed_baseline_keeps_exact_counts(data):
    model = train(tiny(plan=fixed_plan([(1, 10), (2, 5)], 64)), data[0])
    m = evaluate(model, data[1], "hard")
    assert all(r["retained"] == [10.0, 5.0] for r in m["records"])
    assert m["n_bar"] == average_token_count([1, 2], [10, 5], 3, 64)


def test_ratio_schedule_arithmetic():
    sched = ratio_schedule([1, 4, 6], 0.5, 64)
    assert sched == [(1, 32), (4, 16), (6, 8)]
    sites, keeps = zip(*sched)
    assert average_token_count(list(sites), list(keeps), 8, 64) == (64 + 3 * 32 + 2 * 16 + 2 * 8) / 8


def test_matched_schedules_hit_target():
    found = matched_schedules([1, 4, 6], 64, 8, 15.0)
    assert found
    for sched in found.values():
        sites, keeps = zip(*sched)
        assert list(keeps) == sorted(keeps, reverse=True)
        assert abs(average_token_count(list(sites), list(keeps), 8, 64) - 15.0) <= 0.75


def test_apply_setting():
    cfg = tiny()
    assert apply_setting(cfg, "lambda_atp", 0.3).budget.lambda_atp == 0.3
    assert apply_setting(cfg, "n_target", 12).budget.n_target == 12
    assert apply_setting(cfg, "sites", [2]).plan.sites == (2,)
    fixed = cfg.with_(plan=fixed_plan([(1, 16)], 64))
    assert apply_setting(fixed, "sites", [2]).plan.keep_counts == (16,)
    with pytest.raises(ValueError):
        apply_setting(cfg, "lr", 1)


def test_sweep_rows_and_duplicates(tmp_path):
    cfg = tiny(n_train=16, n_eval=12)
    rows = sweep(cfg, "lambda_atp", [0.0, 0.5, 0.0], out_dir=tmp_path)
    assert len(rows) == 9
    assert {r["split"] for r in rows} == {"all", "fine", "coarse"}
    first, third = rows[0:3], rows[6:9]
    assert first == third
    assert (tmp_path / "sweep.csv").exists() and (tmp_path / "sweep_summary.csv").exists()
    summary = summarize(rows)
    assert len(summary) == 6
    with pytest.raises(ValueError):
        sweep(cfg, "lambda_atp", [0.1])
