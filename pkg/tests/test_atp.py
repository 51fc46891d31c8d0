import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tokenprune import numkit as nk
from tokenprune.atp import (
    AtpPlan,
    ImportanceScores,
    Pruner,
    SpatialGrid,
    ThresholdHead,
    VisionLayout,
    combine_redundant,
    cross_score,
    hard_prune,
    predict_thresholds,
    self_score,
    soft_masks,
    spatial_retained,
    spatial_score,
    topk_keep,
)
from tokenprune.decoder import Decoder, ModelConfig


def _layout(nv, nt, B=1, alive=None):
    if alive is None:
        alive = torch.ones(B, nv, dtype=torch.bool)
    return VisionLayout(nv, nt, torch.arange(nv), alive)


def _scores(s_red, s_sp, alive=None):
    s_red, s_sp = nk.tensor(s_red), nk.tensor(s_sp)
    if s_red.dim() == 1:
        s_red, s_sp = s_red[None], s_sp[None]
    if alive is None:
        alive = torch.ones_like(s_red, dtype=torch.bool)
    z = torch.zeros_like(s_red)
    return ImportanceScores(z, z, z, z, s_red, s_sp, alive)


# -- self / cross scores ----------------------------------------------------

def test_self_score_uniform():
    logits = torch.full((1, 2, 5, 5), 1.7, dtype=nk.DTYPE)
    assert self_score(logits, _layout(3, 2)).tolist() == [[1.7, 1.7, 1.7]]


def test_self_score_hand_average():
    logits = torch.zeros(1, 1, 3, 3, dtype=nk.DTYPE)
    logits[0, 0, :2, :2] = nk.tensor([[1, 3], [5, 7]])
    assert self_score(logits, _layout(2, 1)).tolist() == [[3.0, 5.0]]
    # the other reading averages over keys seen by each query
    assert self_score(logits, _layout(2, 1), direction="key").tolist() == [[2.0, 6.0]]


def test_self_score_shift_equivariant(rng):
    logits = nk.tensor(rng.normal(size=(2, 3, 7, 7)))
    base = self_score(logits, _layout(5, 2, B=2))
    torch.testing.assert_close(self_score(logits + 2.5, _layout(5, 2, B=2)), base + 2.5, rtol=0, atol=1e-14)


def test_self_score_averages_alive_queries_only():
    logits = torch.zeros(1, 1, 4, 4, dtype=nk.DTYPE)
    logits[0, 0, :3, :3] = nk.tensor([[1, 2, 3], [4, 5, 6], [100, 100, 100]])
    alive = torch.tensor([[True, True, False]])
    out = self_score(logits, _layout(3, 1, alive=alive))
    assert out[0, :2].tolist() == [2.5, 3.5]
    assert out[0, 2].item() == 2.5  # dead slot takes the alive minimum
    with pytest.raises(ValueError):
        self_score(logits, _layout(3, 1, alive=torch.zeros(1, 3, dtype=torch.bool)))


def test_cross_score_concentrated():
    probs = torch.zeros(1, 1, 4, 4, dtype=nk.DTYPE)
    probs[0, 0, 3, 0] = 1.0
    assert cross_score(probs, _layout(3, 1)).tolist() == [[1.0, 0.0, 0.0]]


def test_cross_score_hand_average():
    probs = torch.zeros(1, 2, 4, 4, dtype=nk.DTYPE)
    probs[0, :, 2, :2] = nk.tensor([0.3, 0.1])
    probs[0, :, 3, :2] = nk.tensor([0.5, 0.1])
    out = cross_score(probs, _layout(2, 2))
    np.testing.assert_allclose(out.numpy(), [[0.4, 0.1]], atol=1e-15)


def test_cross_score_needs_text():
    with pytest.raises(ValueError):
        cross_score(torch.zeros(1, 1, 3, 3, dtype=nk.DTYPE), _layout(3, 0))


def test_cross_score_sub_distribution(rng):
    model = Decoder(ModelConfig(n_layers=1, d_model=16, n_heads=2, d_ff=16, grid=(3, 3)))
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        seq = model.embed(torch.randint(8, (2, 9), generator=g), torch.randint(64, (2, 4), generator=g))
        out = model.layers[0](seq.embeddings, torch.ones(2, 13, dtype=nk.DTYPE), seq.positions)
        s = cross_score(out.attn_probs, _layout(9, 4, B=2))
        assert bool((s.sum(-1) <= 1 + 1e-12).all())


# -- combine ------------------------------------------------------------------

def test_combine_examples():
    assert combine_redundant(nk.tensor([0, 1]), nk.tensor([0, 1])).tolist() == [0, 1]
    assert combine_redundant(nk.tensor([2, 4]), nk.tensor([7, 7])).tolist() == [0.25, 0.75]


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.floats(0.01, 100), st.floats(-50, 50), st.integers(0, 2**31 - 1))
def test_combine_affine_invariant(n, a, b, seed):
    g = np.random.default_rng(seed)
    s_self, s_cross = nk.tensor(g.normal(size=n)), nk.tensor(g.uniform(size=n))
    base = combine_redundant(s_self, s_cross)
    torch.testing.assert_close(combine_redundant(s_self * a + b, s_cross), base, rtol=0, atol=1e-9)


def test_combine_dead_positions_are_zero():
    alive = torch.tensor([[True, False, True]])
    out = combine_redundant(nk.tensor([[1.0, 9.0, 3.0]]), nk.tensor([[0.2, 0.9, 0.1]]), alive)
    assert out.tolist() == [[0.5, 0.0, 0.5]]


# -- spatial ------------------------------------------------------------------

def test_spatial_scores_reference_grid():
    grid = SpatialGrid((8, 8), lambda_sample=3.0)
    assert grid.strides == (2, 4, 8)
    assert [r for _, r in grid.levels] == [1 / 4, 1 / 16, 1 / 64]
    s = spatial_score(grid).reshape(8, 8)
    assert s[0, 0].item() == 1 - 3 / 64 == 0.953125
    assert s[0, 4].item() == 0.8125
    assert s[0, 2].item() == 0.25
    assert s[1, 1].item() == 0.0
    assert bool(((s >= 0) & (s <= 1)).all())


def test_spatial_grid_validation():
    with pytest.raises(ValueError):
        SpatialGrid((8, 8), strides=(3,))
    with pytest.raises(ValueError):
        SpatialGrid((8, 8), lambda_sample=4.0)  # 4 * 1/4 = 1
    with pytest.raises(ValueError):
        SpatialGrid((8, 8), strides=(4, 2))


def test_spatial_levels_are_nested():
    grid = SpatialGrid((8, 8))
    sets = [grid.level_members(s) for s in grid.strides]
    for fine, coarse in zip(sets, sets[1:]):
        assert coarse < fine


# -- thresholds ---------------------------------------------------------------

def test_zero_head_gives_half():
    head = ThresholdHead(4, hidden=3)
    with torch.no_grad():
        for p in head.parameters():
            p.zero_()
    tr, ts = head(torch.rand(2, 4, dtype=nk.DTYPE), torch.rand(2, 4, dtype=nk.DTYPE))
    assert tr.tolist() == ts.tolist() == [0.5, 0.5]


def test_thresholds_hand_evaluated():
    head = ThresholdHead(2, hidden=1)
    with torch.no_grad():
        head.w_z.weight.copy_(nk.tensor([[0.5, -1.0, 2.0, 0.25]]))
        head.w_z.bias.zero_()
        head.head_r.weight.fill_(1.0)
        head.head_r.bias.zero_()
        head.head_s.weight.fill_(2.0)
        head.head_s.bias.zero_()
    sc = ImportanceScores(*(torch.zeros(1, 2, dtype=nk.DTYPE),) * 2, nk.tensor([[1.0, 0.0]]),
                          nk.tensor([[0.0, 1.0]]), *(torch.zeros(1, 2, dtype=nk.DTYPE),) * 2,
                          torch.ones(1, 2, dtype=torch.bool))
    tr, ts = predict_thresholds(head, sc)
    z = 0.5 * 1 + 0.25 * 1
    assert tr.item() == pytest.approx(1 / (1 + math.exp(-z)), abs=1e-15)
    assert ts.item() == pytest.approx(1 / (1 + math.exp(-2 * z)), abs=1e-15)
    assert torch.equal(predict_thresholds(head, sc)[0], tr)


# -- masks --------------------------------------------------------------------

def test_soft_mask_examples():
    st_ = soft_masks(_scores([0.3, 0.8], [0.0, 0.5]), 0.3, 0.5, 20.0, torch.ones(1, 2, dtype=nk.DTYPE))
    assert st_.mask_r[0, 0].item() == 0.5
    assert st_.mask_s[0, 1].item() == 0.5
    assert torch.equal(st_.mask_combined, torch.maximum(st_.mask_r, st_.mask_s))
    prev = nk.tensor([[0.0, 1.0]])
    st2 = soft_masks(_scores([0.9, 0.9], [0.9, 0.9]), 0.1, 0.1, 20.0, prev)
    assert st2.cumulative_mask[0, 0].item() == 0.0
    with pytest.raises(ValueError):
        soft_masks(_scores([0.1], [0.1]), 0.1, 0.1, 0.0, torch.ones(1, 1, dtype=nk.DTYPE))


def test_max_combination_example():
    assert nk.maximum(nk.tensor([0.2]), nk.tensor([0.9])).item() == 0.9


def test_hard_prune_examples():
    sc = _scores([0.9, 0.1, 0.4], [0.0, 0.8, 0.0])
    assert hard_prune(sc, 0.5, 0.5).tolist() == [[True, True, False]]
    assert hard_prune(sc, 0.0, 0.0).tolist() == [[True, True, True]]
    assert hard_prune(sc, 1.5, 1.5).tolist() == [[True, False, False]]


def test_hard_prune_respects_alive_set():
    sc = _scores([0.9, 0.1, 0.4], [0.0, 0.8, 0.0], alive=torch.tensor([[False, True, True]]))
    assert hard_prune(sc, 0.0, 0.0).tolist() == [[False, True, True]]
    assert hard_prune(sc, 2.0, 2.0).tolist() == [[False, False, True]]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_threshold_monotonicity(n, seed):
    g = np.random.default_rng(seed)
    sc = _scores(g.uniform(size=n), g.choice([0.0, 0.25, 0.8125, 0.953125], size=n))
    tr, ts = g.uniform(0, 1.2, size=2)
    dr, ds = g.uniform(0, 0.5, size=2)
    # the threshold rule itself: subsets
    base = hard_prune(sc, tr, ts, guard=False)
    assert bool((hard_prune(sc, tr + dr, ts, guard=False) <= base).all())
    assert bool((hard_prune(sc, tr, ts + ds, guard=False) <= base).all())
    # with the floor guard: raising theta_r still yields subsets, and the
    # retained count never grows in either direction
    guarded = hard_prune(sc, tr, ts)
    up_r, up_s = hard_prune(sc, tr + dr, ts), hard_prune(sc, tr, ts + ds)
    assert bool((up_r <= guarded).all())
    assert int(up_s.sum()) <= int(guarded.sum())
    if bool(hard_prune(sc, tr, ts + ds, guard=False).any()):
        assert bool((up_s <= guarded).all())


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.floats(200, 2000), st.integers(0, 2**31 - 1))
def test_soft_masks_approach_hard_decisions(n, T, seed):
    g = np.random.default_rng(seed)
    tr, ts = g.uniform(0.1, 0.9, size=2)
    # scores kept at least 0.05 away from their threshold
    off_r = g.uniform(0.05, 0.5, size=n) * g.choice([-1, 1], size=n)
    off_s = g.uniform(0.05, 0.5, size=n) * g.choice([-1, 1], size=n)
    sc = _scores(tr + off_r, ts + off_s)
    state = soft_masks(sc, tr, ts, T, torch.ones(1, n, dtype=nk.DTYPE))
    hard = ((sc.s_redundant >= tr) | (sc.s_spatial >= ts)).to(nk.DTYPE)
    assert float((state.mask_combined - hard).abs().max()) <= 1e-4


def test_spatial_sweep_gives_nested_grids():
    grid = SpatialGrid((8, 8), lambda_sample=3.0)
    everything = set(range(64))
    stride = {s: grid.level_members(s) for s in (2, 4, 8)}
    assert spatial_retained(grid, 0.0) == everything
    for theta in np.linspace(1e-9, 1.0, 401):
        got = spatial_retained(grid, float(theta))
        assert got in (stride[2], stride[4], stride[8], set())


def test_topk_ties_break_to_lower_index():
    s = nk.tensor([[0.5, 0.9, 0.5, 0.5, 0.1]])
    alive = torch.ones(1, 5, dtype=torch.bool)
    assert topk_keep(s, alive, 3).tolist() == [[True, True, True, False, False]]
    with pytest.warns(UserWarning):
        keep = topk_keep(s, torch.tensor([[True, False, True, False, False]]), 4)
    assert keep.tolist() == [[True, False, True, False, False]]


def test_plan_validation():
    with pytest.raises(ValueError):
        AtpPlan(sites=(4, 1))
    with pytest.raises(ValueError):
        AtpPlan(strategy="fixed")
    with pytest.raises(ValueError):
        AtpPlan(temperature=0)


# -- end-to-end properties ---------------------------------------------------

SMALL = ModelConfig(n_layers=4, d_model=32, n_heads=2, d_ff=64, grid=(4, 4))


def _run(mode, seed=0, B=2, plan=None):
    torch.manual_seed(seed)
    model = Decoder(SMALL, seed=seed)
    pruner = Pruner(plan or AtpPlan(sites=(1, 2, 3), strides=(2, 4)), SMALL.grid, seed=seed)
    g = torch.Generator().manual_seed(seed)
    seq = model.embed(torch.randint(8, (B, 16), generator=g), torch.randint(64, (B, 4), generator=g))
    return model, pruner, model(seq, pruner, mode)


def test_head_input_width_is_constant_across_sites():
    _, pruner, res = _run("infer", B=3)
    seen = []
    for site in pruner.sites_:
        site.head.w_z.register_forward_hook(lambda m, inp, out: seen.append(inp[0].shape[-1]))
    pruner2 = pruner
    model, _, _ = _run("infer", B=3)
    g = torch.Generator().manual_seed(0)
    seq = model.embed(torch.randint(8, (3, 16), generator=g), torch.randint(64, (3, 4), generator=g))
    model(seq, pruner2, "infer")
    assert seen and set(seen) == {2 * SMALL.n_vision}


def test_gradients_reach_threshold_heads():
    from tokenprune.objective import BudgetConfig, budget_loss
    # thresholds near 0.5 keep the spatial sigmoid away from saturation
    model, pruner, res = _run("train", plan=AtpPlan(sites=(1, 2, 3), strides=(2, 4), head_init_bias=0.0))
    parts = budget_loss(res, torch.tensor([[3], [5]]), [SMALL.n_vision + 3], BudgetConfig(n_vision_norm=16, n_target=4),
                        SMALL.n_layers, SMALL.n_vision)
    nk.backward(parts.total)
    for p in pruner.parameters():
        assert p.grad is not None and float(p.grad.abs().sum()) > 0


def test_cumulative_masks_non_increasing():
    _, _, res = _run("train", B=3)
    for a, b in zip(res.states, res.states[1:]):
        assert bool((b.cumulative_mask <= a.cumulative_mask + 1e-15).all())


def test_records_serialize():
    import json
    _, _, res = _run("infer")
    recs = res.states[0].to_records()
    assert len(recs) == 2
    json.dumps(recs)
    assert set(recs[0]) >= {"site", "theta_r", "theta_s", "retained", "s_redundant", "s_spatial"}
