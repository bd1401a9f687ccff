"""Optimizer, flow loss, and training-loop behavior."""

import math
import os

import numpy as np
import pytest

import oracles as orc
from catn import autodiff as ad
from catn import checkpoint as ckpt
from catn import corpus as cp
from catn import scenario as sc
from catn import synth
from catn import training as tr
from catn.autodiff import Graph, Tensor
from catn.errors import ConfigError, DataError, DivergenceError
from catn.evaluation import mse_over_pairs
from catn.model import HyperParams, ModelParams
from catn.training import Adam, TrainConfig, train, write_history

TINY = HyperParams(d=8, n=6, s=3, k=4, M=2, l=48, keep_prob=1.0, lam=0.0)


def _setup(split_seed=0, l=48):
    """Small two-topic transfer scenario plus its document store."""
    source, target, _ = synth.generate(6, 4, 2, 11)
    ccfg = cp.CorpusConfig(l=l, vocab_cap=1000, df_cap=0.9, seed=0)
    vocab = cp.build_vocabulary(source + target, ccfg)
    scen = sc.split_scenario(source, target, 1.0, split_seed)
    store = cp.DocumentStore(vocab, ccfg, source, scen.training_visible_target(),
                             scen.overlap_users, aux_seed=split_seed)
    return scen, store


def _tc(**kw):
    base = dict(learning_rate=0.01, batch_size=8, lam=0.0, max_epochs=4,
                patience=10, seed=3, variant="full")
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------- config


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(patience=0)
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(variant="bogus")


# ------------------------------------------------------------------ loss


def _loss_params(seed=0, variant="full"):
    return ModelParams.build(TINY, 30, seed, variant)


def test_loss_zero_when_predictions_match():
    params = _loss_params()
    pairs = [("u", "i", 2.0), ("v", "j", 4.5)]
    preds = Tensor(np.array([2.0, 4.5]))
    assert float(tr.loss(pairs, preds, params, 0.0, "target_flow").values) == 0.0


def test_loss_is_mean_squared_error():
    params = _loss_params()
    pairs = [("u", "i", 1.0), ("v", "j", 3.0)]
    preds = Tensor(np.array([2.0, 3.0]))  # errors 1 and 0
    assert float(tr.loss(pairs, preds, params, 0.0, "target_flow").values) == 0.5


def test_loss_penalty_matches_oracle_and_skips_biases():
    params = _loss_params(seed=5)
    rng = np.random.default_rng(8)
    ratings = rng.uniform(1, 5, size=6)
    preds = rng.uniform(1, 5, size=6)
    pairs = [("u%d" % j, "i%d" % j, float(r)) for j, r in enumerate(ratings)]
    lam = 0.37
    got = float(tr.loss(pairs, Tensor(preds), params, lam, "target_flow").values)
    want = orc.mse_ref(ratings, preds) + orc.l2_penalty_ref(
        [t.values for t in params.regularized_for_flow("target_flow")], lam)
    np.testing.assert_allclose(got, want, rtol=1e-12)

    # bias tables never enter the penalty
    params.user_bias["target"]["whale"] = 1e9
    params.item_bias["source"]["anchor"] = -1e9
    again = float(tr.loss(pairs, Tensor(preds), params, lam, "target_flow").values)
    assert again == got


def test_loss_empty_batch_raises():
    with pytest.raises(DataError):
        tr.loss([], Tensor(np.array([])), _loss_params(), 0.0, "target_flow")


def test_penalty_gradient_is_two_lambda_theta():
    params = _loss_params(seed=2)
    pairs = [("u", "i", 3.0)]
    lam = 0.25
    with Graph() as g:
        total = tr.loss(pairs, Tensor(np.array([3.0])), params, lam, "target_flow")
        g.backward(total)
    checked = 0
    for t in params.regularized_for_flow("target_flow"):
        np.testing.assert_allclose(t.grad, 2.0 * lam * t.values, atol=1e-14)
        checked += 1
    assert checked >= 5


# ------------------------------------------------------------------ adam


def test_adam_matches_scalar_oracle():
    adam = Adam(lr=0.02, beta1=0.9, beta2=0.999, eps=1e-8)
    rng = np.random.default_rng(4)
    values = rng.normal(size=3)
    mirror = values.copy()
    m = np.zeros(3)
    v = np.zeros(3)
    for t in range(1, 21):
        g = rng.normal(size=3)
        adam.step_array("w", values, g)
        for j in range(3):
            m[j], v[j], delta = orc.adam_step_ref(
                m[j], v[j], g[j], t, 0.02, 0.9, 0.999, 1e-8)
            mirror[j] += delta
        np.testing.assert_allclose(values, mirror, rtol=1e-14)


def test_adam_drives_quadratic_to_minimum():
    adam = Adam(lr=0.05)
    x = 10.0
    for step in range(2000):
        x = adam.step_scalar("x", x, 2.0 * (x - 3.0))
        if abs(x - 3.0) < 1e-6:
            break
    assert abs(x - 3.0) < 1e-6


def test_adam_zero_gradient_is_noop_from_fresh_state():
    adam = Adam(lr=0.5)
    values = np.array([1.0, -2.0, 0.25])
    before = values.copy()
    adam.step_array("w", values, np.zeros(3))
    np.testing.assert_array_equal(values, before)


def test_adam_state_is_per_key():
    adam = Adam(lr=0.1)
    a = np.array([1.0])
    b = np.array([1.0])
    adam.step_array("a", a, np.array([1.0]))
    adam.step_array("a", a, np.array([1.0]))
    adam.step_array("b", b, np.array([1.0]))
    assert adam._t["a"] == 2 and adam._t["b"] == 1
    assert a[0] != b[0]


def test_adam_skips_tensor_without_gradient():
    adam = Adam(lr=0.5)
    t = ad.param(np.array([1.0, 2.0]))
    before = t.values.copy()
    adam.step_tensor("p", t)  # no grad accumulated yet
    np.testing.assert_array_equal(t.values, before)


# ----------------------------------------------------------- train loop


def test_train_runs_and_reports_finite_history():
    scen, store = _setup()
    params, history = train(scen, store, TINY, _tc(max_epochs=3), clock=lambda: 0.0)
    assert [row[0] for row in history] == [1, 2, 3]
    for _, ls, lt, vm, ws in history:
        assert math.isfinite(ls) and math.isfinite(lt) and math.isfinite(vm)
        assert ws == 0.0


def test_train_same_seed_is_bit_identical():
    scen, store = _setup()
    p1, h1 = train(scen, store, TINY, _tc(), clock=lambda: 0.0)
    p2, h2 = train(scen, store, TINY, _tc(), clock=lambda: 0.0)
    assert h1 == h2
    d1, d2 = p1.to_param_dict(), p2.to_param_dict()
    assert sorted(d1) == sorted(d2)
    for key in d1:
        np.testing.assert_array_equal(d1[key], d2[key])


def test_train_different_seed_differs():
    scen, store = _setup()
    _, h1 = train(scen, store, TINY, _tc(seed=3), clock=lambda: 0.0)
    _, h2 = train(scen, store, TINY, _tc(seed=4), clock=lambda: 0.0)
    assert h1 != h2


def test_final_params_reproduce_best_validation_mse():
    scen, store = _setup()
    params, history = train(scen, store, TINY, _tc(max_epochs=8))
    best = min(row[3] for row in history)
    got = mse_over_pairs(params, store, scen.heldout_pairs("validation"))
    assert abs(got - best) < 1e-12


def test_early_stopping_halts_after_patience():
    scen, store = _setup()
    # lr large enough to bounce around the optimum: valid MSE stops improving
    params, history = train(scen, store, TINY,
                            _tc(max_epochs=60, patience=3, learning_rate=0.3))
    assert len(history) < 60
    best_idx = min(range(len(history)), key=lambda j: history[j][3])
    assert len(history) - 1 - best_idx >= 3


def test_both_flows_update_and_pad_row_stays_zero():
    scen, store = _setup()
    params, _ = train(scen, store, TINY, _tc(max_epochs=1),
                      train_embeddings=True)
    fresh = ModelParams.build(TINY, len(store.vocab), 3, "full")
    assert not np.array_equal(params.flowA.conv_W.values, fresh.flowA.conv_W.values)
    assert not np.array_equal(params.flowB.conv_W.values, fresh.flowB.conv_W.values)
    np.testing.assert_array_equal(params.embeddings.values[0], 0.0)
    assert not np.array_equal(params.embeddings.values, fresh.embeddings.values)


def test_bias_fallbacks_are_table_means_after_training():
    scen, store = _setup()
    params, _ = train(scen, store, TINY, _tc(max_epochs=2))
    for domain in ("source", "target"):
        table = params.user_bias[domain]
        assert set(table) == set(scen.train_overlap_users)
        want = sum(table.values()) / len(table)
        assert abs(params.bias_fallback[domain]["user"] - want) < 1e-15


def test_train_writes_matching_checkpoint(tmp_path):
    scen, store = _setup()
    out = tmp_path / "run"
    params, history = train(scen, store, TINY, _tc(max_epochs=2), out_dir=str(out))
    loaded = ckpt.load_params(str(out / "checkpoint.bin"))
    live = params.to_param_dict()
    assert sorted(loaded) == sorted(live)
    for key in live:
        np.testing.assert_array_equal(loaded[key], np.asarray(live[key]))
    lines = (out / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss_source,train_loss_target,valid_mse,wall_seconds"
    assert len(lines) == len(history) + 1


def test_divergent_loss_raises():
    scen, store = _setup()
    params = ModelParams.build(TINY, len(store.vocab), 0, "full")
    pairs = [p for p in scen.training_pairs("target_flow")][:2]
    pairs[0] = (pairs[0][0], pairs[0][1], float("inf"))
    params.ensure_bias("user", "target", [p[0] for p in pairs])
    params.ensure_bias("item", "target", [p[1] for p in pairs])
    with pytest.raises(DivergenceError):
        tr._flow_step(params, store, pairs, "target_flow", _tc(), Adam(),
                      np.random.default_rng(0))


def test_history_csv_round_trips_floats(tmp_path):
    rows = [(1, 0.1, 1 / 3, 2.0000000000000004, 0.0),
            (2, float("nan"), 5e-324, 1e308, 123.456)]
    path = tmp_path / "h.csv"
    write_history(str(path), rows)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    for row, line in zip(rows, lines[1:]):
        cells = line.split(",")
        assert int(cells[0]) == row[0]
        for want, cell in zip(row[1:], cells[1:]):
            got = float(cell)
            assert (math.isnan(want) and math.isnan(got)) or got == want


def test_variants_all_train_one_epoch():
    scen, store = _setup()
    for variant in ("basic", "attn", "separate", "full"):
        params, history = train(scen, store, TINY,
                                _tc(max_epochs=1, variant=variant))
        assert len(history) == 1
        assert math.isfinite(history[0][3])
        assert params.variant == variant
