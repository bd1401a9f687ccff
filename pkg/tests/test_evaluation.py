"""Cold-start MSE harness and explanation exports."""

import json

import numpy as np
import pytest

import oracles as orc
from catn import corpus as cp
from catn import scenario as sc
from catn import synth
from catn.corpus import Interaction
from catn.errors import DataError, LeakageError, MissingDocumentError
from catn.evaluation import (EvalReport, aspect_response_scores, evaluate,
                             explain_pair, export_correlation_heatmap_data,
                             load_heatmap_csv, match_aspects, mse_over_pairs,
                             predict_pairs, save_explanation, save_report,
                             word_attention_ranking)
from catn.model import HyperParams, ModelParams, correlation_for_flow, forward_pair

TINY = HyperParams(d=8, n=6, s=3, k=4, M=2, l=48, keep_prob=1.0, lam=0.0)


def _setup(split_seed=0):
    source, target, _ = synth.generate(6, 4, 2, 11)
    ccfg = cp.CorpusConfig(l=48, vocab_cap=1000, df_cap=0.9, seed=0)
    vocab = cp.build_vocabulary(source + target, ccfg)
    scen = sc.split_scenario(source, target, 1.0, split_seed)
    store = cp.DocumentStore(vocab, ccfg, source, scen.training_visible_target(),
                             scen.overlap_users, aux_seed=split_seed)
    params = ModelParams.build(TINY, len(vocab), 7, "full")
    return scen, store, params


def _zero_all(params):
    for _, t in params.named_graph_params():
        t.values[...] = 0.0
    return params


# ------------------------------------------------------------------- mse


def test_mse_matches_scalar_oracle():
    scen, store, params = _setup()
    pairs = scen.heldout_pairs("test")
    preds = predict_pairs(params, store, pairs)
    want = orc.mse_ref([p[2] for p in pairs], preds)
    np.testing.assert_allclose(mse_over_pairs(params, store, pairs), want,
                               rtol=1e-12)


def test_mse_of_constant_midpoint_predictor():
    scen, store, params = _setup()
    _zero_all(params)  # prediction collapses to the (zero) bias fallbacks
    pairs = [(u, i, 0.0) for u, i, _ in scen.heldout_pairs("test")]
    assert mse_over_pairs(params, store, pairs) == 0.0
    off = [(u, i, 2.0) for u, i, _ in pairs]
    assert mse_over_pairs(params, store, off) == 4.0


def test_mse_is_order_invariant():
    scen, store, params = _setup()
    pairs = scen.heldout_pairs("test")
    a = mse_over_pairs(params, store, pairs)
    b = mse_over_pairs(params, store, list(reversed(pairs)))
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_mse_batch_size_does_not_change_result():
    scen, store, params = _setup()
    pairs = scen.heldout_pairs("test")
    a = predict_pairs(params, store, pairs, batch_size=256)
    b = predict_pairs(params, store, pairs, batch_size=3)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_mse_requires_pairs():
    scen, store, params = _setup()
    with pytest.raises(DataError):
        mse_over_pairs(params, store, [])


# -------------------------------------------------------------- evaluate


def test_evaluate_reports_per_user_breakdown():
    scen, store, params = _setup()
    rep = evaluate(params, store, scen, split="test")
    assert set(rep.per_user_mse) == set(scen.coldstart_test_users)
    pairs = scen.heldout_pairs("test")
    assert rep.n_pairs == len(pairs)
    # overall mse is the pair-count weighted mean of the per-user numbers
    counts = {}
    for u, _, _ in pairs:
        counts[u] = counts.get(u, 0) + 1
    want = sum(rep.per_user_mse[u] * c for u, c in counts.items()) / len(pairs)
    np.testing.assert_allclose(rep.mse, want, rtol=1e-12)
    assert rep.split == "test" and rep.variant == "full"


def test_evaluate_rejects_leaky_scenario():
    scen, store, params = _setup()
    # scenario claiming a training user is also a cold-start test user
    leaky = sc.Scenario(
        scen.source_interactions, scen.target_interactions,
        scen.overlap_users,
        scen.train_overlap_users,
        frozenset(scen.train_overlap_users),  # test set == train set
        scen.coldstart_valid_users,
        scen.eta, scen.seed,
    )
    with pytest.raises(LeakageError):
        evaluate(params, store, leaky, split="test")


def test_evaluate_requires_nonempty_split():
    scen, store, params = _setup()
    empty = sc.Scenario(
        scen.source_interactions, scen.target_interactions,
        scen.overlap_users, scen.train_overlap_users,
        frozenset(), scen.coldstart_valid_users, scen.eta, scen.seed,
    )
    with pytest.raises(DataError):
        evaluate(params, store, empty, split="test")


def test_report_json_round_trip(tmp_path):
    rep = EvalReport(mse=0.25, n_pairs=8, per_user_mse={"u1": 0.25},
                     variant="full", eta=0.5, seed=3, split="validation")
    path = tmp_path / "report.json"
    save_report(str(path), rep)
    back = json.loads(path.read_text())
    assert back == {"mse": 0.25, "n_pairs": 8, "per_user_mse": {"u1": 0.25},
                    "variant": "full", "eta": 0.5, "seed": 3,
                    "split": "validation"}


# ------------------------------------------------------- word attention


def test_word_ranking_averages_and_breaks_ties_by_position():
    tokens = np.array([5, 7, 5, 9])
    mask = np.ones(4)
    beta = np.array([0.4, 0.3, 0.2, 0.1])
    words = {5: "plum", 7: "kiwi", 9: "fig"}
    out = word_attention_ranking(tokens, mask, beta, words, k_top=3)
    assert [w["word"] for w in out] == ["plum", "kiwi", "fig"]
    np.testing.assert_allclose(out[0]["avg_beta"], 0.3)
    np.testing.assert_allclose(out[1]["avg_beta"], 0.3)
    assert out[0]["positions"] == [0, 2]
    assert out[1]["positions"] == [1]
    assert out[2]["positions"] == [3]


def test_word_ranking_ignores_padding():
    tokens = np.array([5, 7, 0, 0])
    mask = np.array([1.0, 1.0, 0.0, 0.0])
    beta = np.array([0.5, 0.5, 0.0, 0.0])
    out = word_attention_ranking(tokens, mask, beta, {5: "a", 7: "b"}, k_top=5)
    assert {w["word"] for w in out} == {"a", "b"}


def test_word_ranking_k_top_truncates():
    tokens = np.arange(1, 7)
    mask = np.ones(6)
    beta = np.linspace(0.3, 0.05, 6)
    words = {j: f"w{j}" for j in range(1, 7)}
    out = word_attention_ranking(tokens, mask, beta, words, k_top=2)
    assert [w["word"] for w in out] == ["w1", "w2"]


# ----------------------------------------------------------- explanation


def test_explanation_of_zeroed_model_is_flat():
    scen, store, params = _setup()
    _zero_all(params)
    u = sorted(scen.coldstart_test_users)[0]
    expl = explain_pair(params, store, u, "ti000")
    assert expl["prediction"] == 0.0
    assert np.array_equal(np.array(expl["S"]), np.zeros((2, 2)))
    assert expl["argmax"] == [1, 1]
    # attention with zero logits is uniform over unmasked positions
    tokens, mask = store.user_doc(u, "source")
    n_live = int(mask.sum())
    for entry in expl["documents"]["user"]:
        for w in entry["top_words"]:
            np.testing.assert_allclose(w["avg_beta"], 1.0 / n_live, rtol=1e-12)


def test_explanation_argmax_is_one_based_cell_of_s():
    scen, store, params = _setup()
    _zero_all(params)
    # plant an S with its peak at source aspect 2, target aspect 1
    params.Vs.values[...] = np.eye(2, TINY.k)
    params.Vt.values[...] = np.eye(2, TINY.k)
    params.W.values[...] = 0.0
    params.W.values[1, 0] = 5.0
    S = correlation_for_flow(params, "target_flow").values
    assert S[1, 0] == 5.0
    u = sorted(scen.coldstart_test_users)[0]
    expl = explain_pair(params, store, u, "ti000")
    assert expl["argmax"] == [2, 1]


def test_explanation_decomposition_matches_forward():
    scen, store, params = _setup()
    u = sorted(scen.coldstart_test_users)[0]
    expl = explain_pair(params, store, u, "ti001")
    b_u = params.bias_value("user", "target", u)
    b_i = params.bias_value("item", "target", "ti001")
    np.testing.assert_allclose(np.mean(expl["S_r"]) + b_u + b_i,
                               expl["prediction"], atol=1e-12)
    pred, _ = forward_pair(
        params, store.user_doc(u, "source"), store.aux_doc(u, "source"),
        store.item_doc("ti001", "target", exclude_user=u), b_u, b_i,
        "target_flow", with_trace=False)
    np.testing.assert_allclose(expl["prediction"], pred, atol=1e-12)


def test_explanation_missing_documents_raise():
    scen, store, params = _setup()
    u = sorted(scen.coldstart_test_users)[0]
    with pytest.raises(MissingDocumentError):
        explain_pair(params, store, "nobody", "ti000")
    with pytest.raises(MissingDocumentError):
        explain_pair(params, store, u, "no-such-item")


def test_explanation_json_round_trip(tmp_path):
    scen, store, params = _setup()
    u = sorted(scen.coldstart_test_users)[0]
    expl = explain_pair(params, store, u, "ti000")
    path = tmp_path / "explain.json"
    save_explanation(str(path), expl)
    back = json.loads(path.read_text())
    assert back["user"] == u and back["item"] == "ti000"
    assert back["prediction"] == expl["prediction"]
    assert back["S"] == expl["S"]


# -------------------------------------------------------- aspect labels


def test_match_aspects_picks_strongest_injection():
    assert match_aspects(np.eye(3)) == {0: 0, 1: 1, 2: 2}
    anti = np.array([[0.0, 5.0], [5.0, 0.0]])
    assert match_aspects(anti) == {0: 1, 1: 0}
    # rectangular: fewer groups than aspects is fine
    assert match_aspects(np.array([[0.0, 9.0, 0.0]])) == {0: 1}
    with pytest.raises(DataError):
        match_aspects(np.zeros((3, 2)))


def test_match_aspects_is_injective_even_when_one_aspect_dominates():
    scores = np.array([[9.0, 1.0], [8.0, 0.0]])
    got = match_aspects(scores)
    assert sorted(got.values()) == [0, 1]
    # total 9+0=9 beats 1+8=9? tie -> first permutation found wins; both
    # injective. Make it unambiguous instead:
    scores = np.array([[9.0, 1.0], [8.0, 3.0]])
    assert match_aspects(scores) == {0: 0, 1: 1}


def test_aspect_response_is_zero_for_zeroed_model():
    scen, store, params = _setup()
    _zero_all(params)
    groups = [["stopic0w0", "stopic0w1"], ["stopic1w0"]]
    scores = aspect_response_scores(params, store.vocab, groups, "source")
    assert scores.shape == (2, 2)
    assert np.array_equal(scores, np.zeros((2, 2)))


def test_aspect_response_rejects_out_of_vocabulary_group():
    scen, store, params = _setup()
    with pytest.raises(DataError):
        aspect_response_scores(params, store.vocab, [["qqqq"]], "source")


# --------------------------------------------------------------- heatmap


def test_heatmap_of_zero_model_is_all_zeros(tmp_path):
    scen, store, params = _setup()
    _zero_all(params)
    path = tmp_path / "S.csv"
    S = export_correlation_heatmap_data(params, str(path))
    assert np.array_equal(S, np.zeros((2, 2)))
    assert np.array_equal(load_heatmap_csv(str(path)), np.zeros((2, 2)))


def test_heatmap_round_trip_is_bit_exact(tmp_path):
    scen, store, params = _setup()
    path = tmp_path / "S.csv"
    S = export_correlation_heatmap_data(params, str(path))
    back = load_heatmap_csv(str(path))
    assert np.array_equal(back, S)
    assert np.array_equal(S, correlation_for_flow(params, "target_flow").values)
