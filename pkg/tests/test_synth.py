"""Synthetic two-domain generator: planted structure and determinism."""

import itertools
import json
import math
from collections import Counter

import pytest

from catn import corpus as cp
from catn import synth
from catn.corpus import tokenize
from catn.synth import RATING_LEVELS, generate, pref_levels, rate_words, topic_words


def _by_user_item(inters):
    return {(it.user_id, it.item_id): it for it in inters}


# ------------------------------------------------------------ structure


def test_single_topic_degenerates_to_constant_ratings():
    source, target, truth = generate(5, 4, 1, seed=3)
    overlap = set(truth["overlap_users"])
    stars = {it.rating for it in source + target if it.user_id in overlap}
    assert stars == {5.0}


def test_ratings_follow_planted_preferences_exactly():
    source, target, truth = generate(8, 7, 3, seed=5)
    for domain, inters, prefs in (
        ("source", source, truth["user_prefs_source"]),
        ("target", target, truth["user_prefs_target"]),
    ):
        topics = truth["item_topic"][domain]
        for it in inters:
            if it.user_id not in prefs:
                continue
            want = 1.0 + 4.0 * prefs[it.user_id][topics[it.item_id]]
            assert it.rating == min(RATING_LEVELS, key=lambda lv: abs(lv - want))


def test_review_word_mix_is_four_topic_three_rate_one_filler():
    source, _, truth = generate(6, 5, 3, seed=2)
    topics = truth["item_topic"]["source"]
    for it in source[:40]:
        words = tokenize(it.review_text)
        assert len(words) == 8
        pool_t = set(topic_words("source", topics[it.item_id]))
        pool_r = set(rate_words("source", it.rating))
        counts = Counter(
            "topic" if w in pool_t else "rate" if w in pool_r else "filler"
            for w in words
        )
        assert counts == {"topic": 4, "rate": 3, "filler": 1}


def test_same_cell_reviews_are_identical_across_users():
    source, _, truth = generate(12, 6, 2, seed=9)
    by_cell = {}
    topics = truth["item_topic"]["source"]
    overlap = set(truth["overlap_users"])
    for it in source:
        if it.user_id in overlap:
            by_cell.setdefault((topics[it.item_id], it.rating),
                               set()).add(it.review_text)
    assert by_cell and all(len(texts) == 1 for texts in by_cell.values())


def test_profiles_cycle_through_every_permutation():
    _, _, truth = generate(20, 10, 3, seed=7)
    levels = pref_levels(3)
    all_profiles = {tuple(levels[j] for j in p)
                    for p in itertools.permutations(range(3))}
    counts = Counter(tuple(truth["user_prefs_source"][u])
                     for u in truth["overlap_users"])
    assert set(counts) == all_profiles
    assert max(counts.values()) - min(counts.values()) <= 1


def test_pairing_is_a_permutation_and_links_preferences():
    _, _, truth = generate(10, 5, 4, seed=1)
    pi = truth["pi"]
    assert sorted(pi) == list(range(4))
    for u in truth["overlap_users"]:
        ps = truth["user_prefs_source"][u]
        pt = truth["user_prefs_target"][u]
        for c in range(4):
            assert pt[pi[c]] == ps[c]


def test_item_topics_cycle():
    _, _, truth = generate(4, 9, 3, seed=0)
    for domain in ("source", "target"):
        topics = truth["item_topic"][domain]
        for item, topic in topics.items():
            assert topic == int(item[2:]) % 3


def test_all_users_share_one_mean_rating():
    source, target, truth = generate(12, 6, 3, seed=4)
    overlap = set(truth["overlap_users"])
    means = set()
    for u in overlap:
        rs = [it.rating for it in source + target if it.user_id == u]
        means.add(sum(rs) / len(rs))
    assert len(means) == 1


def test_background_users_cover_every_star_level():
    source, _, truth = generate(5, 4, 3, seed=6, background_per_level=2)
    overlap = set(truth["overlap_users"])
    bg = [it for it in source if it.user_id not in overlap]
    assert len({it.user_id for it in bg}) == 2 * len(RATING_LEVELS)
    for item in truth["item_topic"]["source"]:
        stars = {it.rating for it in bg if it.item_id == item}
        assert stars == set(RATING_LEVELS)


def test_interaction_counts():
    source, target, truth = generate(20, 10, 3, seed=7, background_per_level=2)
    # 20 overlap users + 8 background users, 10 items each, per domain
    assert len(source) == len(target) == (20 + 8) * 10
    assert len(truth["overlap_users"]) == 20


# ---------------------------------------------------------- determinism


def test_same_seed_reproduces_everything():
    a = generate(9, 6, 3, seed=13)
    b = generate(9, 6, 3, seed=13)
    assert a[0] == b[0] and a[1] == b[1] and a[2] == b[2]


def test_different_seeds_differ():
    a_src, _, a_truth = generate(9, 6, 3, seed=13)
    b_src, _, b_truth = generate(9, 6, 3, seed=14)
    assert (a_truth["pi"] != b_truth["pi"]
            or a_truth["user_prefs_source"] != b_truth["user_prefs_source"]
            or [it.review_text for it in a_src] != [it.review_text for it in b_src])


def test_noise_perturbs_but_stays_on_star_grid():
    source, _, truth = generate(10, 8, 3, seed=2, noise=1.5)
    assert {it.rating for it in source} <= set(RATING_LEVELS)
    clean, _, _ = generate(10, 8, 3, seed=2, noise=0.0)
    assert [it.rating for it in source] != [it.rating for it in clean]


def test_pref_levels_are_evenly_spaced_from_one_to_zero():
    assert pref_levels(1) == [1.0]
    assert pref_levels(2) == [1.0, 0.0]
    assert pref_levels(3) == [1.0, 0.5, 0.0]
    levels = pref_levels(5)
    steps = {round(levels[j] - levels[j + 1], 12) for j in range(4)}
    assert len(steps) == 1 and math.isclose(levels[0], 1.0) and levels[-1] == 0.0


# --------------------------------------------------------------- files


def test_write_dataset_round_trips(tmp_path):
    source, target, truth = generate(6, 4, 2, seed=8)
    synth.write_dataset(str(tmp_path), source, target, truth)
    assert cp.load_interactions(str(tmp_path / "source.jsonl")) == source
    assert cp.load_interactions(str(tmp_path / "target.jsonl")) == target
    back = json.loads((tmp_path / "synth_truth.json").read_text())
    assert back["pi"] == truth["pi"]
    assert back["item_topic"] == truth["item_topic"]
    assert back["user_prefs_source"] == truth["user_prefs_source"]
