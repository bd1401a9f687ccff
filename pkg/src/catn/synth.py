"""Synthetic two-domain review generator with a planted topic pairing.

Each domain gets ``m_true`` disjoint topic word groups plus one word group
per rating level, so the rating a user gives is exactly recoverable from
review text at noise 0. Items cycle through topics. User preference
vectors cycle through all m_true! permutations of the same evenly spaced
level multiset (1.0 down to 0.0) in a seed-shuffled order, a
target-domain topic inheriting its level from its paired source topic
through a planted permutation. Two consequences drive the desk-scale
checks: all users share one mean rating, so per-user bias terms carry no
signal and prediction quality rests entirely on routing review content
across domains; and every profile class is populated as evenly as
possible, so a random cold-start holdout rarely contains a preference
pattern absent from training.

Ratings are an affine map of the level (1 + 4·level) snapped to the
nearest discrete star value; noise perturbs before snapping.

Background (single-domain) users exist at every preference level so every
(item, rating) cell has same-rating reviews by non-overlapping strangers —
the stand-in document path always finds candidates at noise 0.

A sidecar truth file records the permutation, item topics, and user
preference vectors for the transfer-recovery checks.
"""

import hashlib
import itertools
import json
import os

import numpy as np

from .corpus import Interaction

RATING_LEVELS = (1.0, 2.0, 3.0, 5.0)
_TOPIC_WORDS = 6
_RATE_WORDS = 4
_FILLER_WORDS = ("the", "and", "was", "very")
_GEN_STREAM = 0x5E17


def pref_levels(m_true):
    """The shared level multiset: 1.0 down to 0.0, evenly spaced."""
    if m_true == 1:
        return [1.0]
    return [1.0 - j / (m_true - 1) for j in range(m_true)]


def _rating_for(pref):
    return 1.0 + 4.0 * pref


def topic_words(domain, topic):
    tag = "s" if domain == "source" else "t"
    return [f"{tag}topic{topic}w{w}" for w in range(_TOPIC_WORDS)]


def rate_words(domain, rating_level):
    tag = "s" if domain == "source" else "t"
    return [f"{tag}rate{int(round(rating_level))}w{w}" for w in range(_RATE_WORDS)]


def _review_text(seed, domain, topic, rating_level):
    """Canonical review for a (domain, topic, level) cell.

    Deterministic per cell: two users with the same preference level write
    the same review, so documents carry no user-identity signal — the only
    way to fit held-out users is the topic/level structure itself.
    """
    key = hashlib.blake2b(
        f"{int(seed)}|{domain}|{topic}|{rating_level!r}".encode(), digest_size=8
    ).digest()
    rng = np.random.default_rng(int.from_bytes(key, "little"))
    pool_t = topic_words(domain, topic)
    pool_r = rate_words(domain, rating_level)
    words = [pool_t[int(rng.integers(len(pool_t)))] for _ in range(4)]
    words += [pool_r[int(rng.integers(len(pool_r)))] for _ in range(3)]
    words.append(_FILLER_WORDS[int(rng.integers(len(_FILLER_WORDS)))])
    perm = rng.permutation(len(words))
    return " ".join(words[j] for j in perm)


def _profile_table(rng, m_true):
    """All m_true! level assignments, in a seed-shuffled cycling order."""
    levels = pref_levels(m_true)
    perms = sorted(itertools.permutations(range(m_true)))
    order = rng.permutation(len(perms))
    return [[float(levels[j]) for j in perms[int(p)]] for p in order]


def generate(n_users, n_items, m_true, seed, noise=0.0, background_per_level=2):
    """Build (source interactions, target interactions, truth dict).

    ``n_users`` overlap users review every item in both domains;
    ``n_items`` items per domain. ``m_true`` of 1 degenerates to constant
    ratings (every preference forced to the top level), useful as a
    sanity case.
    """
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, _GEN_STREAM])
    pi = [int(x) for x in rng.permutation(m_true)]  # source topic c -> target topic pi[c]
    item_topic = {
        "source": {f"si{j:03d}": j % m_true for j in range(n_items)},
        "target": {f"ti{j:03d}": j % m_true for j in range(n_items)},
    }
    users = [f"u{i:03d}" for i in range(n_users)]
    profiles = _profile_table(rng, m_true)
    prefs_source = {}
    prefs_target = {}
    for i, u in enumerate(users):
        ps = list(profiles[i % len(profiles)])
        pt = [0.0] * m_true
        for c in range(m_true):
            pt[pi[c]] = ps[c]
        prefs_source[u] = ps
        prefs_target[u] = pt

    def emit(domain, u, prefs, out):
        for item, topic in sorted(item_topic[domain].items()):
            r = _rating_for(prefs[topic])
            if noise > 0:
                r += float(rng.uniform(-noise, noise))
            star = min(RATING_LEVELS, key=lambda lv: abs(lv - r))
            out.append(Interaction(u, item, star,
                                   _review_text(seed, domain, topic, star)))

    source = []
    target = []
    for u in users:
        emit("source", u, prefs_source[u], source)
        emit("target", u, prefs_target[u], target)

    # background users: constant preference covering every star value,
    # one domain each
    bg_prefs = [(lv - 1.0) / 4.0 for lv in RATING_LEVELS]
    n_bg = background_per_level * len(bg_prefs)
    for domain, prefix in (("source", "bs"), ("target", "bt")):
        out = source if domain == "source" else target
        for b in range(n_bg):
            pref = bg_prefs[b % len(bg_prefs)]
            bu = f"{prefix}{b:03d}"
            emit(domain, bu, [pref] * m_true, out)

    truth = {
        "pi": pi,
        "m_true": m_true,
        "seed": int(seed),
        "noise": noise,
        "item_topic": item_topic,
        "user_prefs_source": prefs_source,
        "user_prefs_target": prefs_target,
        "overlap_users": users,
        "topic_words": {
            "source": [topic_words("source", c) for c in range(m_true)],
            "target": [topic_words("target", c) for c in range(m_true)],
        },
    }
    return source, target, truth


def write_dataset(out_dir, source, target, truth):
    from .corpus import save_interactions

    os.makedirs(out_dir, exist_ok=True)
    save_interactions(os.path.join(out_dir, "source.jsonl"), source)
    save_interactions(os.path.join(out_dir, "target.jsonl"), target)
    with open(os.path.join(out_dir, "synth_truth.json"), "w", encoding="utf-8") as f:
        json.dump(truth, f, indent=2, sort_keys=True)
        f.write("\n")
