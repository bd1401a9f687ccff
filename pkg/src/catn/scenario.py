"""Cold-start scenario construction and batch composition.

Overlap users (present in both domains) are shuffled once per seed and cut
into test / validation / training pools; training then keeps a seeded
η-fraction of the pool. The η subsets are nested: a smaller η keeps a
prefix of the larger η's users, so supervision-scarcity curves compare the
same underlying users.

Cold-start (test + validation) users' target-domain interactions are held
out: they never enter batches and are hidden from document building.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

_SPLIT_STREAM = 0x5B17
_BATCH_STREAM = 0xBA7C
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class Scenario:
    source_interactions: tuple
    target_interactions: tuple
    overlap_users: frozenset
    train_overlap_users: frozenset
    coldstart_test_users: frozenset
    coldstart_valid_users: frozenset
    eta: float
    seed: int

    def coldstart_users(self):
        return self.coldstart_test_users | self.coldstart_valid_users

    def training_visible_target(self):
        """Target interactions usable for training and document building."""
        hidden = self.coldstart_users()
        return [it for it in self.target_interactions if it.user_id not in hidden]

    def heldout_pairs(self, split):
        """(user, item, rating) target pairs of one cold-start partition."""
        if split == "test":
            users = self.coldstart_test_users
        elif split == "validation":
            users = self.coldstart_valid_users
        else:
            raise ConfigError(f"unknown split {split!r}")
        return [
            (it.user_id, it.item_id, it.rating)
            for it in self.target_interactions
            if it.user_id in users
        ]

    def training_pairs(self, flow):
        """(user, item, rating) pairs of the training users for one flow."""
        if flow == "source_flow":
            pool = self.source_interactions
        elif flow == "target_flow":
            pool = self.target_interactions
        else:
            raise ConfigError(f"unknown flow {flow!r}")
        return [
            (it.user_id, it.item_id, it.rating)
            for it in pool
            if it.user_id in self.train_overlap_users
        ]


@dataclass(frozen=True)
class Batch:
    pairs: tuple  # of (user_id, item_id, rating, flow_tag)
    size: int


def partition_sizes(n_overlap):
    """Test/validation/train-pool sizes for n overlap users.

    Test gets ceil(0.3n) and the training pool ceil(0.5n); validation is
    the remainder. When the remainder is zero (tiny n), one user moves
    from test to validation so all three partitions are non-empty.
    """
    if n_overlap < 4:
        raise DataError(f"need at least 4 overlap users, got {n_overlap}")
    n_train = math.ceil(0.5 * n_overlap)
    n_test = math.ceil(0.3 * n_overlap)
    n_valid = n_overlap - n_train - n_test
    if n_valid == 0:
        n_test -= 1
        n_valid = 1
    return n_test, n_valid, n_train


def split_scenario(source, target, eta, seed):
    if not 0 < eta <= 1:
        raise ConfigError(f"eta must be in (0, 1], got {eta}")
    src_users = {it.user_id for it in source}
    tgt_users = {it.user_id for it in target}
    overlap = sorted(src_users & tgt_users)
    n_test, n_valid, n_train = partition_sizes(len(overlap))
    rng = np.random.default_rng([int(seed) & _MASK64, _SPLIT_STREAM])
    order = [overlap[j] for j in rng.permutation(len(overlap))]
    test_users = order[:n_test]
    valid_users = order[n_test:n_test + n_valid]
    pool = order[n_test + n_valid:]
    n_keep = max(1, math.floor(eta * len(pool)))
    train_users = pool[:n_keep]
    return Scenario(
        source_interactions=tuple(source),
        target_interactions=tuple(target),
        overlap_users=frozenset(overlap),
        train_overlap_users=frozenset(train_users),
        coldstart_test_users=frozenset(test_users),
        coldstart_valid_users=frozenset(valid_users),
        eta=float(eta),
        seed=int(seed),
    )


def make_batches(scenario, batch_size, seed, epoch):
    """Per-epoch batch list, both flows mixed at the global rating ratio.

    Each batch carries source-flow and target-flow pairs; cumulative
    rounding keeps every batch's source count within ±1 of
    size * |R_s| / (|R_s|+|R_t|), and the union over batches is the exact
    training rating multiset.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be at least 2, got {batch_size}")
    rs = scenario.training_pairs("source_flow")
    rt = scenario.training_pairs("target_flow")
    if not rs or not rt:
        raise DataError("both flows need at least one training rating")
    rng = np.random.default_rng([int(seed) & _MASK64, _BATCH_STREAM, int(epoch)])
    rs = [rs[j] + ("source_flow",) for j in rng.permutation(len(rs))]
    rt = [rt[j] + ("target_flow",) for j in rng.permutation(len(rt))]
    total = len(rs) + len(rt)
    frac_s = len(rs) / total
    batches = []
    si = ti = 0
    consumed = 0
    while si < len(rs) or ti < len(rt):
        b = min(batch_size, total - consumed)
        want_s = round((consumed + b) * frac_s) - si
        if si < len(rs) and ti < len(rt) and b >= 2:
            want_s = min(max(want_s, 1), b - 1)
        ns = min(max(want_s, 0), len(rs) - si, b)
        nt = min(b - ns, len(rt) - ti)
        ns = min(b - nt, len(rs) - si)  # spill if target pool ran short
        pairs = tuple(rs[si:si + ns]) + tuple(rt[ti:ti + nt])
        si += ns
        ti += nt
        consumed += len(pairs)
        batches.append(Batch(pairs=pairs, size=len(pairs)))
    return batches


def leakage_check(scenario, batches):
    """Assert no cold-start user's target pair reaches a training batch."""
    from .errors import LeakageError

    hidden = scenario.coldstart_users()
    for batch in batches:
        for u, i, r, flow in batch.pairs:
            if flow == "target_flow" and u in hidden:
                raise LeakageError(
                    f"target interaction of cold-start user {u!r} in a batch"
                )


def save_manifest(path, scenario):
    payload = {
        "seed": scenario.seed,
        "eta": scenario.eta,
        "overlap_users": sorted(scenario.overlap_users),
        "train_overlap_users": sorted(scenario.train_overlap_users),
        "coldstart_test_users": sorted(scenario.coldstart_test_users),
        "coldstart_valid_users": sorted(scenario.coldstart_valid_users),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def scenario_from_manifest(manifest, source, target):
    """Rebuild the exact Scenario a manifest describes."""
    try:
        return Scenario(
            source_interactions=tuple(source),
            target_interactions=tuple(target),
            overlap_users=frozenset(manifest["overlap_users"]),
            train_overlap_users=frozenset(manifest["train_overlap_users"]),
            coldstart_test_users=frozenset(manifest["coldstart_test_users"]),
            coldstart_valid_users=frozenset(manifest["coldstart_valid_users"]),
            eta=float(manifest["eta"]),
            seed=int(manifest["seed"]),
        )
    except KeyError as e:
        raise DataError(f"scenario manifest missing key {e}")


def rating_ratio(scenario):
    rs = scenario.training_pairs("source_flow")
    rt = scenario.training_pairs("target_flow")
    return len(rs), len(rt)
