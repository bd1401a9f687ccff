"""Cold-start evaluation and explanation artifacts.

Evaluation always runs the target flow with dropout off over held-out
(user, item, rating) target-domain pairs of cold-start users. Explanations
aggregate the per-position attention of each aspect into per-word averages
and export them, together with the correlation matrices behind a single
prediction, as JSON; the global correlation matrix exports as CSV.
"""

import itertools
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, LeakageError, MissingDocumentError
from .model import (_query_row, aspect_gate, correlation_for_flow,
                    forward_batch, forward_pair, text_convolution)


def _stack_docs(doc_tuples):
    tokens = np.stack([t for t, _ in doc_tuples])
    masks = np.stack([m for _, m in doc_tuples])
    return tokens, masks


def assemble_flow_inputs(params, store, pairs, flow_tag, exclude_pair_review=True):
    """Batch document arrays and entity id lists for one flow's pairs.

    ``exclude_pair_review`` drops the pair's own review from the item
    document (training); held-out reviews are never in the store, so the
    flag is a no-op at evaluation time.
    """
    user_domain = params.user_doc_domain(flow_tag)
    rating_domain = params.rating_domain(flow_tag)
    users = [p[0] for p in pairs]
    items = [p[1] for p in pairs]
    user_docs = _stack_docs([store.user_doc(u, user_domain) for u in users])
    item_docs = _stack_docs([
        store.item_doc(i, rating_domain, exclude_user=u if exclude_pair_review else None)
        for u, i in zip(users, items)
    ])
    aux_docs = None
    if params.switches.use_aux:
        aux_docs = _stack_docs([store.aux_doc(u, user_domain) for u in users])
    return user_docs, aux_docs, item_docs, users, items


def predict_pairs(params, store, pairs, flow_tag="target_flow", batch_size=256):
    """Deterministic predictions for (user, item, rating) pairs."""
    rating_domain = params.rating_domain(flow_tag)
    out = np.empty(len(pairs))
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo:lo + batch_size]
        user_docs, aux_docs, item_docs, users, items = assemble_flow_inputs(
            params, store, chunk, flow_tag)
        bu = Tensor(np.array([params.bias_value("user", rating_domain, u)
                              for u in users]))
        bi = Tensor(np.array([params.bias_value("item", rating_domain, i)
                              for i in items]))
        preds, _ = forward_batch(params, user_docs, aux_docs, item_docs,
                                 bu, bi, flow_tag, training=False)
        out[lo:lo + len(chunk)] = preds.values
    return out


def mse_over_pairs(params, store, pairs, batch_size=256):
    if not pairs:
        raise DataError("no pairs to evaluate")
    preds = predict_pairs(params, store, pairs, batch_size=batch_size)
    ratings = np.array([p[2] for p in pairs])
    return float(np.mean((ratings - preds) ** 2))


@dataclass
class EvalReport:
    mse: float
    n_pairs: int
    per_user_mse: dict
    variant: str
    eta: float
    seed: int
    split: str = "test"


def evaluate(params, store, scenario, split="test", batch_size=256):
    """MSE over one cold-start partition, with a per-user breakdown."""
    pairs = scenario.heldout_pairs(split)
    if not pairs:
        raise DataError(f"no held-out pairs in split {split!r}")
    train_pairs = {
        (u, i)
        for u, i, _ in scenario.training_pairs("target_flow")
    }
    for u, i, _ in pairs:
        if u in scenario.train_overlap_users or (u, i) in train_pairs:
            raise LeakageError(
                f"evaluated pair ({u!r}, {i!r}) overlaps the training data"
            )
    preds = predict_pairs(params, store, pairs, batch_size=batch_size)
    ratings = np.array([p[2] for p in pairs])
    sq = (ratings - preds) ** 2
    per_user = {}
    for (u, _, _), e in zip(pairs, sq):
        per_user.setdefault(u, []).append(e)
    return EvalReport(
        mse=float(sq.mean()),
        n_pairs=len(pairs),
        per_user_mse={u: float(np.mean(es)) for u, es in sorted(per_user.items())},
        variant=params.variant,
        eta=scenario.eta,
        seed=scenario.seed,
        split=split,
    )


def save_report(path, report):
    payload = {
        "mse": report.mse,
        "n_pairs": report.n_pairs,
        "per_user_mse": report.per_user_mse,
        "variant": report.variant,
        "eta": report.eta,
        "seed": report.seed,
        "split": report.split,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def word_attention_ranking(tokens, mask, beta_m, id_to_word, k_top=5):
    """Top words of one aspect: per-word mean attention, earliest-first ties.

    Returns a list of dicts {word, avg_beta, positions} sorted by
    descending average weight.
    """
    stats = {}
    for j in range(len(tokens)):
        if mask[j] == 0:
            continue
        w = id_to_word[int(tokens[j])]
        st = stats.setdefault(w, [0.0, 0, j])
        st[0] += float(beta_m[j])
        st[1] += 1
    ranked = sorted(
        ((w, s[0] / s[1], s[2]) for w, s in stats.items()),
        key=lambda r: (-r[1], r[2]),
    )
    out = []
    for w, avg, first in ranked[:k_top]:
        positions = [j for j in range(len(tokens))
                     if mask[j] != 0 and id_to_word[int(tokens[j])] == w]
        out.append({"word": w, "avg_beta": avg, "positions": positions})
    return out


def _doc_explanations(owner, kind, doc, betas, id_to_word, k_top):
    tokens, mask = doc
    M = betas.shape[0]
    return [
        {
            "owner": owner,
            "kind": kind,
            "aspect": m + 1,
            "top_words": word_attention_ranking(tokens, mask, betas[m],
                                                id_to_word, k_top),
        }
        for m in range(M)
    ]


def explain_pair(params, store, u, i, k_top=5):
    """Aspect-level evidence for one (user, item) prediction (target flow)."""
    user_domain = params.user_doc_domain("target_flow")
    rating_domain = params.rating_domain("target_flow")
    if not store.has_user(u, user_domain):
        raise MissingDocumentError(f"user {u!r} has no {user_domain} reviews")
    if not store.has_item(i, rating_domain):
        raise MissingDocumentError(f"item {i!r} has no {rating_domain} reviews")
    user_doc = store.user_doc(u, user_domain)
    item_doc = store.item_doc(i, rating_domain, exclude_user=u)
    aux_doc = store.aux_doc(u, user_domain) if params.switches.use_aux else None
    pred, trace = forward_pair(
        params, user_doc, aux_doc, item_doc,
        params.bias_value("user", rating_domain, u),
        params.bias_value("item", rating_domain, i),
        "target_flow",
    )
    id_to_word = {idx: w for w, idx in store.vocab.token_to_id.items()}
    S = trace["S"]
    p_star, q_star = np.unravel_index(int(np.argmax(S)), S.shape)
    docs = {
        "user": _doc_explanations(u, "user", user_doc, trace["beta_user"],
                                  id_to_word, k_top),
        "item": _doc_explanations(i, "item", item_doc, trace["beta_item"],
                                  id_to_word, k_top),
    }
    if "beta_aux" in trace:
        docs["user_aux"] = _doc_explanations(u, "user_aux", aux_doc,
                                             trace["beta_aux"], id_to_word, k_top)
    return {
        "user": u,
        "item": i,
        "prediction": float(pred),
        "variant": params.variant,
        "S": S.tolist(),
        "S_ui": trace["S_ui"].tolist(),
        "S_r": trace["S_r"].tolist(),
        "argmax": [int(p_star) + 1, int(q_star) + 1],
        "documents": docs,
    }


def save_explanation(path, explanation):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(explanation, f, indent=2, sort_keys=True)
        f.write("\n")


def aspect_response_scores(params, vocab, word_groups, domain):
    """How strongly each aspect's attention responds to each word group.

    Feeds one probe document per group (just that group's in-vocabulary
    words) through the domain's extraction stack and averages the
    pre-softmax attention logits over the probe words. Returns a
    (groups × aspects) array; row g says which aspects light up for
    group g's vocabulary.
    """
    flow_tag = "target_flow" if domain == "source" else "source_flow"
    flow = params.flow_for(flow_tag)
    V = params.query_for(domain)
    M = params.hp.M
    scores = np.zeros((len(word_groups), M))
    for gi, words in enumerate(word_groups):
        ids = vocab.map_tokens(words)
        if not ids:
            raise DataError(f"word group {gi} has no in-vocabulary words")
        tokens = np.zeros(params.hp.l, dtype=np.int64)
        tokens[: len(ids)] = ids
        mask = np.zeros(params.hp.l)
        mask[: len(ids)] = 1.0
        C = text_convolution((tokens, mask), params.embeddings, flow)
        for m in range(1, M + 1):
            G = aspect_gate(C, m, flow)
            logits = ad.matmul(G, _query_row(V, m, M)).values
            scores[gi, m - 1] = float(logits[: len(ids)].mean())
    return scores


def match_aspects(scores):
    """Injective group → aspect assignment maximizing total response.

    Brute force over permutations (aspect counts are single-digit);
    requires groups ≤ aspects. Returns {group_index: aspect_index} with
    0-based aspect indices.
    """
    n_groups, m = scores.shape
    if n_groups > m:
        raise DataError(f"{n_groups} groups cannot map into {m} aspects")
    best_tot, best = -np.inf, None
    for perm in itertools.permutations(range(m), n_groups):
        tot = sum(scores[g, perm[g]] for g in range(n_groups))
        if tot > best_tot:
            best_tot, best = tot, perm
    return {g: best[g] for g in range(n_groups)}


def export_correlation_heatmap_data(params, path):
    """Write the global correlation matrix as CSV (rows = source aspects)."""
    S = correlation_for_flow(params, "target_flow").values
    with open(path, "w", encoding="utf-8") as f:
        for row in S:
            f.write(",".join(repr(float(x)) for x in row) + "\n")
    return S


def load_heatmap_csv(path):
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(x) for x in line.split(",")])
    return np.array(rows)
