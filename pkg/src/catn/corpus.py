"""Review-text pipeline: interaction filtering, vocabulary, documents.

A "document" is the concatenation of reviews (all written by one user, or
all received by one item, or one like-minded stand-in review per item),
tokenized, vocabulary-mapped, and padded/truncated to a fixed length.
Token id 0 is PAD and never assigned to a word.

Everything here is deterministic: review order inside a document is
ascending partner id then input order, tf-idf ties break lexicographically,
and the stand-in selection is driven by a seed plus a stable per-user hash
(never Python's salted ``hash``).
"""

import hashlib
import json
import math
import re
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError, MissingDocumentError

PAD_ID = 0
KIND_CODES = {"user": 0, "item": 1, "user_aux": 2}
DOMAIN_CODES = {"source": 0, "target": 1}
_KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
_DOMAIN_NAMES = {v: k for k, v in DOMAIN_CODES.items()}
_AUX_STREAM = 0xA0C5

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


class Interaction(NamedTuple):
    user_id: str
    item_id: str
    rating: float
    review_text: str


@dataclass(frozen=True)
class CorpusConfig:
    l: int = 500
    vocab_cap: int = 20000
    df_cap: float = 0.5
    stopword_list: frozenset = frozenset()
    seed: int = 0

    def __post_init__(self):
        if self.l <= 0:
            raise ConfigError(f"document length must be positive, got {self.l}")
        if not 0 < self.df_cap <= 1:
            raise ConfigError(f"df_cap must be in (0, 1], got {self.df_cap}")


@dataclass
class Document:
    token_ids: np.ndarray  # (l,) int64
    mask: np.ndarray  # (l,) float64, 1.0 for real tokens
    owner: str
    kind: str
    domain: str

    def n_tokens(self):
        return int(self.mask.sum())


def tokenize(text):
    """Lowercase and split on runs of non-alphanumerics."""
    return _WORD_RE.findall(text.lower())


def stable_id_hash(s):
    """64-bit content hash of an id string, stable across processes."""
    return int.from_bytes(
        hashlib.blake2b(s.encode("utf-8"), digest_size=8).digest(), "little"
    )


def load_interactions(path):
    """Read a JSON-lines interaction file."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Interaction(
                        str(rec["user_id"]),
                        str(rec["item_id"]),
                        float(rec["rating"]),
                        str(rec["review_text"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{ln}: bad interaction record: {e}")
    return out


def save_interactions(path, interactions):
    with open(path, "w", encoding="utf-8") as f:
        for it in interactions:
            f.write(
                json.dumps(
                    {
                        "user_id": it.user_id,
                        "item_id": it.item_id,
                        "rating": it.rating,
                        "review_text": it.review_text,
                    }
                )
                + "\n"
            )


def filter_interactions(raw, min_user, min_item):
    """Drop users/items below their interaction thresholds, to a fixed point."""
    if min_user < 0 or min_item < 0:
        raise ConfigError("thresholds must be non-negative")
    kept = list(raw)
    while True:
        users = Counter(it.user_id for it in kept)
        items = Counter(it.item_id for it in kept)
        nxt = [
            it
            for it in kept
            if users[it.user_id] >= min_user and items[it.item_id] >= min_item
        ]
        if len(nxt) == len(kept):
            return nxt
        kept = nxt


class Vocabulary:
    """Word → dense id (1..size) with a tf-idf score per word."""

    def __init__(self, words_scores):
        # words_scores: iterable of (word, score) already in id order 1..n
        self.token_to_id = {}
        self.scores = {}
        for idx, (w, s) in enumerate(words_scores, start=1):
            if w in self.token_to_id:
                raise DataError(f"duplicate vocabulary word {w!r}")
            self.token_to_id[w] = idx
            self.scores[w] = float(s)

    def __len__(self):
        return len(self.token_to_id)

    def __contains__(self, word):
        return word in self.token_to_id

    def id_for(self, word):
        return self.token_to_id.get(word)

    def map_tokens(self, tokens):
        """Token ids for in-vocabulary tokens, dropping the rest."""
        t2i = self.token_to_id
        return [t2i[t] for t in tokens if t in t2i]

    def save(self, path):
        by_id = sorted(self.token_to_id.items(), key=lambda kv: kv[1])
        with open(path, "w", encoding="utf-8") as f:
            for w, i in by_id:
                f.write(f"{w}\t{i}\t{self.scores[w]!r}\n")

    @classmethod
    def load(cls, path):
        rows = []
        with open(path, "r", encoding="utf-8") as f:
            for ln, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(f"{path}:{ln}: expected word<TAB>id<TAB>score")
                rows.append((parts[0], int(parts[1]), float(parts[2])))
        rows.sort(key=lambda r: r[1])
        for want, (_, got, _) in enumerate(rows, start=1):
            if got != want:
                raise DataError(f"{path}: ids not dense from 1, found {got} at rank {want}")
        return cls([(w, s) for w, _, s in rows])


def build_vocabulary(corpus, cfg):
    """Rank words by corpus-level tf-idf and keep the top ``vocab_cap``.

    Each interaction's review is one document for the df statistic;
    score(w) = total count of w across the corpus * ln(N_docs / df(w)).
    """
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    stop = {w.lower() for w in cfg.stopword_list}
    tf = Counter()
    df = Counter()
    n_docs = len(corpus)
    for it in corpus:
        toks = tokenize(it.review_text)
        tf.update(toks)
        df.update(set(toks))
    scored = []
    for w, c in tf.items():
        if w in stop or df[w] / n_docs > cfg.df_cap:
            continue
        scored.append((w, c * math.log(n_docs / df[w])))
    scored.sort(key=lambda ws: (-ws[1], ws[0]))
    return Vocabulary(scored[: cfg.vocab_cap])


def _pad(ids, l):
    token_ids = np.zeros(l, dtype=np.int64)
    mask = np.zeros(l, dtype=np.float64)
    n = min(len(ids), l)
    if n:
        token_ids[:n] = ids[:n]
        mask[:n] = 1.0
    return token_ids, mask


def _user_records(u, interactions, exclude_item=None):
    recs = [
        (it.item_id, idx, it)
        for idx, it in enumerate(interactions)
        if it.user_id == u and it.item_id != exclude_item
    ]
    recs.sort(key=lambda r: (r[0], r[1]))
    return [r[2] for r in recs]


def _item_records(i, interactions, exclude_user=None):
    recs = [
        (it.user_id, idx, it)
        for idx, it in enumerate(interactions)
        if it.item_id == i and it.user_id != exclude_user
    ]
    recs.sort(key=lambda r: (r[0], r[1]))
    return [r[2] for r in recs]


def build_user_document(u, domain, interactions, vocab, cfg, exclude_item=None):
    if not any(it.user_id == u for it in interactions):
        raise MissingDocumentError(f"user {u!r} has no interactions in {domain}")
    ids = []
    for it in _user_records(u, interactions, exclude_item):
        ids.extend(vocab.map_tokens(tokenize(it.review_text)))
    token_ids, mask = _pad(ids, cfg.l)
    return Document(token_ids, mask, owner=u, kind="user", domain=domain)


def build_item_document(i, domain, interactions, vocab, cfg, exclude_user=None):
    if not any(it.item_id == i for it in interactions):
        raise MissingDocumentError(f"item {i!r} has no interactions in {domain}")
    ids = []
    for it in _item_records(i, interactions, exclude_user):
        ids.extend(vocab.map_tokens(tokenize(it.review_text)))
    token_ids, mask = _pad(ids, cfg.l)
    return Document(token_ids, mask, owner=i, kind="item", domain=domain)


def aux_rng(seed, domain, u):
    return np.random.default_rng(
        [int(seed) & 0xFFFFFFFFFFFFFFFF, DOMAIN_CODES[domain], _AUX_STREAM, stable_id_hash(u)]
    )


def build_auxiliary_document(u, domain, interactions, overlap_set, vocab, cfg, seed):
    """One same-rating review by a non-overlapping stranger per item of ``u``.

    Items are visited in the same order as ``build_user_document``; an item
    whose candidate set is empty contributes nothing and consumes no random
    draw. All candidate sets empty gives the all-PAD document.
    """
    mine = [
        (it.item_id, idx, it)
        for idx, it in enumerate(interactions)
        if it.user_id == u
    ]
    if not mine:
        raise MissingDocumentError(f"user {u!r} has no interactions in {domain}")
    mine.sort(key=lambda r: (r[0], r[1]))
    by_item = defaultdict(list)
    for idx, it in enumerate(interactions):
        if it.user_id != u and it.user_id not in overlap_set:
            by_item[it.item_id].append((it.user_id, idx, it))
    rng = aux_rng(seed, domain, u)
    ids = []
    for item_id, _, it in mine:
        cands = [c for c in by_item.get(item_id, ()) if c[2].rating == it.rating]
        if not cands:
            continue
        cands.sort(key=lambda c: (c[0], c[1]))
        pick = cands[int(rng.integers(len(cands)))]
        ids.extend(vocab.map_tokens(tokenize(pick[2].review_text)))
    token_ids, mask = _pad(ids, cfg.l)
    return Document(token_ids, mask, owner=u, kind="user_aux", domain=domain)


def save_documents(path, documents, l):
    """Binary document file: u64 count, u64 length, then fixed records."""
    docs = sorted(documents, key=lambda d: (DOMAIN_CODES[d.domain], KIND_CODES[d.kind], d.owner))
    with open(path, "wb") as f:
        f.write(struct.pack("<QQ", len(docs), l))
        for d in docs:
            if d.token_ids.shape != (l,) or d.mask.shape != (l,):
                raise DataError(f"document {d.owner!r} has length {d.token_ids.shape}, want ({l},)")
            ob = d.owner.encode("utf-8")
            f.write(struct.pack("<I", len(ob)))
            f.write(ob)
            f.write(struct.pack("<BB", KIND_CODES[d.kind], DOMAIN_CODES[d.domain]))
            f.write(d.token_ids.astype("<u4").tobytes())
            f.write((d.mask != 0).astype(np.uint8).tobytes())


def load_documents(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 16:
        raise DataError("truncated document file header")
    n_docs, l = struct.unpack_from("<QQ", buf, 0)
    pos = 16
    docs = []
    for _ in range(n_docs):
        if pos + 4 > len(buf):
            raise DataError("truncated document record")
        (olen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need = olen + 2 + 4 * l + l
        if pos + need > len(buf):
            raise DataError("truncated document record")
        owner = buf[pos:pos + olen].decode("utf-8")
        pos += olen
        kind_b, dom_b = struct.unpack_from("<BB", buf, pos)
        pos += 2
        token_ids = np.frombuffer(buf, dtype="<u4", count=l, offset=pos).astype(np.int64)
        pos += 4 * l
        mask = np.frombuffer(buf, dtype=np.uint8, count=l, offset=pos).astype(np.float64)
        pos += l
        docs.append(Document(token_ids, mask, owner, _KIND_NAMES[kind_b], _DOMAIN_NAMES[dom_b]))
    if pos != len(buf):
        raise DataError(f"{len(buf) - pos} trailing bytes after {n_docs} documents")
    return docs


class DocumentStore:
    """Assembles documents on demand from training-visible interactions.

    Reviews are tokenized and vocabulary-mapped once; a document is then a
    cheap concatenation of cached id segments. Item documents support
    excluding one user's review so a training pair never sees its own
    rating's text; stand-in (aux) documents are cached per (domain, user)
    since their seeded selection is deterministic.
    """

    def __init__(self, vocab, cfg, source_interactions, target_interactions,
                 overlap_users, aux_seed):
        self.vocab = vocab
        self.cfg = cfg
        self.overlap_users = frozenset(overlap_users)
        self.aux_seed = aux_seed
        self._by_domain = {"source": source_interactions, "target": target_interactions}
        self._segments = {}  # (domain, rec_idx) -> list of token ids
        self._by_user = {}
        self._by_item = {}
        for dom, inters in self._by_domain.items():
            bu = defaultdict(list)
            bi = defaultdict(list)
            for idx, it in enumerate(inters):
                self._segments[(dom, idx)] = vocab.map_tokens(tokenize(it.review_text))
                bu[it.user_id].append((it.item_id, idx))
                bi[it.item_id].append((it.user_id, idx))
            for lst in bu.values():
                lst.sort()
            for lst in bi.values():
                lst.sort()
            self._by_user[dom] = dict(bu)
            self._by_item[dom] = dict(bi)
        self._aux_cache = {}
        self._user_cache = {}

    def interactions(self, domain):
        return self._by_domain[domain]

    def has_user(self, u, domain):
        return u in self._by_user[domain]

    def has_item(self, i, domain):
        return i in self._by_item[domain]

    def _assemble(self, domain, picks):
        ids = []
        for idx in picks:
            ids.extend(self._segments[(domain, idx)])
            if len(ids) >= self.cfg.l:
                break
        return _pad(ids, self.cfg.l)

    def user_doc(self, u, domain, exclude_item=None):
        recs = self._by_user[domain].get(u)
        if recs is None:
            raise MissingDocumentError(f"user {u!r} has no reviews in {domain}")
        if exclude_item is None and (u, domain) in self._user_cache:
            return self._user_cache[(u, domain)]
        picks = [idx for item, idx in recs if item != exclude_item]
        out = self._assemble(domain, picks)
        if exclude_item is None:
            self._user_cache[(u, domain)] = out
        return out

    def item_doc(self, i, domain, exclude_user=None):
        recs = self._by_item[domain].get(i)
        if recs is None:
            raise MissingDocumentError(f"item {i!r} has no reviews in {domain}")
        picks = [idx for user, idx in recs if user != exclude_user]
        return self._assemble(domain, picks)

    def aux_doc(self, u, domain):
        key = (u, domain)
        cached = self._aux_cache.get(key)
        if cached is not None:
            return cached
        recs = self._by_user[domain].get(u)
        if recs is None:
            raise MissingDocumentError(f"user {u!r} has no reviews in {domain}")
        inters = self._by_domain[domain]
        rng = aux_rng(self.aux_seed, domain, u)
        picks = []
        for item_id, my_idx in recs:
            rating = inters[my_idx].rating
            cands = [
                idx
                for user, idx in self._by_item[domain][item_id]
                if user != u and user not in self.overlap_users
                and inters[idx].rating == rating
            ]
            if not cands:
                continue
            picks.append(cands[int(rng.integers(len(cands)))])
        out = self._assemble(domain, picks)
        self._aux_cache[key] = out
        return out
