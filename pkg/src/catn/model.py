"""Aspect-transfer rating model.

Two learning flows share word embeddings, the global aspect queries, and
the affinity matrix; each flow owns (or, in the reduced variants, shares)
the text-side parameters. A flow turns three documents into aspect
matrices — user doc and stand-in (aux) doc from the user's known domain,
item doc from the rating's domain — and scores the pair by correlating
every user aspect with every item aspect.

Functions here accept single documents (2-D tensors) or batches with a
leading batch axis; the same op graph serves both.

Orientation convention: the learned correlation matrix S and the affinity
matrix W are stored source×target. The flow whose user document lives in
the target domain reads both transposed.

Naming: ``flowA`` is the flow that predicts target-domain ratings
(user doc in source), ``flowB`` the reverse. Reduced variants with one
shared parameter set store it under ``flowA``.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Document
from .errors import ConfigError, DataError

VARIANTS = ("basic", "attn", "separate", "full")
FLOW_TAGS = ("source_flow", "target_flow")

_INIT_STREAM = 0x1417
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class HyperParams:
    d: int = 300
    n: int = 50
    s: int = 3
    k: int = 32
    M: int = 3
    l: int = 500
    alpha: float = 0.01
    keep_prob: float = 0.8
    lam: float = 1e-4

    def __post_init__(self):
        if self.s % 2 == 0 or self.s <= 0:
            raise ConfigError(f"conv window must be odd and positive, got {self.s}")
        for name in ("d", "n", "k", "M", "l"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.keep_prob <= 1:
            raise ConfigError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.alpha <= 0:
            raise ConfigError(f"leaky-relu slope must be positive, got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"l2 coefficient must be non-negative, got {self.lam}")


class VariantSwitches(NamedTuple):
    uniform_attention: bool
    learned_correlation: bool
    shared_flows: bool
    use_aux: bool


def apply_variant(variant):
    """Behavior switches for an ablation variant tag."""
    if variant == "basic":
        return VariantSwitches(True, False, True, False)
    if variant == "attn":
        return VariantSwitches(False, True, True, False)
    if variant == "separate":
        return VariantSwitches(False, True, False, False)
    if variant == "full":
        return VariantSwitches(False, True, False, True)
    raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")


class GateParams(NamedTuple):
    W: Tensor
    b: Tensor
    Wg: Tensor
    bg: Tensor


class FlowParams:
    """Text-side parameters of one learning flow."""

    def __init__(self, conv_W, conv_b, gates, aux_W=None, aux_b=None,
                 fuse_W1=None, fuse_b1=None, fuse_W2=None, fuse_b2=None):
        self.conv_W = conv_W
        self.conv_b = conv_b
        self.gates = gates
        self.aux_W = aux_W
        self.aux_b = aux_b
        self.fuse_W1 = fuse_W1
        self.fuse_b1 = fuse_b1
        self.fuse_W2 = fuse_W2
        self.fuse_b2 = fuse_b2

    @property
    def has_aux(self):
        return self.aux_W is not None

    def named(self, prefix):
        yield f"{prefix}.conv.W", self.conv_W
        yield f"{prefix}.conv.b", self.conv_b
        for m, g in enumerate(self.gates, start=1):
            yield f"{prefix}.gate.{m}.W", g.W
            yield f"{prefix}.gate.{m}.b", g.b
            yield f"{prefix}.gate.{m}.Wg", g.Wg
            yield f"{prefix}.gate.{m}.bg", g.bg
        if self.has_aux:
            yield f"{prefix}.aux.W", self.aux_W
            yield f"{prefix}.aux.b", self.aux_b
            yield f"{prefix}.fuse.W1", self.fuse_W1
            yield f"{prefix}.fuse.b1", self.fuse_b1
            yield f"{prefix}.fuse.W2", self.fuse_W2
            yield f"{prefix}.fuse.b2", self.fuse_b2

    def weights(self):
        """Parameters subject to L2 (bias vectors excluded)."""
        out = [self.conv_W]
        for g in self.gates:
            out += [g.W, g.Wg]
        if self.has_aux:
            out += [self.aux_W, self.fuse_W1, self.fuse_W2]
        return out


def _fan_uniform(rng, shape, fan_in, fan_out):
    # fan-scaled uniform init: without it the stacked products (conv → gate
    # → attention → bilinear scoring) start many orders of magnitude below
    # the rating scale and the bias tables absorb all the early signal
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return ad.param(rng.uniform(-limit, limit, size=shape))


def _build_flow(rng, hp, with_aux):
    def z(*shape):
        return ad.param(np.zeros(shape))

    conv_W = _fan_uniform(rng, (hp.n, hp.s, hp.d), hp.s * hp.d, hp.n)
    conv_b = z(hp.n)
    gates = [
        GateParams(_fan_uniform(rng, (hp.k, hp.n), hp.n, hp.k), z(hp.k),
                   _fan_uniform(rng, (hp.k, hp.n), hp.n, hp.k), z(hp.k))
        for _ in range(hp.M)
    ]
    if not with_aux:
        return FlowParams(conv_W, conv_b, gates)
    return FlowParams(
        conv_W, conv_b, gates,
        aux_W=_fan_uniform(rng, (hp.n, hp.s, hp.n), hp.s * hp.n, hp.n),
        aux_b=z(hp.n),
        fuse_W1=_fan_uniform(rng, (hp.k, 2 * hp.k), 2 * hp.k, hp.k),
        fuse_b1=z(hp.k),
        fuse_W2=_fan_uniform(rng, (hp.k, 2 * hp.k), 2 * hp.k, hp.k),
        fuse_b2=z(hp.k),
    )


class ModelParams:
    """All learnable state plus the per-entity rating-bias tables."""

    def __init__(self, hp, variant, embeddings, train_embeddings,
                 W, Vs, Vt, flowA, flowB):
        self.hp = hp
        self.variant = variant
        self.switches = apply_variant(variant)
        self.embeddings = embeddings
        self.train_embeddings = train_embeddings
        self.W = W
        self.Vs = Vs
        self.Vt = Vt
        self.flowA = flowA
        self.flowB = flowB  # None means flowA serves both flows
        self.user_bias = {"source": {}, "target": {}}
        self.item_bias = {"source": {}, "target": {}}
        self.bias_fallback = {
            "source": {"user": 0.0, "item": 0.0},
            "target": {"user": 0.0, "item": 0.0},
        }

    @classmethod
    def build(cls, hp, vocab_size, seed, variant="full",
              pretrained_embeddings=None, train_embeddings=False):
        sw = apply_variant(variant)
        rng = np.random.default_rng([int(seed) & _MASK64, _INIT_STREAM])
        if pretrained_embeddings is not None:
            emb = np.asarray(pretrained_embeddings, dtype=np.float64).copy()
            if emb.shape != (vocab_size + 1, hp.d):
                raise DataError(
                    f"pretrained embeddings shape {emb.shape}, "
                    f"want {(vocab_size + 1, hp.d)}"
                )
        else:
            emb = rng.uniform(-0.5, 0.5, size=(vocab_size + 1, hp.d))
        emb[0] = 0.0  # PAD row stays exactly zero
        embeddings = Tensor(emb, requires_grad=train_embeddings)
        W = _fan_uniform(rng, (hp.k, hp.k), hp.k, hp.k)
        if sw.learned_correlation:
            Vs = _fan_uniform(rng, (hp.M, hp.k), hp.k, hp.M)
            Vt = _fan_uniform(rng, (hp.M, hp.k), hp.k, hp.M)
        else:
            Vs = Vt = None
        flowA = _build_flow(rng, hp, sw.use_aux)
        flowB = None if sw.shared_flows else _build_flow(rng, hp, sw.use_aux)
        return cls(hp, variant, embeddings, train_embeddings, W, Vs, Vt, flowA, flowB)

    # -------------------------------------------------------------- access

    def flow_for(self, flow_tag):
        if flow_tag == "target_flow":
            return self.flowA
        if flow_tag == "source_flow":
            return self.flowB if self.flowB is not None else self.flowA
        raise ConfigError(f"unknown flow tag {flow_tag!r}")

    def user_doc_domain(self, flow_tag):
        """Domain the user/aux documents come from under this flow."""
        return "source" if flow_tag == "target_flow" else "target"

    def rating_domain(self, flow_tag):
        return "target" if flow_tag == "target_flow" else "source"

    def query_for(self, domain):
        return self.Vs if domain == "source" else self.Vt

    def named_graph_params(self):
        yield "shared.E", self.embeddings
        yield "shared.W", self.W
        if self.Vs is not None:
            yield "shared.Vs", self.Vs
            yield "shared.Vt", self.Vt
        yield from self.flowA.named("flowA")
        if self.flowB is not None:
            yield from self.flowB.named("flowB")

    def trainable_for_flow(self, flow_tag):
        """Graph parameters optimized by this flow's step, with names."""
        out = []
        if self.train_embeddings:
            out.append(("shared.E", self.embeddings))
        out.append(("shared.W", self.W))
        if self.Vs is not None:
            out.append(("shared.Vs", self.Vs))
            out.append(("shared.Vt", self.Vt))
        flow = self.flow_for(flow_tag)
        prefix = "flowA" if flow is self.flowA else "flowB"
        out.extend(flow.named(prefix))
        return out

    def regularized_for_flow(self, flow_tag):
        out = []
        if self.train_embeddings:
            out.append(self.embeddings)
        out.append(self.W)
        if self.Vs is not None:
            out += [self.Vs, self.Vt]
        out.extend(self.flow_for(flow_tag).weights())
        return out

    def parameter_count(self):
        return sum(t.size for _, t in self.named_graph_params())

    # -------------------------------------------------------------- biases

    def ensure_bias(self, kind, domain, ids):
        table = (self.user_bias if kind == "user" else self.item_bias)[domain]
        for i in ids:
            table.setdefault(i, 0.0)

    def bias_value(self, kind, domain, entity_id):
        table = (self.user_bias if kind == "user" else self.item_bias)[domain]
        v = table.get(entity_id)
        return self.bias_fallback[domain][kind] if v is None else v

    def update_bias_fallbacks(self):
        """Fallback for unseen entities = mean of that domain's trained table."""
        for domain in ("source", "target"):
            for kind, table in (("user", self.user_bias[domain]),
                                ("item", self.item_bias[domain])):
                vals = table.values()
                self.bias_fallback[domain][kind] = (
                    sum(vals) / len(table) if table else 0.0
                )

    # -------------------------------------------------------- serialization

    def to_param_dict(self):
        out = {name: t.values for name, t in self.named_graph_params()}
        for domain in ("source", "target"):
            for uid, v in self.user_bias[domain].items():
                out[f"bias.user.{domain}.{uid}"] = np.asarray(v)
            for iid, v in self.item_bias[domain].items():
                out[f"bias.item.{domain}.{iid}"] = np.asarray(v)
            out[f"bias.fallback.user.{domain}"] = np.asarray(
                self.bias_fallback[domain]["user"])
            out[f"bias.fallback.item.{domain}"] = np.asarray(
                self.bias_fallback[domain]["item"])
        return out

    def load_param_dict(self, params):
        expected = dict(self.named_graph_params())
        seen = set()
        for domain in ("source", "target"):
            self.user_bias[domain].clear()
            self.item_bias[domain].clear()
        for name, arr in params.items():
            if name.startswith("bias.fallback."):
                _, _, kind, domain = name.split(".", 3)
                self.bias_fallback[domain][kind] = float(arr)
                continue
            if name.startswith("bias."):
                _, kind, domain, entity = name.split(".", 3)
                table = self.user_bias if kind == "user" else self.item_bias
                table[domain][entity] = float(arr)
                continue
            t = expected.get(name)
            if t is None:
                raise DataError(f"unexpected parameter {name!r} in checkpoint")
            if t.values.shape != arr.shape:
                raise DataError(
                    f"parameter {name!r}: checkpoint shape {arr.shape}, "
                    f"model wants {t.values.shape}"
                )
            t.values = arr.astype(np.float64).copy()
            seen.add(name)
        missing = set(expected) - seen
        if missing:
            raise DataError(f"checkpoint missing parameters: {sorted(missing)}")


# ------------------------------------------------------------------ forward


def _doc_arrays(doc):
    if isinstance(doc, Document):
        return doc.token_ids, doc.mask
    tokens, mask = doc
    return np.asarray(tokens), np.asarray(mask, dtype=np.float64)


def text_convolution(doc, E, flow):
    """Embed token ids and convolve with ReLU; rows stay per-position."""
    tokens, _ = _doc_arrays(doc)
    x = ad.embedding_lookup(E, Tensor(tokens))
    return ad.relu(ad.conv1d_same(x, flow.conv_W, flow.conv_b))


def aspect_gate(C, m, flow):
    """Gated linear projection for 1-based aspect index ``m``."""
    if not 1 <= m <= len(flow.gates):
        raise IndexError(f"aspect index {m} out of range 1..{len(flow.gates)}")
    g = flow.gates[m - 1]
    lin = ad.add(ad.matmul(C, g.W, transpose_b=True), g.b)
    gate = ad.sigmoid(ad.add(ad.matmul(C, g.Wg, transpose_b=True), g.bg))
    return ad.mul(lin, gate)


def aspect_attention(G_m, query, mask):
    """Query-scored masked softmax over positions, then a weighted readout."""
    logits = ad.matmul(G_m, query)
    beta = ad.masked_softmax(logits, Tensor(np.asarray(mask, dtype=np.float64)))
    return ad.weighted_sum(beta, G_m), beta


def uniform_attention_weights(mask):
    """Plain averaging over unmasked positions (the no-attention variant)."""
    mask = np.asarray(mask, dtype=np.float64)
    denom = mask.sum(axis=-1, keepdims=True)
    return np.divide(mask, denom, out=np.zeros_like(mask), where=denom > 0)


def _query_row(V, m, M):
    onehot = np.zeros(M)
    onehot[m - 1] = 1.0
    return ad.matmul(V, Tensor(onehot), transpose_a=True)


def _aspect_rows(C, mask, V, flow, uniform):
    """Per-aspect readouts from contextual rows C; returns (A, betas)."""
    M = len(flow.gates)
    rows = []
    betas = []
    uni = None
    if uniform:
        uni = Tensor(uniform_attention_weights(mask))
    for m in range(1, M + 1):
        G_m = aspect_gate(C, m, flow)
        if uniform:
            a_m = ad.weighted_sum(uni, G_m)
            beta = uni
        else:
            a_m, beta = aspect_attention(G_m, _query_row(V, m, M), mask)
        new_shape = a_m.shape[:-1] + (1,) + a_m.shape[-1:]
        rows.append(ad.reshape(a_m, new_shape))
        betas.append(beta)
    return ad.concat(rows, axis=-2), betas


def extract_aspects(doc, domain_query, flow, E, uniform=False):
    tokens, mask = _doc_arrays(doc)
    C = text_convolution((tokens, mask), E, flow)
    A, _ = _aspect_rows(C, mask, domain_query, flow, uniform)
    return A


def extract_aux_aspects(doc_aux, domain_query, flow, E, uniform=False):
    """Same stack as extract_aspects with one extra conv layer in front."""
    if not flow.has_aux:
        raise ConfigError("this flow has no stand-in (aux) parameters")
    tokens, mask = _doc_arrays(doc_aux)
    H = text_convolution((tokens, mask), E, flow)
    C = ad.relu(ad.conv1d_same(H, flow.aux_W, flow.aux_b))
    A, _ = _aspect_rows(C, mask, domain_query, flow, uniform)
    return A


def fuse_auxiliary(A_u, A_aux, flow):
    """Gate the stand-in aspects into the user aspects, row by row."""
    if A_u.shape != A_aux.shape:
        raise ConfigError(
            f"aspect matrices differ: {A_u.shape} vs {A_aux.shape}"
        )
    both = ad.concat([ad.sub(A_u, A_aux), ad.mul(A_u, A_aux)], axis=-1)
    gate = ad.sigmoid(ad.add(ad.matmul(both, flow.fuse_W1, transpose_b=True),
                             flow.fuse_b1))
    merged = ad.concat([A_u, ad.mul(gate, A_aux)], axis=-1)
    return ad.tanh(ad.add(ad.matmul(merged, flow.fuse_W2, transpose_b=True),
                          flow.fuse_b2))


def global_correlation(Vs, Vt, W, alpha):
    """M×M correlation, rows = source aspects, columns = target aspects."""
    return ad.leaky_relu(ad.matmul(ad.matmul(Vs, W), Vt, transpose_b=True),
                         alpha=alpha)


def correlation_for_flow(params, flow_tag):
    """Flow-oriented correlation: rows always index the user-doc domain."""
    if not params.switches.learned_correlation:
        M = params.hp.M
        return Tensor(np.ones((M, M)))
    if flow_tag == "target_flow":
        return global_correlation(params.Vs, params.Vt, params.W, params.hp.alpha)
    inner = ad.matmul(params.Vt, params.W, transpose_b=True)
    return ad.leaky_relu(ad.matmul(inner, params.Vs, transpose_b=True),
                         alpha=params.hp.alpha)


def pairwise_matching(A_u, A_i, W, transpose_w=False):
    """All user-aspect × item-aspect affinities: A_u W A_iᵀ."""
    proj = ad.matmul(A_u, W, transpose_b=transpose_w)
    return ad.matmul(proj, A_i, transpose_b=True)


def _mean_cells(S_r, M):
    flat_shape = S_r.shape[:-2] + (M * M,)
    flat = ad.reshape(S_r, flat_shape)
    w = Tensor(np.full(flat_shape, 1.0 / (M * M)))
    return ad.weighted_sum(w, flat)


def predict(A_u, A_i, S, W, b_u, b_i, transpose_w=False):
    """Correlation-weighted mean of aspect matchings plus both biases."""
    M = A_u.shape[-2]
    S_ui = pairwise_matching(A_u, A_i, W, transpose_w)
    S_r = ad.mul(S, S_ui)
    base = _mean_cells(S_r, M)
    return ad.scalar_add(ad.scalar_add(base, float(b_u)), float(b_i))


def dropout_mask(shape, keep_prob, rng):
    return (rng.random(shape) < keep_prob).astype(np.float64) / keep_prob


def forward_batch(params, user_docs, aux_docs, item_docs, bias_u, bias_i,
                  flow_tag, training=False, dropout_rng=None, with_trace=False):
    """Score a batch of pairs under one flow.

    ``user_docs``/``item_docs``/``aux_docs`` are (tokens, mask) arrays with
    a leading batch axis (aux may be None when the variant has no stand-in
    path); ``bias_u``/``bias_i`` are Tensors of shape (B,). Returns
    (predictions Tensor (B,), trace dict or None).
    """
    sw = params.switches
    flow = params.flow_for(flow_tag)
    user_domain = params.user_doc_domain(flow_tag)
    item_domain = params.rating_domain(flow_tag)
    E = params.embeddings

    u_tokens, u_mask = user_docs
    i_tokens, i_mask = item_docs
    Cu = text_convolution((u_tokens, u_mask), E, flow)
    A_u, beta_u = _aspect_rows(Cu, u_mask, params.query_for(user_domain),
                               flow, sw.uniform_attention)
    beta_aux = None
    if sw.use_aux:
        if aux_docs is None:
            raise DataError("variant with stand-in path needs aux documents")
        x_tokens, x_mask = aux_docs
        Hx = text_convolution((x_tokens, x_mask), E, flow)
        Cx = ad.relu(ad.conv1d_same(Hx, flow.aux_W, flow.aux_b))
        A_x, beta_aux = _aspect_rows(Cx, x_mask, params.query_for(user_domain),
                                     flow, sw.uniform_attention)
        A_u = fuse_auxiliary(A_u, A_x, flow)
    Ci = text_convolution((i_tokens, i_mask), E, flow)
    A_i, beta_i = _aspect_rows(Ci, i_mask, params.query_for(item_domain),
                               flow, sw.uniform_attention)

    if training and params.hp.keep_prob < 1.0:
        if dropout_rng is None:
            raise ConfigError("training forward needs a dropout rng")
        A_u = ad.mul(A_u, Tensor(dropout_mask(A_u.shape, params.hp.keep_prob,
                                              dropout_rng)))
        A_i = ad.mul(A_i, Tensor(dropout_mask(A_i.shape, params.hp.keep_prob,
                                              dropout_rng)))

    S = correlation_for_flow(params, flow_tag)
    transpose_w = flow_tag == "source_flow"
    S_ui = pairwise_matching(A_u, A_i, params.W, transpose_w)
    S_r = ad.mul(S, S_ui)
    base = _mean_cells(S_r, params.hp.M)
    preds = ad.add(ad.add(base, bias_u), bias_i)

    trace = None
    if with_trace:
        trace = {
            "S": S.values.copy(),
            "S_ui": S_ui.values.copy(),
            "S_r": S_r.values.copy(),
            "pred": preds.values.copy(),
            "beta_user": np.stack([b.values for b in beta_u], axis=-2),
            "beta_item": np.stack([b.values for b in beta_i], axis=-2),
        }
        if beta_aux is not None:
            trace["beta_aux"] = np.stack([b.values for b in beta_aux], axis=-2)
    return preds, trace


def forward_pair(params, user_doc, aux_doc, item_doc, b_u, b_i, flow_tag,
                 with_trace=True):
    """Single-pair scoring; returns (float prediction, trace)."""
    def batched(doc):
        if doc is None:
            return None
        tokens, mask = _doc_arrays(doc)
        return tokens[None, :], mask[None, :]

    preds, trace = forward_batch(
        params, batched(user_doc), batched(aux_doc), batched(item_doc),
        Tensor(np.array([float(b_u)])), Tensor(np.array([float(b_i)])),
        flow_tag, training=False, with_trace=with_trace,
    )
    if trace is not None:
        trace = {k: (v[0] if v.ndim and k != "S" else v) for k, v in trace.items()}
    return preds.item(), trace
