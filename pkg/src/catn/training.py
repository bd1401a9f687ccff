"""Alternating two-flow optimization with Adam and early stopping.

Every batch mixes pairs of both flows; the trainer runs a source-flow
step then a target-flow step, each with its own loss, backward pass, and
parameter update. Shared tensors therefore receive two updates per batch.
Validation MSE on the held-out cold-start validation users (target flow,
dropout off) drives early stopping; the best checkpoint is restored at
the end, bit-for-bit.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Graph, Tensor
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import assemble_flow_inputs, mse_over_pairs
from .model import ModelParams, apply_variant, forward_batch
from .scenario import make_batches

_DROP_STREAM = 0xD509
_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 256
    lam: float = 1e-4
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    variant: str = "full"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        apply_variant(self.variant)


class Adam:
    """Adam with bias correction; state per parameter key."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = {}

    def step_array(self, key, values, grad):
        """Update ``values`` in place given ``grad``; returns ``values``."""
        t = self._t.get(key, 0) + 1
        m = self._m.get(key)
        if m is None:
            m = np.zeros_like(values, dtype=np.float64)
            v = np.zeros_like(values, dtype=np.float64)
        else:
            v = self._v[key]
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self._m[key] = m
        self._v[key] = v
        self._t[key] = t
        return values

    def step_tensor(self, key, tensor):
        if tensor.grad is None:
            return
        self.step_array(key, tensor.values, tensor.grad)
        tensor.zero_grad()

    def step_scalar(self, key, value, grad):
        out = np.array([value])
        self.step_array(key, out, np.array([grad]))
        return float(out[0])


def loss(batch_pairs, predictions, params, lam, flow_tag):
    """Flow loss: batch MSE plus λ × sum of squares of the flow's weight
    matrices. Bias tables stay out of the penalty.
    """
    if not batch_pairs:
        raise DataError("empty batch")
    ratings = np.array([p[2] for p in batch_pairs], dtype=np.float64)
    err = ad.sub(predictions, Tensor(ratings))
    total = ad.mean_all(ad.mul(err, err))
    if lam > 0:
        reg = None
        for t in params.regularized_for_flow(flow_tag):
            flat = ad.reshape(t, (t.size,))
            ss = ad.weighted_sum(flat, flat)
            reg = ss if reg is None else ad.add(reg, ss)
        if reg is not None:
            total = ad.add(total, ad.mul(Tensor(np.asarray(float(lam))), reg))
    return total


def _flow_step(params, store, pairs, flow_tag, tc, adam, drop_rng):
    user_docs, aux_docs, item_docs, users, items = assemble_flow_inputs(
        params, store, pairs, flow_tag)
    rating_domain = params.rating_domain(flow_tag)
    bu = Tensor(np.array([params.user_bias[rating_domain][u] for u in users]),
                requires_grad=True)
    bi = Tensor(np.array([params.item_bias[rating_domain][i] for i in items]),
                requires_grad=True)
    with Graph() as g:
        preds, _ = forward_batch(params, user_docs, aux_docs, item_docs,
                                 bu, bi, flow_tag, training=True,
                                 dropout_rng=drop_rng)
        step_loss = loss(pairs, preds, params, tc.lam, flow_tag)
        loss_val = float(step_loss.values)
        if not np.isfinite(loss_val):
            raise DivergenceError(f"{flow_tag} loss became {loss_val}")
        g.backward(step_loss)

    for name, t in params.trainable_for_flow(flow_tag):
        adam.step_tensor(name, t)
    if params.train_embeddings:
        params.embeddings.values[0] = 0.0  # PAD row pinned

    for kind, ids, bt in (("user", users, bu), ("item", items, bi)):
        table = (params.user_bias if kind == "user" else params.item_bias)[rating_domain]
        acc = {}
        for eid, gv in zip(ids, bt.grad):
            acc[eid] = acc.get(eid, 0.0) + float(gv)
        for eid, gv in acc.items():
            key = ("bias", kind, rating_domain, eid)
            table[eid] = adam.step_scalar(key, table[eid], gv)
    return loss_val


def train(scenario, store, hp, tc, out_dir=None, clock=None,
          pretrained_embeddings=None, train_embeddings=False):
    """Full optimization; returns (ModelParams, history rows).

    History rows are (epoch, train_loss_source, train_loss_target,
    valid_mse, wall_seconds). When ``out_dir`` is given, the best
    checkpoint and the history CSV are written there.
    """
    if clock is None:
        clock = time.monotonic
    params = ModelParams.build(
        hp, len(store.vocab), tc.seed, tc.variant,
        pretrained_embeddings=pretrained_embeddings,
        train_embeddings=train_embeddings,
    )
    for flow_tag in ("source_flow", "target_flow"):
        dom = params.rating_domain(flow_tag)
        pairs = scenario.training_pairs(flow_tag)
        params.ensure_bias("user", dom, [p[0] for p in pairs])
        params.ensure_bias("item", dom, [p[1] for p in pairs])

    adam = Adam(tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
    drop_rng = np.random.default_rng([int(tc.seed) & _MASK64, _DROP_STREAM])
    valid_pairs = scenario.heldout_pairs("validation")

    t0 = clock()
    history = []
    best_mse = np.inf
    best_snapshot = None
    since_best = 0
    for epoch in range(1, tc.max_epochs + 1):
        src_losses = []
        tgt_losses = []
        for batch in make_batches(scenario, tc.batch_size, tc.seed, epoch):
            by_flow = {"source_flow": [], "target_flow": []}
            for pair in batch.pairs:
                by_flow[pair[3]].append(pair)
            if by_flow["source_flow"]:
                src_losses.append(_flow_step(
                    params, store, by_flow["source_flow"], "source_flow",
                    tc, adam, drop_rng))
            if by_flow["target_flow"]:
                tgt_losses.append(_flow_step(
                    params, store, by_flow["target_flow"], "target_flow",
                    tc, adam, drop_rng))
        params.update_bias_fallbacks()
        valid_mse = mse_over_pairs(params, store, valid_pairs,
                                   batch_size=tc.batch_size)
        history.append((
            epoch,
            float(np.mean(src_losses)) if src_losses else float("nan"),
            float(np.mean(tgt_losses)) if tgt_losses else float("nan"),
            valid_mse,
            clock() - t0,
        ))
        if valid_mse < best_mse:
            best_mse = valid_mse
            best_snapshot = {k: v.copy() for k, v in params.to_param_dict().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= tc.patience:
                break

    if best_snapshot is not None:
        params.load_param_dict(best_snapshot)
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        ckpt.save_params(os.path.join(out_dir, "checkpoint.bin"),
                         params.to_param_dict())
        write_history(os.path.join(out_dir, "history.csv"), history)
    return params, history


def write_history(path, history):
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,train_loss_source,train_loss_target,valid_mse,wall_seconds\n")
        for epoch, ls, lt, vm, ws in history:
            f.write(f"{epoch},{ls!r},{lt!r},{vm!r},{ws!r}\n")
