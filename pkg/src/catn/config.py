"""Run configuration: one flat key-value text file.

Lines are ``key = value``; ``#`` starts a comment; blank lines ignored.
Unknown keys are errors — typos should not pass silently. Commands write
the fully-resolved configuration (file values plus flag overrides) into
the output directory, so any artifact can be reproduced from that copy
alone.
"""

import os
from dataclasses import dataclass, fields, replace

from .corpus import CorpusConfig
from .errors import ConfigError
from .model import HyperParams, VARIANTS
from .training import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    source_interactions: str = ""
    target_interactions: str = ""
    out_dir: str = ""
    embeddings_path: str = ""
    # corpus
    doc_length: int = 500
    vocab_cap: int = 20000
    df_cap: float = 0.5
    stopwords: str = ""
    min_user_interactions: int = 0
    min_item_interactions: int = 0
    # model
    embed_dim: int = 300
    filters: int = 50
    window: int = 3
    latent: int = 32
    aspects: int = 3
    alpha: float = 0.01
    keep_prob: float = 0.8
    l2: float = 1e-4
    train_embeddings: bool = False
    # training
    learning_rate: float = 0.001
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    variant: str = "full"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # scenario
    eta: float = 1.0
    seed: int = 0

    def corpus_config(self):
        stop = frozenset(w for w in (s.strip() for s in self.stopwords.split(",")) if w)
        return CorpusConfig(l=self.doc_length, vocab_cap=self.vocab_cap,
                            df_cap=self.df_cap, stopword_list=stop, seed=self.seed)

    def hyper_params(self):
        return HyperParams(d=self.embed_dim, n=self.filters, s=self.window,
                           k=self.latent, M=self.aspects, l=self.doc_length,
                           alpha=self.alpha, keep_prob=self.keep_prob, lam=self.l2)

    def train_config(self):
        return TrainConfig(learning_rate=self.learning_rate,
                           batch_size=self.batch_size, lam=self.l2,
                           max_epochs=self.max_epochs, patience=self.patience,
                           seed=self.seed, variant=self.variant,
                           beta1=self.adam_beta1, beta2=self.adam_beta2,
                           eps=self.adam_eps)


_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def _parse_value(name, kind, raw):
    if kind is bool:
        v = _BOOL_WORDS.get(raw.strip().lower())
        if v is None:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return v
    try:
        return kind(raw.strip()) if kind is not str else raw.strip()
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {raw!r}")


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    kinds = {f.name: f.type for f in fields(RunConfig)}
    # dataclass stores annotations as strings under future semantics; map names
    kindmap = {"str": str, "int": int, "float": float, "bool": bool}
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
            kind = kinds[key]
            if isinstance(kind, str):
                kind = kindmap[kind]
            values[key] = _parse_value(key, kind, raw)
    cfg = RunConfig(**values)
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    return cfg


def apply_overrides(cfg, **overrides):
    kwargs = {k: v for k, v in overrides.items() if v is not None}
    if not kwargs:
        return cfg
    cfg = replace(cfg, **kwargs)
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}, got {cfg.variant!r}")
    return cfg


def save_config(path, cfg):
    with open(path, "w", encoding="utf-8") as f:
        for fld in fields(RunConfig):
            v = getattr(cfg, fld.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            f.write(f"{fld.name} = {v}\n")
