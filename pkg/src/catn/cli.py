"""Command-line entry point.

Commands: prepare (vocabulary + documents), synth (toy two-domain data),
train, eval, explain, gradcheck. Exit codes: 0 success, 1 configuration
error, 2 data error, 3 numerical divergence.
"""

import argparse
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import corpus as cp
from . import evaluation as ev
from . import gradcheck as gc
from . import scenario as sc
from . import synth
from .config import apply_overrides, load_config, save_config
from .errors import ConfigError, DataError, DivergenceError
from .model import ModelParams
from .training import train


def _required_out(cfg):
    if not cfg.out_dir:
        raise ConfigError("no output directory: set out_dir or pass --out")
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def _load_domain(path, what):
    if not path:
        raise ConfigError(f"{what} path not set in config")
    if not os.path.exists(path):
        raise DataError(f"{what} file not found: {path}")
    return cp.load_interactions(path)


def _load_filtered(cfg):
    source = cp.filter_interactions(
        _load_domain(cfg.source_interactions, "source_interactions"),
        cfg.min_user_interactions, cfg.min_item_interactions)
    target = cp.filter_interactions(
        _load_domain(cfg.target_interactions, "target_interactions"),
        cfg.min_user_interactions, cfg.min_item_interactions)
    return source, target


def _vocab_path(out_dir):
    return os.path.join(out_dir, "vocab.tsv")


def _load_vocab(out_dir):
    path = _vocab_path(out_dir)
    if not os.path.exists(path):
        raise DataError(f"vocabulary not found: {path} (run `catn prepare` first)")
    return cp.Vocabulary.load(path)


def _build_store(cfg, vocab, source, target_visible, overlap_users):
    return cp.DocumentStore(vocab, cfg.corpus_config(), source, target_visible,
                            overlap_users, aux_seed=cfg.seed)


def _config_from_args(args, **extra):
    cfg = load_config(args.config)
    over = dict(extra)
    for key in ("out", "eta", "variant", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            over["out_dir" if key == "out" else key] = v
    if getattr(args, "aspects", None) is not None:
        over["aspects"] = args.aspects
    if getattr(args, "latent", None) is not None:
        over["latent"] = args.latent
    return apply_overrides(cfg, **over)


def _load_model(cfg, vocab, out_dir):
    path = os.path.join(out_dir, "checkpoint.bin")
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path} (run `catn train` first)")
    params = ModelParams.build(cfg.hyper_params(), len(vocab), cfg.seed,
                               cfg.variant)
    params.load_param_dict(ckpt.load_params(path))
    return params


def _rebuild_scenario(cfg, out_dir, source, target):
    path = os.path.join(out_dir, "scenario.json")
    if not os.path.exists(path):
        raise DataError(f"scenario manifest not found: {path}")
    return sc.scenario_from_manifest(sc.load_manifest(path), source, target)


def cmd_prepare(args):
    cfg = _config_from_args(args)
    out_dir = _required_out(cfg)
    ccfg = cfg.corpus_config()
    source, target = _load_filtered(cfg)
    if not source or not target:
        print("warning: a domain is empty after filtering", file=sys.stderr)
    vocab = cp.build_vocabulary(source + target, ccfg)
    overlap = {it.user_id for it in source} & {it.user_id for it in target}
    docs = []
    for domain, inters in (("source", source), ("target", target)):
        for u in sorted({it.user_id for it in inters}):
            docs.append(cp.build_user_document(u, domain, inters, vocab, ccfg))
            docs.append(cp.build_auxiliary_document(
                u, domain, inters, overlap, vocab, ccfg, cfg.seed))
        for i in sorted({it.item_id for it in inters}):
            docs.append(cp.build_item_document(i, domain, inters, vocab, ccfg))
    vocab.save(_vocab_path(out_dir))
    cp.save_documents(os.path.join(out_dir, "documents.bin"), docs, ccfg.l)
    save_config(os.path.join(out_dir, "config.txt"), cfg)
    print(f"vocabulary: {len(vocab)} words; documents: {len(docs)}")
    return 0


def cmd_synth(args):
    if args.topics < 2:
        raise ConfigError(f"need at least 2 topics, got {args.topics}")
    source, target, truth = synth.generate(
        args.users, args.items, args.topics, args.seed,
        noise=args.noise, background_per_level=args.background)
    synth.write_dataset(args.out, source, target, truth)
    print(f"wrote {len(source)} source and {len(target)} target interactions "
          f"to {args.out}")
    return 0


def cmd_train(args):
    cfg = _config_from_args(args)
    out_dir = _required_out(cfg)
    source, target = _load_filtered(cfg)
    vocab = _load_vocab(out_dir)
    scenario = sc.split_scenario(source, target, cfg.eta, cfg.seed)
    store = _build_store(cfg, vocab, source,
                         scenario.training_visible_target(),
                         scenario.overlap_users)
    pretrained = None
    if cfg.embeddings_path:
        if not os.path.exists(cfg.embeddings_path):
            raise DataError(f"embeddings file not found: {cfg.embeddings_path}")
        pretrained = np.load(cfg.embeddings_path)
    params, history = train(scenario, store, cfg.hyper_params(),
                            cfg.train_config(), out_dir=out_dir,
                            pretrained_embeddings=pretrained,
                            train_embeddings=cfg.train_embeddings)
    sc.save_manifest(os.path.join(out_dir, "scenario.json"), scenario)
    save_config(os.path.join(out_dir, "config.txt"), cfg)
    best = min(h[3] for h in history)
    print(f"trained {len(history)} epochs; best validation MSE {best:.4f}")
    return 0


def cmd_eval(args):
    cfg = _config_from_args(args)
    out_dir = _required_out(cfg)
    source, target = _load_filtered(cfg)
    vocab = _load_vocab(out_dir)
    scenario = _rebuild_scenario(cfg, out_dir, source, target)
    store = _build_store(cfg, vocab, source,
                         scenario.training_visible_target(),
                         scenario.overlap_users)
    params = _load_model(cfg, vocab, out_dir)
    report = ev.evaluate(params, store, scenario, split=args.split,
                         batch_size=cfg.batch_size)
    ev.save_report(os.path.join(out_dir, f"report_{args.split}.json"), report)
    print(f"{args.split} MSE: {report.mse:.4f} over {report.n_pairs} pairs")
    return 0


def cmd_explain(args):
    cfg = _config_from_args(args)
    out_dir = _required_out(cfg)
    source, target = _load_filtered(cfg)
    vocab = _load_vocab(out_dir)
    scenario = _rebuild_scenario(cfg, out_dir, source, target)
    store = _build_store(cfg, vocab, source,
                         scenario.training_visible_target(),
                         scenario.overlap_users)
    params = _load_model(cfg, vocab, out_dir)
    explanation = ev.explain_pair(params, store, args.user, args.item)
    path = os.path.join(out_dir, f"explanation_{args.user}_{args.item}.json")
    ev.save_explanation(path, explanation)
    ev.export_correlation_heatmap_data(params, os.path.join(out_dir, "heatmap.csv"))
    p, q = explanation["argmax"]
    print(f"prediction {explanation['prediction']:.3f}; "
          f"strongest aspect pair ({p}, {q})")
    return 0


def cmd_gradcheck(args):
    worst, text = gc.main_report(seed=args.seed)
    print(text)
    return 0 if worst < 1e-4 else 1


def build_parser():
    p = argparse.ArgumentParser(
        prog="catn",
        description="Cross-domain aspect-transfer recommender for cold-start users",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, flags=True):
        sp.add_argument("--config", required=True, help="key = value config file")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        if flags:
            sp.add_argument("--eta", type=float, help="training-overlap fraction")
            sp.add_argument("--variant",
                            choices=("basic", "attn", "separate", "full"))
            sp.add_argument("--aspects", type=int, help="aspect count M")
            sp.add_argument("--latent", type=int, help="aspect dim k")
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("prepare", help="build vocabulary and documents")
    with_config(sp, flags=False)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("synth", help="generate a synthetic two-domain dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--users", type=int, default=20)
    sp.add_argument("--items", type=int, default=10)
    sp.add_argument("--topics", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--background", type=int, default=2,
                    help="background users per preference level")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train on a cold-start scenario")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a trained checkpoint")
    with_config(sp)
    sp.add_argument("--split", choices=("test", "validation"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("explain", help="export aspect-level evidence for a pair")
    with_config(sp)
    sp.add_argument("--user", required=True)
    sp.add_argument("--item", required=True)
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
