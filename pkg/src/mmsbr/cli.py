"""Command-line entry points: synth, train, eval, ablate, gradcheck.

Every command takes ``--config PATH`` (key=value lines) plus flag overrides
(flags win), writes its outputs plus the fully resolved configuration under
``--out``, and is idempotent given identical config and seed. MMSBR_THREADS
caps evaluation workers.
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys

import numpy as np

from . import config as cfgmod
from . import dataset, embedding_store, evalkit, trainer
from .config import ConfigError, RunConfig
from .diffcore import ModelParams, finite_diff_check

EMB_FILES = {
    "img": ("emb_img.mmeb", "actual_image"),
    "txt": ("emb_txt.mmeb", "actual_text"),
    "pseimg": ("emb_pseimg.mmeb", "pseudo_image"),
    "psetxt": ("emb_psetxt.mmeb", "pseudo_text"),
}


def _parser():
    p = argparse.ArgumentParser(prog="mmsbr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("synth", "generate a synthetic corpus plus embedding files"),
        ("train", "train on a corpus directory and keep the best checkpoint"),
        ("eval", "score a checkpoint on a corpus split"),
        ("ablate", "train and score every model variant"),
        ("gradcheck", "finite-difference check of the joint-loss gradients"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, help="override the seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
        sp.add_argument("--sign-w2", choices=("minus", "plus"), dest="sign_w2",
                        help="sign of the price-distance term in item scores")
        sp.add_argument("--literal-eq6", action="store_true", default=None,
                        help="contrastive term uses the raw softmax ratio, no log (diagnostic)")
        sp.add_argument("--literal-eq23", action="store_true", default=None,
                        help="price attention uses raw distances as weights (diagnostic)")
        sp.add_argument("--literal-eq26", action="store_true", default=None,
                        help="recommendation loss adds the full binary sum (diagnostic)")
        if name in ("train", "eval", "ablate"):
            sp.add_argument("--corpus", help="corpus directory (from synth)")
        if name == "eval":
            sp.add_argument("--checkpoint", help="checkpoint file (from train)")
            sp.add_argument("--variant", choices=evalkit.VARIANTS, help="wiring of the checkpoint")
            sp.add_argument("--split", dest="eval_split",
                            choices=("train", "val", "test", "test_plus", "cold"))
        if name == "train":
            sp.add_argument("--variant", choices=evalkit.VARIANTS, help="train this wiring")
            sp.add_argument("--grid", nargs="*", default=None, metavar="KEY=V1,V2",
                            help="e.g. --grid R=3,4 C=4 T=4: train every combination")
    return p


def _resolve(args):
    cfg = RunConfig()
    if args.config:
        cfg = cfgmod.parse_config_file(args.config, cfg)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        cfgmod.set_key(cfg, key.strip(), raw.strip())
    for flag in ("seed", "out", "corpus", "checkpoint", "sign_w2", "variant", "eval_split",
                 "literal_eq6", "literal_eq23", "literal_eq26"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    return cfg


def _load_bundle(cfg, corpus):
    mats = {}
    for attr, (fname, kind) in EMB_FILES.items():
        path = os.path.join(cfg.corpus, fname)
        mats[attr] = embedding_store.load_modality_matrix(path, corpus.n, kind)
    dims = {m.dim for m in mats.values()}
    if dims == {cfg.d}:
        return embedding_store.ModalityBundle(**mats)
    warm = np.array(sorted(corpus.warm_items()), dtype=int)
    return embedding_store.reduce_bundle(
        mats["img"], mats["txt"], mats["pseimg"], mats["psetxt"],
        d=cfg.d, basis_rows=warm, fit=cfg.pca_fit,
    )


def cmd_synth(cfg):
    corpus, bundle = embedding_store.synthesize_corpus(cfgmod.synth_from(cfg))
    os.makedirs(cfg.out, exist_ok=True)
    dataset.write_corpus(corpus, cfg.out)
    for attr, (fname, _) in EMB_FILES.items():
        embedding_store.save_modality_matrix(os.path.join(cfg.out, fname), getattr(bundle, attr))
    cfgmod.write_resolved(cfg, cfg.out)
    print(f"synth: {corpus.n} items, {len(corpus.sessions_train)}/{len(corpus.sessions_val)}/"
          f"{len(corpus.sessions_test)} train/val/test sessions -> {cfg.out}")
    return 0


def _train_once(cfg, corpus, bundle, out_dir):
    hyper, wiring = cfgmod.wiring_from(cfg)
    os.makedirs(out_dir, exist_ok=True)
    result = trainer.train(corpus, bundle, hyper, wiring,
                           log_path=os.path.join(out_dir, "train.log"))
    result.best_params.save(os.path.join(out_dir, "checkpoint.ckpt"))
    cfgmod.write_resolved(cfg, out_dir)
    return result


def _parse_grid(tokens):
    axes = []
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"--grid expects KEY=V1,V2,... got {tok!r}")
        key, raw = tok.split("=", 1)
        axes.append((key.strip(), [v.strip() for v in raw.split(",") if v.strip()]))
    return axes


def cmd_train(cfg, grid=None):
    corpus = dataset.load_corpus(cfg.corpus)
    bundle = _load_bundle(cfg, corpus)
    if not grid:
        result = _train_once(cfg, corpus, bundle, cfg.out)
        print(f"train: best val Prec@20 {result.best_val_prec20:.2f} -> {cfg.out}")
        return 0
    axes = _parse_grid(grid)
    names = [k for k, _ in axes]
    rows = []
    best = (-1.0, None)
    for combo in itertools.product(*(vals for _, vals in axes)):
        for key, value in zip(names, combo):
            cfgmod.set_key(cfg, key, value)
        tag = "_".join(f"{k}{v}" for k, v in zip(names, combo))
        result = _train_once(cfg, corpus, bundle, os.path.join(cfg.out, f"grid_{tag}"))
        rows.append((tag, result.best_val_prec20))
        if result.best_val_prec20 > best[0]:
            best = (result.best_val_prec20, tag)
        print(f"grid {tag}: best val Prec@20 {result.best_val_prec20:.2f}")
    with open(os.path.join(cfg.out, "grid_summary.csv"), "w") as fh:
        fh.write("combo,val_prec20\n")
        for tag, prec in rows:
            fh.write(f"{tag},{prec:.4f}\n")
    print(f"grid best: {best[1]} (val Prec@20 {best[0]:.2f})")
    return 0


def cmd_eval(cfg):
    corpus = dataset.load_corpus(cfg.corpus)
    params = ModelParams.load(cfg.checkpoint).astype(
        np.float32 if cfg.precision == "f32" else np.float64
    )
    hyper, wiring = cfgmod.wiring_from(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    if cfg.eval_split == "cold":
        sessions = evalkit.cold_target_sessions(corpus)
        ranks = evalkit.score_split(params, corpus, hyper, wiring, sessions)
        table = evalkit.metrics_from_ranks(ranks, ks=(10, 20))
        bucket_rows = evalkit.bucket_report(sessions, ranks) if sessions else []
        split_name = "cold"
    else:
        table, bucket_rows = evalkit.evaluate(
            params, corpus, hyper, wiring, split=cfg.eval_split, ks=(10, 20), buckets=True
        )
        split_name = cfg.eval_split
    rows = [(cfg.variant, split_name, k, table[k]["prec"], table[k]["mrr"]) for k in (10, 20)]
    evalkit.write_metric_csv(rows, os.path.join(cfg.out, "metrics.csv"))
    evalkit.write_bucket_csv(bucket_rows, os.path.join(cfg.out, "buckets.csv"))
    cfgmod.write_resolved(cfg, cfg.out)
    for _, split, k, prec, mrr in rows:
        print(f"{cfg.variant} {split} k={k}: Prec {prec:.2f} MRR {mrr:.2f}")
    return 0


def cmd_ablate(cfg):
    corpus = dataset.load_corpus(cfg.corpus)
    bundle = _load_bundle(cfg, corpus)
    os.makedirs(cfg.out, exist_ok=True)
    rows = []
    for variant in evalkit.VARIANTS:
        hyper, wiring = evalkit.build_variant(variant, cfgmod.hyper_from(cfg))
        result = trainer.train(corpus, bundle, hyper, wiring)
        table = evalkit.evaluate(result.best_params, corpus, hyper, wiring, split="test", ks=(20,))
        rows.append((variant, "test", 20, table[20]["prec"], table[20]["mrr"]))
        print(f"ablate {variant}: Prec@20 {table[20]['prec']:.2f} MRR@20 {table[20]['mrr']:.2f}")
    evalkit.write_metric_csv(rows, os.path.join(cfg.out, "ablation.csv"))
    cfgmod.write_resolved(cfg, cfg.out)
    return 0


def cmd_gradcheck(cfg):
    """d=8 model over a tiny synthetic fixture; prints pass/fail per group."""
    synth = embedding_store.SynthConfig(
        n_items=10, n_categories=3, d=8, n_sessions=120, style_clusters=3,
        price_weight=0.5, seed=cfg.seed, min_item_freq=1, rho=8,
    )
    corpus, bundle = embedding_store.synthesize_corpus(synth)
    hyper = trainer.HyperParams(
        d=8, C=2, T=2, R=2, heads=2, rho=8, batch=4, precision="f64",
        seed=cfg.seed, lam=cfg.lam, tau=cfg.tau, sign_w2=cfg.sign_w2,
    )
    _, wiring = cfgmod.wiring_from(cfg)
    params = trainer.init_params(hyper, corpus.n, corpus.n_categories, bundle=bundle, wiring=wiring)
    levels = np.array(corpus.levels(), dtype=int)
    cats = np.array(corpus.categories(), dtype=int)
    cands = np.array(sorted(corpus.warm_items()), dtype=int)
    pos_of = {item: i for i, item in enumerate(cands)}
    model = trainer.Model(params, hyper, wiring, levels, cats, cands)
    sessions = [s for s in corpus.sessions_train if len(s.context) == 3][:4]
    if len(sessions) < 4:
        sessions = sorted(corpus.sessions_train, key=lambda s: abs(len(s.context) - 3))[:4]
    batch = trainer.make_batch(sessions, pos_of, levels, cats)
    report = finite_diff_check(params, lambda: model.forward(batch)[0], h=1e-5, tolerance=1e-3)
    print(report.format())
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "gradcheck.txt"), "w") as fh:
        fh.write(report.format() + "\n")
    cfgmod.write_resolved(cfg, cfg.out)
    return 0 if report.passed else 1


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, grid=args.grid)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        raise ConfigError(f"unknown command {args.command}")
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
