"""Run configuration: key=value files with flag overrides (flags win).

Unknown keys are rejected by name. Every command writes its fully resolved
configuration next to its outputs so runs can be reproduced byte-for-byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .embedding_store import SynthConfig
from .trainer import HyperParams, Wiring


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    out: str = "runs/out"
    corpus: str = ""
    checkpoint: str = ""
    # model / training
    d: int = 64
    batch: int = 100
    lr: float = 0.001
    R: int = 3
    C: int = 4
    T: int = 4
    heads: int = 2
    rho: int = 100
    lam: float = 0.01
    tau: float = 1.0
    epochs: int = 20
    seed: int = 1
    sign_w2: str = "minus"
    precision: str = "f32"
    contrastive_scope: str = "batch"
    pca_fit: str = "per_kind"
    # synthesis
    n_items: int = 200
    n_categories: int = 4
    n_sessions: int = 5000
    style_clusters: int = 5
    price_weight: float = 0.5
    noise_sigma: float = 0.0
    pseudo_fidelity: float = 1.0
    cold_frac: float = 0.0
    min_item_freq: int = 5
    image_signal: float = 1.0
    text_signal: float = 1.0
    # evaluation / variants
    variant: str = "full"
    eval_split: str = "test"
    literal_eq6: bool = False
    literal_eq23: bool = False
    literal_eq26: bool = False


_ALIASES = {"lambda": "lam"}  # config-file name -> attribute


def _field_types():
    return {f.name: f.type for f in fields(RunConfig)}


def _coerce(name, raw, kind):
    try:
        if kind == "bool" or kind is bool:
            if str(raw).lower() in ("1", "true", "yes", "on"):
                return True
            if str(raw).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for '{name}': {raw!r}") from exc


def set_key(cfg, key, raw):
    attr = _ALIASES.get(key, key)
    types = _field_types()
    if attr not in types:
        raise ConfigError(f"unknown config key '{key}'")
    setattr(cfg, attr, _coerce(key, raw, types[attr]))


def parse_config_file(path, cfg=None):
    cfg = cfg or RunConfig()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = (part.strip() for part in line.split("=", 1))
            try:
                set_key(cfg, key, raw)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    return cfg


def write_resolved(cfg, out_dir, name="resolved.kv"):
    os.makedirs(out_dir, exist_ok=True)
    inverse = {v: k for k, v in _ALIASES.items()}
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        key = inverse.get(f.name, f.name)
        lines.append(f"{key}={getattr(cfg, f.name)}")
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def hyper_from(cfg):
    return HyperParams(
        d=cfg.d,
        batch=cfg.batch,
        lr=cfg.lr,
        R=cfg.R,
        C=cfg.C,
        T=cfg.T,
        heads=cfg.heads,
        rho=cfg.rho,
        lam=cfg.lam,
        tau=cfg.tau,
        epochs=cfg.epochs,
        seed=cfg.seed,
        sign_w2=cfg.sign_w2,
        precision=cfg.precision,
        contrastive_scope=cfg.contrastive_scope,
    )


def synth_from(cfg):
    return SynthConfig(
        n_items=cfg.n_items,
        n_categories=cfg.n_categories,
        d=cfg.d,
        n_sessions=cfg.n_sessions,
        style_clusters=cfg.style_clusters,
        price_weight=cfg.price_weight,
        noise_sigma=cfg.noise_sigma,
        pseudo_fidelity=cfg.pseudo_fidelity,
        seed=cfg.seed,
        cold_frac=cfg.cold_frac,
        min_item_freq=cfg.min_item_freq,
        rho=cfg.rho,
        image_signal=cfg.image_signal,
        text_signal=cfg.text_signal,
    )


def wiring_from(cfg):
    from .evalkit import build_variant

    hyper, wiring = build_variant(cfg.variant, hyper_from(cfg))
    wiring.literal_eq6 = cfg.literal_eq6
    wiring.literal_eq23 = cfg.literal_eq23
    wiring.literal_eq26 = cfg.literal_eq26
    return hyper, wiring
