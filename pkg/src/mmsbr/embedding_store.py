"""Precomputed modality embeddings: loading, PCA reduction and synthesis.

Embedding files hold the *outputs* of upstream image/text encoders and
image-to-text / text-to-image generators; nothing here runs such models.
The synthetic generator plants a latent style per item cluster and renders
it through distinct linear views per modality, so desk-scale corpora carry
a recoverable preference signal plus a per-item price band.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dataset import Interaction, build_corpus

MAGIC = b"MMEB"
KINDS = ("actual_image", "actual_text", "pseudo_image", "pseudo_text")


class EmbeddingLoadError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    kind: str
    data: np.ndarray  # (n, dim)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown embedding kind '{self.kind}'")
        if not np.all(np.isfinite(self.data)):
            raise EmbeddingLoadError(f"{self.kind}: non-finite entries")

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def dim(self):
        return self.data.shape[1]


@dataclass
class ModalityBundle:
    img: EmbeddingMatrix
    txt: EmbeddingMatrix
    pseimg: EmbeddingMatrix
    psetxt: EmbeddingMatrix

    def __post_init__(self):
        mats = [self.img, self.txt, self.pseimg, self.psetxt]
        if len({m.rows for m in mats}) != 1 or len({m.dim for m in mats}) != 1:
            raise ValueError("bundle matrices must share n and d")

    @property
    def n(self):
        return self.img.rows

    @property
    def d(self):
        return self.img.dim


@dataclass
class SynthConfig:
    n_items: int = 200
    n_categories: int = 4
    d: int = 16
    n_sessions: int = 5000
    style_clusters: int = 5
    price_weight: float = 0.5
    noise_sigma: float = 0.0
    pseudo_fidelity: float = 1.0
    seed: int = 0
    # extras beyond the core knobs
    cold_frac: float = 0.0
    min_item_freq: int = 5
    rho: int = 100
    image_signal: float = 1.0  # 0..1, share of the latent visible to images
    text_signal: float = 1.0
    modality_dropout: float = 0.0  # fraction of items with one uninformative modality

    def __post_init__(self):
        for name in ("n_items", "n_categories", "d", "n_sessions", "style_clusters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (0.0 <= self.price_weight <= 1.0 and 0.0 <= self.pseudo_fidelity <= 1.0):
            raise ValueError("price_weight and pseudo_fidelity must be in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


# ---------------------------------------------------------------------------
# file io
# ---------------------------------------------------------------------------


def save_modality_matrix(path, matrix):
    data = np.ascontiguousarray(matrix.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def load_modality_matrix(path, expected_n, kind):
    """Read an embedding matrix (binary MMEB or CSV) and validate it."""
    path = str(path)
    if path.endswith(".csv"):
        rows = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rows.append([float(t) for t in line.split(",")])
                except ValueError as exc:
                    raise EmbeddingLoadError(f"{path}: bad value at row {lineno}") from exc
        data = np.asarray(rows, dtype=np.float64)
        if data.ndim != 2:
            raise EmbeddingLoadError(f"{path}: ragged rows")
    else:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MAGIC:
                raise EmbeddingLoadError(f"{path}: bad magic {magic!r}")
            n, dim = struct.unpack("<II", fh.read(8))
            payload = fh.read()
        expected_bytes = n * dim * 4
        if len(payload) != expected_bytes:
            raise EmbeddingLoadError(f"{path}: payload {len(payload)} bytes, expected {expected_bytes}")
        data = np.frombuffer(payload, dtype="<f4").reshape(n, dim).astype(np.float64)
    if data.shape[0] != expected_n:
        raise EmbeddingLoadError(f"{path}: row count {data.shape[0]} ≠ {expected_n}")
    bad = np.argwhere(~np.isfinite(data))
    if bad.size:
        raise EmbeddingLoadError(f"{path}: non-finite value at row {int(bad[0][0])}")
    return EmbeddingMatrix(kind=kind, data=data)


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


def pca_reduce(matrix, d, basis_rows):
    """Project onto the top-d principal components of the mean-centered
    basis rows (training items only); the same projection is applied to all
    rows, including items never seen in training. Rank-deficient inputs pad
    the missing components with zero directions. No whitening.
    """
    if d > matrix.dim:
        raise ValueError(f"cannot reduce width {matrix.dim} to {d}")
    basis = matrix.data[np.asarray(basis_rows, dtype=int)]
    mean = basis.mean(axis=0)
    centered = basis - mean
    # Rows of vt are principal directions, ordered by singular value.
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-12)) if s.size else 0
    comps = np.zeros((d, matrix.dim), dtype=matrix.data.dtype)
    take = min(d, rank)
    comps[:take] = vt[:take]
    projected = (matrix.data - mean) @ comps.T
    return EmbeddingMatrix(kind=matrix.kind, data=projected)


def reduce_bundle(img, txt, pseimg, psetxt, d, basis_rows, fit="per_kind"):
    """Reduce four raw matrices to width d.

    fit='per_kind' fits one basis per matrix; fit='joint' fits one basis per
    modality on the stacked (actual, pseudo) rows, preserving actual/pseudo
    geometry through the projection.
    """
    if fit == "per_kind":
        return ModalityBundle(
            img=pca_reduce(img, d, basis_rows),
            txt=pca_reduce(txt, d, basis_rows),
            pseimg=pca_reduce(pseimg, d, basis_rows),
            psetxt=pca_reduce(psetxt, d, basis_rows),
        )
    if fit != "joint":
        raise ValueError(f"unknown pca fit mode '{fit}'")
    out = {}
    for actual, pseudo, names in ((img, pseimg, ("img", "pseimg")), (txt, psetxt, ("txt", "psetxt"))):
        stackmat = EmbeddingMatrix(
            kind=actual.kind, data=np.concatenate([actual.data, pseudo.data], axis=0)
        )
        rows = np.asarray(basis_rows, dtype=int)
        joint_rows = np.concatenate([rows, rows + actual.rows])
        reduced = pca_reduce(stackmat, d, joint_rows)
        out[names[0]] = EmbeddingMatrix(kind=actual.kind, data=reduced.data[: actual.rows])
        out[names[1]] = EmbeddingMatrix(kind=pseudo.kind, data=reduced.data[actual.rows :])
    return ModalityBundle(**out)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

_LATENT_DIM = 12
_RAW_IMG_DIM = 96
_RAW_TXT_DIM = 80
_STYLE_JITTER = 0.25
_AFFINITY_BETA = 3.0
_N_DAYS = 60
_BAND_HALFWIDTH_FRAC = 0.08
_RENDER_SCALE = 4.0  # raw embedding units; keeps post-PCA feature stds O(1)


def synthesize_corpus(config):
    """Generate (SessionCorpus, ModalityBundle) with planted preferences.

    Each item carries a latent content vector (cluster style + jitter);
    actual image/text embeddings are distinct linear views of it plus noise,
    and pseudo embeddings re-render a fidelity-blended content through the
    *other* modality's pipeline into the same space as the paired actual
    matrix. Sessions come from users with one preferred cluster and one
    acceptable price-level band: items are drawn with weight
    exp(beta * style affinity) * band_factor, where band_factor is 1 inside
    the band and (1 - price_weight) outside. Fully deterministic per seed.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)

    styles = rng.normal(size=(cfg.style_clusters, _LATENT_DIM))
    styles /= np.linalg.norm(styles, axis=1, keepdims=True)
    cluster_of = rng.integers(0, cfg.style_clusters, size=cfg.n_items)
    content = styles[cluster_of] + _STYLE_JITTER * rng.normal(size=(cfg.n_items, _LATENT_DIM))

    # Per-modality view of the latent. image_signal/text_signal < 1 hide the
    # tail of the latent dims from that modality's view.
    view_img = rng.normal(size=(_LATENT_DIM, _RAW_IMG_DIM)) / np.sqrt(_LATENT_DIM)
    view_txt = rng.normal(size=(_LATENT_DIM, _RAW_TXT_DIM)) / np.sqrt(_LATENT_DIM)
    keep_img = max(1, int(round(cfg.image_signal * _LATENT_DIM)))
    keep_txt = max(1, int(round(cfg.text_signal * _LATENT_DIM)))
    view_img[keep_img:] = 0.0
    view_txt[keep_txt:] = 0.0

    # Per-item modality reliability: a dropped modality shows plausible but
    # unrelated content, so per-item gating is required to fuse well.
    fresh = rng.normal(size=(cfg.n_items, _LATENT_DIM))
    roll = rng.uniform(size=cfg.n_items)
    img_content = np.where((roll < cfg.modality_dropout / 2)[:, None], fresh, content)
    txt_content = np.where(
        ((roll >= cfg.modality_dropout / 2) & (roll < cfg.modality_dropout))[:, None], fresh, content
    )

    def render(latent, view, raw_dim, noise):
        out = latent @ view + noise * rng.normal(size=(cfg.n_items, raw_dim))
        return _RENDER_SCALE * out

    img_raw = render(img_content, view_img, _RAW_IMG_DIM, cfg.noise_sigma)
    txt_raw = render(txt_content, view_txt, _RAW_TXT_DIM, cfg.noise_sigma)
    # Pseudo modality: content as recovered from the *other* modality,
    # blended with unrelated content at (1 - fidelity), rendered cleanly.
    stray = styles[rng.integers(0, cfg.style_clusters, size=cfg.n_items)] + _STYLE_JITTER * rng.normal(
        size=(cfg.n_items, _LATENT_DIM)
    )

    def blend(c):
        return cfg.pseudo_fidelity * c + (1.0 - cfg.pseudo_fidelity) * stray

    pseimg_raw = _RENDER_SCALE * (blend(txt_content) @ view_img)  # text-derived, image space
    psetxt_raw = _RENDER_SCALE * (blend(img_content) @ view_txt)  # image-derived, text space

    # Categories and prices.
    category_of = rng.integers(0, cfg.n_categories, size=cfg.n_items)
    cat_lo = rng.uniform(5.0, 50.0, size=cfg.n_categories)
    cat_hi = cat_lo + rng.uniform(20.0, 200.0, size=cfg.n_categories)
    u = rng.uniform(0.0, 1.0, size=cfg.n_items)
    prices = cat_lo[category_of] + u * (cat_hi[category_of] - cat_lo[category_of])
    # Provisional levels (generator-side) for the band logic.
    levels = np.minimum((u * cfg.rho).astype(int), cfg.rho - 1)

    n_cold = int(round(cfg.cold_frac * cfg.n_items))
    cold = rng.permutation(cfg.n_items)[:n_cold] if n_cold else np.empty(0, dtype=int)
    cold_mask = np.zeros(cfg.n_items, dtype=bool)
    cold_mask[cold] = True
    test_start_day = int(_N_DAYS * 0.9)

    affinity = styles @ styles.T  # cluster-level cosine affinities
    halfwidth = max(1, int(cfg.rho * _BAND_HALFWIDTH_FRAC))

    interactions = []
    sessions_per_day = max(1, cfg.n_sessions // _N_DAYS)
    for s_idx in range(cfg.n_sessions):
        day = min(s_idx // sessions_per_day, _N_DAYS - 1)
        pref = rng.integers(0, cfg.style_clusters)
        center = rng.integers(0, cfg.rho)
        in_band = np.abs(levels - center) <= halfwidth
        w = np.exp(_AFFINITY_BETA * affinity[cluster_of, pref])
        w = w * np.where(in_band, 1.0, 1.0 - cfg.price_weight)
        if day < test_start_day:
            w = np.where(cold_mask, 0.0, w)
        else:
            w = np.where(cold_mask, w * 3.0, w)  # fresh items get promoted
        total = w.sum()
        if total <= 0:
            continue
        length = int(rng.integers(2, 9))
        picks = rng.choice(cfg.n_items, size=length, p=w / total)
        base = day * 86400.0 + float(rng.integers(0, 80000))
        for j, item in enumerate(picks):
            interactions.append(
                Interaction(
                    user_tag=f"u{s_idx}",
                    item_id=int(item),
                    timestamp=base + j * 10.0,
                    price=float(prices[item]),
                    category_id=int(category_of[item]),
                )
            )

    corpus = build_corpus(
        interactions, rho=cfg.rho, min_item_freq=cfg.min_item_freq, clamp_prices=True
    )

    # The corpus may not cover every generated item (frequency filter, dense
    # remap); align embedding rows with the corpus item order.
    kept = sorted({x.item_id for x in interactions})
    keep_idx = np.asarray(kept, dtype=int)

    def cut(kind, raw):
        return EmbeddingMatrix(kind=kind, data=raw[keep_idx])

    warm = corpus.warm_items()
    basis_rows = np.asarray(sorted(warm), dtype=int)
    bundle = reduce_bundle(
        cut("actual_image", img_raw),
        cut("actual_text", txt_raw),
        cut("pseudo_image", pseimg_raw),
        cut("pseudo_text", psetxt_raw),
        d=cfg.d,
        basis_rows=basis_rows,
        fit="joint",
    )
    return corpus, bundle
