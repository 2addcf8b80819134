"""Deterministic branch: descriptive (image/text) modeling.

Contrastive refinement treats an item's actual embedding and its generated
counterpart in the same space as a positive pair against in-batch negatives.
Fusion renders each modality into a feature sequence, then a stack of
transformer layers ferries information between modalities through a small
set of shared trainable pivot tokens. A session-level attention over the
fused item embeddings yields the user's deterministic taste.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class FusionConfig:
    d: int
    C: int  # feature views per modality
    T: int  # pivot tokens
    R: int  # stacked fusion layers
    heads: int = 2

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise dc.ShapeError(f"width {self.d} not divisible by {self.heads} heads")


def mlp3(x, params, prefix):
    """Two-hidden-layer feed-forward: affine, relu, affine, relu, affine."""
    h = dc.relu(dc.add(dc.matmul(x, params[f"{prefix}.w0"]), params[f"{prefix}.b0"]))
    h = dc.relu(dc.add(dc.matmul(h, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return dc.add(dc.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def gen_feature_sequences(e_img, e_txt, params, cfg):
    """Per-item feature sequences: row k is the k-th view MLP of the
    modality embedding. Shapes (N, C, d)."""
    z_img = dc.stack([mlp3(e_img, params, f"det.mlp_img.{k}") for k in range(cfg.C)], axis=1)
    z_txt = dc.stack([mlp3(e_txt, params, f"det.mlp_txt.{k}") for k in range(cfg.C)], axis=1)
    return z_img, z_txt


def transformer_layer(f, params, prefix, heads):
    """Pre-LN residual block on a (N, k, d) sequence.

    F* = MSA(LN(F)) + F; out = FCL(LN(F*)) + F*, with h attention heads of
    width d/h and a relu FCL of inner width 2d. No positional encoding, so
    the layer is equivariant to row permutations (attention sums accumulate
    in value order, making that exact).
    """
    n, k, d = f.shape
    if d % heads != 0:
        raise dc.ShapeError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    x = dc.layer_norm(f, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    q = dc.add(dc.matmul(x, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    kk = dc.add(dc.matmul(x, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = dc.add(dc.matmul(x, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])

    def split_heads(t):
        return dc.transpose(dc.reshape(t, (n, k, heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = split_heads(q), split_heads(kk), split_heads(v)
    scores = dc.scale(dc.matmul(qh, dc.transpose(kh)), 1.0 / np.sqrt(dh))
    w = dc.softmax(scores)
    ctx = dc.attn_apply(w, vh)
    ctx = dc.reshape(dc.transpose(ctx, (0, 2, 1, 3)), (n, k, d))
    msa = dc.add(dc.matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])
    fstar = dc.add(msa, f)

    x2 = dc.layer_norm(fstar, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = dc.relu(dc.add(dc.matmul(x2, params[f"{prefix}.fc1.w"]), params[f"{prefix}.fc1.b"]))
    out = dc.add(dc.matmul(h, params[f"{prefix}.fc2.w"]), params[f"{prefix}.fc2.b"])
    return dc.add(out, fstar)


def pivot_fusion(z_img, z_txt, params, cfg, use_image=True, use_text=True):
    """Hierarchical pivot fusion over R layers.

    Each layer runs the image sequence plus the pivot through a transformer,
    averages the returned pivot with the incoming one, then does the same on
    the text side; the final pivot tokens are flattened through an output
    MLP into one d-dim descriptive embedding per item.
    """
    some = z_img if z_img is not None else z_txt
    n = some.shape[0]
    pivot = dc.broadcast_to(dc.reshape(params["det.pivot"], (1, cfg.T, cfg.d)), (n, cfg.T, cfg.d))
    for layer in range(cfg.R):
        # One transformer per layer, applied to the image pass then the text
        # pass (the layer's weights are shared between the two passes).
        if use_image:
            seq = dc.concat([z_img, pivot], axis=1)
            out = transformer_layer(seq, params, f"det.trans.{layer}", cfg.heads)
            z_img, p_img = dc.split(out, [cfg.C, cfg.T], axis=1)
            pivot = dc.scale(dc.add(p_img, pivot), 0.5)
        if use_text:
            seq = dc.concat([z_txt, pivot], axis=1)
            out = transformer_layer(seq, params, f"det.trans.{layer}", cfg.heads)
            z_txt, p_txt = dc.split(out, [cfg.C, cfg.T], axis=1)
            pivot = dc.scale(dc.add(p_txt, pivot), 0.5)
    flat = dc.reshape(pivot, (n, cfg.T * cfg.d))
    return mlp3(flat, params, "det.mlp_out")


def mlp_fusion(e_img, e_txt, params):
    """Ablation fusion: concatenate the two modality embeddings and map them
    through one two-hidden-layer MLP."""
    return mlp3(dc.concat([e_img, e_txt], axis=-1), params, "det.mlp_fuse")


def vanilla_attention(e_seq, mask, params, return_alpha=False):
    """Session attention: alpha_k = u . sigmoid(A1 e_k + A2 e_mean + b),
    taste = sum_k alpha_k e_k. Padded positions are excluded from both the
    mean and the sum; alphas are deliberately unnormalized.

    e_seq: (B, m, d); mask: (B, m) bool, True = real position.
    """
    b, m, d = e_seq.shape
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1, keepdims=True).astype(e_seq.dtype)
    counts = np.maximum(counts, 1.0)

    kept = dc.masked_fill(e_seq, ~mask[:, :, None], 0.0)
    total = dc.sum_(kept, axis=1)  # (B, d)
    e_bar = dc.mul(total, dc.constant(np.broadcast_to(1.0 / counts, (b, d)).copy(), dtype=e_seq.dtype))

    proj_k = dc.matmul(e_seq, params["det.attn.A1"])  # (B, m, d)
    proj_bar = dc.matmul(e_bar, params["det.attn.A2"])  # (B, d)
    proj_bar = dc.broadcast_to(dc.reshape(proj_bar, (b, 1, d)), (b, m, d))
    gate = dc.sigmoid(dc.add(dc.add(proj_k, proj_bar), params["det.attn.b"]))
    alpha = dc.matmul(gate, dc.reshape(params["det.attn.u"], (d, 1)))  # (B, m, 1)
    alpha = dc.masked_fill(alpha, ~mask[:, :, None], 0.0)
    taste = dc.matmul(dc.transpose(alpha), e_seq)  # (B, 1, d)
    taste = dc.reshape(taste, (b, d))
    if return_alpha:
        return taste, dc.reshape(alpha, (b, m))
    return taste


def contrastive_loss(img, pseimg, txt, psetxt, tau=1.0, literal=False):
    """Pseudo-modality contrastive objective over a batch of B >= 2 items.

    For each item the positive is its own generated counterpart in the same
    modality space; the other items' counterparts are negatives. Image and
    text terms add. ``literal`` evaluates the raw softmax ratio without the
    log (diagnostic only; unbounded as a loss).
    """
    b = img.shape[0]
    if b < 2:
        raise ValueError(f"contrastive batch needs >= 2 items, got {b}")

    def term(actual, pseudo):
        sims = dc.matmul(dc.normalize_rows(actual), dc.transpose(dc.normalize_rows(pseudo)))
        probs = dc.softmax(dc.scale(sims, 1.0 / tau))
        pos = dc.gather_positions(probs, np.arange(b))
        if literal:
            return dc.scale(dc.mean(pos), -1.0)
        return dc.scale(dc.mean(dc.log(dc.clamp_min(pos, 1e-12))), -1.0)

    return dc.add(term(img, pseimg), term(txt, psetxt))


def contrastive_loss_direct(img, txt, params, tau=1.0):
    """Ablation: project both actual modalities through one shared MLP and
    contrast (projected image, projected text) pairs symmetrically."""
    b = img.shape[0]
    if b < 2:
        raise ValueError(f"contrastive batch needs >= 2 items, got {b}")
    pi = mlp3(img, params, "var.pse.proj")
    pt = mlp3(txt, params, "var.pse.proj")

    def term(a, b_):
        sims = dc.matmul(dc.normalize_rows(a), dc.transpose(dc.normalize_rows(b_)))
        probs = dc.softmax(dc.scale(sims, 1.0 / tau))
        pos = dc.gather_positions(probs, np.arange(b))
        return dc.scale(dc.mean(dc.log(dc.clamp_min(pos, 1e-12))), -1.0)

    return dc.add(term(pi, pt), term(pt, pi))
