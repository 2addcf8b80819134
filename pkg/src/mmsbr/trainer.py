"""Joint model assembly and mini-batch training.

Item representations come from two branches: the fused descriptive
embedding (image + text) scored against the session taste by dot product,
and the Gaussian price embedding scored against the user's acceptable price
range by 2-Wasserstein distance (subtracted by default, since a distance is
a dissimilarity; the printed additive form stays available behind
``sign_w2='plus'``). Cross-entropy over the candidate catalog plus the
weighted contrastive term gives the joint objective.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import deterministic as det
from . import diffcore as dc
from . import probabilistic as prob
from .diffcore import ModelParams


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class HyperParams:
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

    def __post_init__(self):
        for name in ("d", "batch", "R", "C", "T", "heads", "rho", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr < 0 or self.lam < 0 or self.tau <= 0:
            raise ValueError("lr/lam must be >= 0 and tau > 0")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.sign_w2 not in ("minus", "plus"):
            raise ValueError(f"sign_w2 must be minus or plus, got {self.sign_w2}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision}")
        if self.contrastive_scope not in ("batch", "all"):
            raise ValueError("contrastive_scope must be batch or all")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class Wiring:
    """Which blocks are active; the full model is the default."""

    fusion: str = "pivot"  # pivot | mlp
    price: str = "gaussian"  # gaussian | point | none
    contrastive: str = "pseudo"  # pseudo | direct | none
    use_image: bool = True
    use_text: bool = True
    literal_eq6: bool = False
    literal_eq23: bool = False
    literal_eq26: bool = False


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def init_params(hyper, n_items, n_categories, bundle=None, wiring=None, seed=None):
    """Fresh parameters: weights uniform in [-1/sqrt(d), 1/sqrt(d)], layer
    norm gains 1 / biases 0, covariance table raw values 0 (so initial
    covariances are ~1). Modality embeddings copy the bundle when given,
    otherwise they are drawn like weights. Deterministic given the seed."""
    wiring = wiring or Wiring()
    seed = hyper.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    d = hyper.d
    bound = 1.0 / np.sqrt(d)
    dt = hyper.dtype
    params = ModelParams()

    def uniform(path, shape):
        params.add(path, dc.Tensor(rng.uniform(-bound, bound, size=shape).astype(dt), True))

    def zeros(path, shape):
        params.add(path, dc.Tensor(np.zeros(shape, dtype=dt), True))

    def ones(path, shape):
        params.add(path, dc.Tensor(np.ones(shape, dtype=dt), True))

    def mlp(prefix, din, dhidden, dout):
        uniform(f"{prefix}.w0", (din, dhidden))
        zeros(f"{prefix}.b0", (dhidden,))
        uniform(f"{prefix}.w1", (dhidden, dhidden))
        zeros(f"{prefix}.b1", (dhidden,))
        uniform(f"{prefix}.w2", (dhidden, dout))
        zeros(f"{prefix}.b2", (dout,))

    if bundle is not None:
        if bundle.d != d:
            raise ValueError(f"bundle width {bundle.d} != model width {d}")
        for path, mat in (
            ("emb.img", bundle.img),
            ("emb.txt", bundle.txt),
            ("emb.pseimg", bundle.pseimg),
            ("emb.psetxt", bundle.psetxt),
        ):
            if mat.rows != n_items:
                raise ValueError(f"{path}: {mat.rows} rows for {n_items} items")
            params.add(path, dc.Tensor(mat.data.astype(dt), True))
    else:
        for path in ("emb.img", "emb.txt", "emb.pseimg", "emb.psetxt"):
            uniform(path, (n_items, d))

    if wiring.fusion == "pivot":
        for k in range(hyper.C):
            mlp(f"det.mlp_img.{k}", d, d, d)
        for k in range(hyper.C):
            mlp(f"det.mlp_txt.{k}", d, d, d)
        for layer in range(hyper.R):
            p = f"det.trans.{layer}"
            ones(f"{p}.ln1.g", (d,))
            zeros(f"{p}.ln1.b", (d,))
            for proj in ("wq", "wk", "wv", "wo"):
                uniform(f"{p}.{proj}", (d, d))
            for b in ("bq", "bk", "bv", "bo"):
                zeros(f"{p}.{b}", (d,))
            ones(f"{p}.ln2.g", (d,))
            zeros(f"{p}.ln2.b", (d,))
            uniform(f"{p}.fc1.w", (d, 2 * d))
            zeros(f"{p}.fc1.b", (2 * d,))
            uniform(f"{p}.fc2.w", (2 * d, d))
            zeros(f"{p}.fc2.b", (d,))
        uniform("det.pivot", (hyper.T, d))
        mlp("det.mlp_out", hyper.T * d, d, d)
    elif wiring.fusion == "mlp":
        mlp("det.mlp_fuse", 2 * d, d, d)
    else:
        raise ValueError(f"unknown fusion mode '{wiring.fusion}'")

    uniform("det.attn.u", (d,))
    uniform("det.attn.A1", (d, d))
    uniform("det.attn.A2", (d, d))
    zeros("det.attn.b", (d,))

    if wiring.price == "point":
        uniform("prob.point_table", (hyper.rho, d))
        uniform("prob.cat_table", (n_categories, d))
        for proj in ("wq", "wk", "wv"):
            uniform(f"prob.dot.{proj}", (d, d))
    else:
        uniform("prob.mu_table", (hyper.rho, d))
        zeros("prob.sigma_table", (hyper.rho, d))
        uniform("prob.cat_table", (n_categories, d))
        for role in ("Q", "K", "V"):
            uniform(f"prob.wsa.{role}.mu", (d, d))
            uniform(f"prob.wsa.{role}.sigma", (d, d))

    if wiring.contrastive == "direct":
        mlp("var.pse.proj", d, d, d)

    return params


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    ctx_pos: np.ndarray  # (B, m) positions into the candidate catalog
    ctx_levels: np.ndarray
    ctx_cats: np.ndarray
    mask: np.ndarray  # (B, m) bool
    lengths: np.ndarray  # (B,)
    targets: np.ndarray  # (B,) positions into the candidate catalog
    item_ids: np.ndarray  # unique item ids present (for the contrastive term)


def make_batch(sessions, pos_of, item_levels, item_cats):
    b = len(sessions)
    m = max(len(s.context) for s in sessions)
    ctx_pos = np.zeros((b, m), dtype=int)
    ctx_lv = np.zeros((b, m), dtype=int)
    ctx_ct = np.zeros((b, m), dtype=int)
    mask = np.zeros((b, m), dtype=bool)
    lengths = np.zeros(b, dtype=int)
    targets = np.zeros(b, dtype=int)
    seen = set()
    for i, s in enumerate(sessions):
        ctx = s.context
        lengths[i] = len(ctx)
        mask[i, : len(ctx)] = True
        for j, item in enumerate(ctx):
            ctx_pos[i, j] = pos_of[item]
            ctx_lv[i, j] = item_levels[item]
            ctx_ct[i, j] = item_cats[item]
        targets[i] = pos_of[s.target]
        seen.update(ctx)
        seen.add(s.target)
    return Batch(ctx_pos, ctx_lv, ctx_ct, mask, lengths, targets, np.array(sorted(seen), dtype=int))


# ---------------------------------------------------------------------------
# model forward
# ---------------------------------------------------------------------------


class Model:
    """Forward passes over a fixed candidate catalog."""

    def __init__(self, params, hyper, wiring, item_levels, item_cats, candidate_ids):
        self.params = params
        self.hyper = hyper
        self.wiring = wiring
        self.item_levels = np.asarray(item_levels, dtype=int)
        self.item_cats = np.asarray(item_cats, dtype=int)
        self.candidate_ids = np.asarray(candidate_ids, dtype=int)
        self.fusion_cfg = det.FusionConfig(hyper.d, hyper.C, hyper.T, hyper.R, hyper.heads)

    def encode_catalog(self):
        """Descriptive embedding and price representation for every
        candidate item. Returns (e_cat, price_repr) where price_repr is a
        (mu, sigma) pair, a point tensor, or None."""
        p, w = self.params, self.wiring
        ids = self.candidate_ids
        e_img = dc.gather_rows(p["emb.img"], ids)
        e_txt = dc.gather_rows(p["emb.txt"], ids)
        if w.fusion == "pivot":
            z_img, z_txt = det.gen_feature_sequences(e_img, e_txt, p, self.fusion_cfg)
            e_cat = det.pivot_fusion(
                z_img if w.use_image else None,
                z_txt if w.use_text else None,
                p,
                self.fusion_cfg,
                use_image=w.use_image,
                use_text=w.use_text,
            )
        else:
            e_cat = det.mlp_fusion(e_img, e_txt, p)

        levels = self.item_levels[ids]
        cats = self.item_cats[ids]
        if w.price == "gaussian":
            price = prob.price_embed(levels, cats, p)
        elif w.price == "point":
            price = self._point_embed(levels, cats)
        else:
            price = None
        return e_cat, price

    def _point_embed(self, levels, cats):
        p = self.params
        return dc.add(dc.gather_rows(p["prob.point_table"], levels), dc.gather_rows(p["prob.cat_table"], cats))

    def session_taste(self, e_cat, batch):
        e_seq = dc.gather_rows(e_cat, batch.ctx_pos)
        return det.vanilla_attention(e_seq, batch.mask, self.params)

    def session_price(self, batch):
        w = self.wiring
        if w.price == "none":
            return None
        if w.price == "gaussian":
            mu, sigma = prob.price_embed(batch.ctx_levels, batch.ctx_cats, self.params)
            h_mu, h_sigma = prob.wasserstein_self_attention(
                mu, sigma, batch.mask, self.params, literal=w.literal_eq23
            )
            return prob.user_price_range(h_mu, h_sigma, batch.lengths)
        # point-wise ablation: standard dot-product self-attention
        p = self.params
        seq = self._point_embed(batch.ctx_levels, batch.ctx_cats)
        q = dc.matmul(seq, p["prob.dot.wq"])
        k = dc.matmul(seq, p["prob.dot.wk"])
        v = dc.matmul(seq, p["prob.dot.wv"])
        scores = dc.scale(dc.matmul(q, dc.transpose(k)), 1.0 / np.sqrt(self.hyper.d))
        key_mask = np.broadcast_to(batch.mask[:, None, :], scores.shape)
        attn = dc.softmax(scores, mask=key_mask)
        out = dc.attn_apply(attn, v)  # (B, m, d)
        b, _, d = out.shape
        idx = np.broadcast_to((batch.lengths - 1)[:, None], (b, d)).copy()
        return dc.gather_positions(dc.transpose(out, (0, 2, 1)), idx)

    def score(self, e_cat, price_cat, s_d, s_p):
        return score_items(e_cat, price_cat, s_d, s_p, self.hyper.sign_w2, self.wiring.price)

    def forward(self, batch):
        """Joint loss over one padded session batch."""
        e_cat, price_cat = self.encode_catalog()
        s_d = self.session_taste(e_cat, batch)
        s_p = self.session_price(batch)
        probs = self.score(e_cat, price_cat, s_d, s_p)
        l_rec = rec_loss(probs, batch.targets, literal=self.wiring.literal_eq26)
        lam = self.hyper.lam if self.wiring.contrastive != "none" else 0.0
        if lam == 0.0:
            return l_rec, l_rec, None
        ids = self.candidate_ids if self.hyper.contrastive_scope == "all" else batch.item_ids
        l_con = self.contrastive(ids)
        return joint_loss(l_rec, l_con, lam), l_rec, l_con

    def contrastive(self, item_ids):
        p, w = self.params, self.wiring
        img = dc.gather_rows(p["emb.img"], item_ids)
        txt = dc.gather_rows(p["emb.txt"], item_ids)
        if w.contrastive == "direct":
            return det.contrastive_loss_direct(img, txt, p, tau=self.hyper.tau)
        pseimg = dc.gather_rows(p["emb.pseimg"], item_ids)
        psetxt = dc.gather_rows(p["emb.psetxt"], item_ids)
        return det.contrastive_loss(img, pseimg, txt, psetxt, tau=self.hyper.tau, literal=w.literal_eq6)


def score_items(e_cat, price_cat, s_d, s_p, sign_w2="minus", price_mode="gaussian"):
    """Per-session probabilities over the candidate catalog.

    logit_i = e_i . s_d [+/-] W2(price_i, price_range); the distance enters
    with a minus by default so cheaper-to-reach prices raise the score; the
    point ablation uses a dot product (a similarity, always added)."""
    logits = dc.matmul(s_d, dc.transpose(e_cat))  # (B, N)
    if price_mode == "gaussian" and s_p is not None:
        mu, sigma = price_cat
        sp_mu, sp_sigma = s_p
        dist = prob.pairwise_w2(sp_mu, sp_sigma, mu, sigma)  # (B, N)
        sign = -1.0 if sign_w2 == "minus" else 1.0
        logits = dc.add(logits, dc.scale(dist, sign))
    elif price_mode == "point" and s_p is not None:
        logits = dc.add(logits, dc.matmul(s_p, dc.transpose(price_cat)))
    return dc.softmax(logits)


def rec_loss(probs, targets, literal=False):
    """Cross-entropy at the target; ``literal`` adds the full binary sum
    over non-target items as printed (diagnostic)."""
    targets = np.asarray(targets, dtype=int)
    pos = dc.clamp_min(dc.gather_positions(probs, targets), 1e-12)
    if not literal:
        return dc.scale(dc.mean(dc.log(pos)), -1.0)
    one_minus = dc.clamp_min(dc.add(dc.scale(probs, -1.0), 1.0), 1e-12)
    log_om = dc.log(one_minus)
    rest = dc.add(dc.sum_(log_om, axis=-1), dc.scale(dc.gather_positions(log_om, targets), -1.0))
    per = dc.add(dc.log(pos), rest)
    return dc.scale(dc.mean(per), -1.0)


def joint_loss(l_rec, l_con, lam):
    return dc.add(l_rec, dc.scale(l_con, lam))


# ---------------------------------------------------------------------------
# optimizer and loop
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {path: np.zeros_like(t.data) for path, t in params.items()}
        self.v = {path: np.zeros_like(t.data) for path, t in params.items()}

    def step(self, grad_map):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for path, tensor in self.params.items():
            g = grad_map[path]
            m = self.m[path] = b1 * self.m[path] + (1 - b1) * g
            v = self.v[path] = b2 * self.v[path] + (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            tensor.data = tensor.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    log_lines: list = field(default_factory=list)
    best_val_prec20: float = 0.0


def train(corpus, bundle, hyper, wiring=None, log_path=None, progress=None, params=None):
    """Seeded mini-batch training with per-epoch validation.

    Keeps the checkpoint with the best validation Prec@20. The log records
    ``epoch,mean_loss,val_prec20,val_mrr20,seconds`` per epoch. ``params``
    warm-starts from existing parameters instead of a fresh initialization.
    """
    from .evalkit import evaluate  # function-level import; evalkit imports us

    wiring = wiring or Wiring()
    n = corpus.n
    item_levels = np.array(corpus.levels(), dtype=int)
    item_cats = np.array(corpus.categories(), dtype=int)
    candidates = np.array(sorted(corpus.warm_items()), dtype=int)
    pos_of = {item: i for i, item in enumerate(candidates)}

    if params is None:
        params = init_params(hyper, n, corpus.n_categories, bundle=bundle, wiring=wiring)
    model = Model(params, hyper, wiring, item_levels, item_cats, candidates)
    opt = Adam(params, hyper.lr)
    rng = np.random.default_rng(hyper.seed)

    sessions = list(corpus.sessions_train)
    result = TrainResult(params=params, best_params=params.copy(), best_val_prec20=-1.0)

    for epoch in range(1, hyper.epochs + 1):
        tic = time.perf_counter()
        order = rng.permutation(len(sessions))
        losses = []
        for b_idx, start in enumerate(range(0, len(order), hyper.batch)):
            chunk = [sessions[i] for i in order[start : start + hyper.batch]]
            if len(chunk) < 2:
                continue  # contrastive and softmax terms need >= 2 rows
            batch = make_batch(chunk, pos_of, item_levels, item_cats)
            with dc.Tape() as tape:
                loss, _, _ = model.forward(batch)
            value = loss.item()
            if not np.isfinite(value):
                bad = next(
                    (p for p, t in params.items() if not np.all(np.isfinite(t.data))), "<loss only>"
                )
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {b_idx} (first bad parameter: {bad})"
                )
            grads = params.gradient_map(dc.backward(tape, loss))
            opt.step(grads)
            losses.append(value)
        table = evaluate(params, corpus, hyper, wiring, split="val", ks=(20,))
        prec20, mrr20 = table[20]["prec"], table[20]["mrr"]
        seconds = time.perf_counter() - tic
        line = f"{epoch},{np.mean(losses):.6f},{prec20:.4f},{mrr20:.4f},{seconds:.3f}"
        result.log_lines.append(line)
        if progress:
            progress(line)
        if prec20 > result.best_val_prec20:
            result.best_val_prec20 = prec20
            result.best_params = params.copy()

    if log_path:
        with open(log_path, "w") as fh:
            fh.write("\n".join(result.log_lines) + "\n")
    return result
