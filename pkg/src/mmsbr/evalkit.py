"""Ranking metrics, evaluation protocols and the ablation variants.

Ranked lists order the candidate catalog by descending score with ties
broken by ascending item id, so evaluation is deterministic. Metrics are
reported as percentages. The cold-start protocol scores sessions whose
target never appeared in training; the model reaches such items through
their content (embedding rows untouched since file initialization, price
level and category), never through a learned id table.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

VARIANTS = (
    "full",
    "no_con",
    "pse_direct",
    "mlp_fusion",
    "de_price",
    "wo_image",
    "wo_text",
    "wo_price",
)


def rank_of_target(scores, target):
    """1-based rank of `target` under descending score, ties by ascending id."""
    scores = np.asarray(scores)
    if not 0 <= target < scores.shape[0]:
        raise IndexError(f"target {target} outside catalog of {scores.shape[0]}")
    s_t = scores[target]
    better = int(np.sum(scores > s_t))
    tied_before = int(np.sum((scores == s_t) & (np.arange(scores.shape[0]) < target)))
    return better + tied_before + 1


def ranked_list(scores):
    """Full candidate permutation: descending score, ties by ascending id."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.shape[0]), -scores))


def precision_at_k(rank, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 if rank <= k else 0.0


def mrr_at_k(rank, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1.0 / rank if rank <= k else 0.0


def _threads():
    raw = os.environ.get("MMSBR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _session_scores(model, e_cat, price_cat, sessions, pos_of, item_levels, item_cats):
    from .trainer import make_batch

    batch = make_batch(sessions, pos_of, item_levels, item_cats)
    s_d = model.session_taste(e_cat, batch)
    s_p = model.session_price(batch)
    probs = model.score(e_cat, price_cat, s_d, s_p)
    return probs.data, batch.targets


def score_split(params, corpus, hyper, wiring, sessions, eval_batch=256):
    """Ranks of every session target over the full catalog."""
    from .trainer import Model

    item_levels = np.array(corpus.levels(), dtype=int)
    item_cats = np.array(corpus.categories(), dtype=int)
    candidates = np.arange(corpus.n)
    pos_of = {i: i for i in range(corpus.n)}
    model = Model(params, hyper, wiring, item_levels, item_cats, candidates)
    e_cat, price_cat = model.encode_catalog()

    chunks = [sessions[i : i + eval_batch] for i in range(0, len(sessions), eval_batch)]

    def run(chunk):
        return _session_scores(model, e_cat, price_cat, chunk, pos_of, item_levels, item_cats)

    workers = _threads()
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))  # ordered, so reduction is fixed
    else:
        results = [run(c) for c in chunks]

    ranks = []
    for probs, targets in results:
        for row, t in zip(probs, targets):
            ranks.append(rank_of_target(row, int(t)))
    return np.array(ranks, dtype=int)


def metrics_from_ranks(ranks, ks=(10, 20)):
    """Mean Prec@k / MRR@k over sessions, as percentages."""
    out = {}
    for k in ks:
        prec = float(np.mean([precision_at_k(r, k) for r in ranks])) * 100.0 if len(ranks) else 0.0
        mrr = float(np.mean([mrr_at_k(r, k) for r in ranks])) * 100.0 if len(ranks) else 0.0
        out[k] = {"prec": prec, "mrr": mrr}
    return out


def evaluate(params, corpus, hyper, wiring=None, split="test", ks=(10, 20), buckets=False):
    """Metric table for one split; optionally a session-length bucket report."""
    from .trainer import Wiring

    wiring = wiring or Wiring()
    sessions = {
        "train": corpus.sessions_train,
        "val": corpus.sessions_val,
        "test": corpus.sessions_test,
        "test_plus": corpus.test_plus,
    }[split]
    if not sessions:
        return {k: {"prec": 0.0, "mrr": 0.0} for k in ks}
    ranks = score_split(params, corpus, hyper, wiring, sessions)
    table = metrics_from_ranks(ranks, ks)
    if not buckets:
        return table
    return table, bucket_report(sessions, ranks)


def bucket_report(sessions, ranks):
    """Per-session-length report; short means length <= 3."""
    lengths = np.array([len(s) for s in sessions])
    rows = []

    def row(name, sel):
        sub = ranks[np.asarray(sel)]
        m = metrics_from_ranks(sub, ks=(20,))[20] if len(sub) else {"prec": 0.0, "mrr": 0.0}
        rows.append({"bucket": name, "count": int(len(sub)), "prec20": m["prec"], "mrr20": m["mrr"]})

    row("short", lengths <= 3)
    row("long", lengths > 3)
    for length in range(2, 8):
        row(f"len_{length}", lengths == length)
    row("len_8plus", lengths >= 8)
    return rows


def cold_target_sessions(corpus):
    return [s for s in corpus.test_plus if s.target in corpus.cold_items]


def popularity_baseline(corpus, sessions=None, ks=(10, 20)):
    """Rank items by training-split frequency (ties by ascending id); items
    never seen in training share the zero floor. A sanity baseline that by
    construction cannot lift cold items."""
    if not corpus.sessions_train:
        raise ValueError("popularity baseline needs a training split")
    freq = np.zeros(corpus.n)
    for s in corpus.sessions_train:
        for item in s.items:
            freq[item] += 1
    if sessions is None:
        sessions = corpus.sessions_test
    ranks = np.array([rank_of_target(freq, s.target) for s in sessions], dtype=int)
    return metrics_from_ranks(ranks, ks)


def build_variant(spec, hyper):
    """Model wiring for one ablation variant; returns (hyper, wiring)."""
    from dataclasses import replace

    from .trainer import Wiring

    if spec not in VARIANTS:
        raise ValueError(f"unknown variant '{spec}' (one of {', '.join(VARIANTS)})")
    wiring = Wiring()
    if spec == "no_con":
        wiring.contrastive = "none"
        hyper = replace(hyper, lam=0.0)
    elif spec == "pse_direct":
        wiring.contrastive = "direct"
    elif spec == "mlp_fusion":
        wiring.fusion = "mlp"
    elif spec == "de_price":
        wiring.price = "point"
    elif spec == "wo_image":
        wiring.use_image = False
    elif spec == "wo_text":
        wiring.use_text = False
    elif spec == "wo_price":
        wiring.price = "none"
    return hyper, wiring


def write_metric_csv(rows, path):
    """rows: (variant, split, k, prec, mrr); percentages with 2 decimals."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "split", "k", "prec", "mrr"])
        for variant, split, k, prec, mrr in rows:
            w.writerow([variant, split, k, f"{prec:.2f}", f"{mrr:.2f}"])


def write_bucket_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bucket", "count", "prec20", "mrr20"])
        for r in rows:
            w.writerow([r["bucket"], r["count"], f"{r['prec20']:.2f}", f"{r['mrr20']:.2f}"])
