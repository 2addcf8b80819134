import numpy as np
import pytest

from mmsbr.dataset import Interaction
from mmsbr.embedding_store import SynthConfig, synthesize_corpus
from mmsbr.trainer import HyperParams, Wiring, init_params


@pytest.fixture(scope="session")
def tiny():
    """Small synthetic corpus + bundle + f64 hyper shared by model tests."""
    cfg = SynthConfig(n_items=24, n_categories=3, d=8, n_sessions=240, style_clusters=3,
                      rho=12, seed=42, min_item_freq=1)
    corpus, bundle = synthesize_corpus(cfg)
    hyper = HyperParams(d=8, C=2, T=2, R=2, heads=2, rho=12, batch=8, precision="f64", seed=7)
    return corpus, bundle, hyper


@pytest.fixture()
def tiny_params(tiny):
    corpus, bundle, hyper = tiny
    return init_params(hyper, corpus.n, corpus.n_categories, bundle=bundle)


def make_interactions(rows):
    """rows: (user, item, ts, price, cat) tuples."""
    return [Interaction(u, i, float(t), float(p), c) for (u, i, t, p, c) in rows]


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
