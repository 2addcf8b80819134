"""Multi-modal session-based recommender.

Deterministic branch: contrastive refinement of image/text embeddings,
per-item feature sequences, hierarchical pivot-transformer fusion and
session attention. Probabilistic branch: diagonal-Gaussian price embeddings
with Wasserstein self-attention. Both trained jointly on a tape-based
autodiff core and evaluated with next-item ranking metrics.
"""

__version__ = "0.1.0"
