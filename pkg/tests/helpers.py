"""Small builders shared by several test modules."""

from __future__ import annotations

import numpy as np

from subnetlab.model import ComponentMeans, ModelConfig, PairBatch, init_model


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, n_heads=2, d_model=8, vocab_size=12, max_positions=10, init_scale=0.3)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg: ModelConfig, n: int, width: int, seed: int = 0,
                 min_len: int = 3) -> PairBatch:
    """Random ids with a valid prefix of random length per row; padding id 0."""
    rng = np.random.default_rng(seed)
    lengths = rng.integers(min_len, width + 1, size=n)
    valid = np.arange(width)[None, :] < lengths[:, None]
    ids = np.where(valid, rng.integers(1, cfg.vocab_size, size=(n, width)), 0)
    seg = np.where(valid & (np.arange(width)[None, :] >= lengths[:, None] // 2), 1, 0)
    labels = rng.integers(0, cfg.n_labels, size=n)
    return PairBatch(ids, seg, valid, labels)


def random_means(cfg: ModelConfig, seed: int = 0) -> ComponentMeans:
    rng = np.random.default_rng(seed)
    return ComponentMeans(rng.normal(size=(cfg.n_layers, cfg.n_heads, cfg.d_model)),
                          rng.normal(size=(cfg.n_layers, cfg.d_model)), 1, 1)


def tiny_model(seed: int = 0, **kw):
    cfg = tiny_config(**kw)
    return init_model(cfg, seed)


def numpy_params(model) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.params.items()}
