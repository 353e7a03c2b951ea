"""Toy-model gradient verification.

Small float64 configurations of the convolutional embedder and the GRU
whose analytic gradients are compared against central finite differences.
Both should agree to well under 1e-4 relative error at step 1e-5; larger
errors mean the backward pass is wrong.
"""

from __future__ import annotations

import numpy as np

from trajmatch import baseline_gru, siamese


def toy_cnn_model(seed: int = 3) -> tuple[siamese.SiameseModel, list[siamese.TrainingPair]]:
    """One-conv, 4-d embedding model plus a tiny mixed batch."""
    arch = siamese.SiameseArchitecture(
        input_size=12, conv_channels=(2,), kernel=3, embedding_dim=4, dtype="float64"
    )
    rng = np.random.default_rng(seed)
    net = siamese.build_network(arch, rng)
    model = siamese.SiameseModel(arch, net)
    pairs = []
    for y in (0, 1, 1):
        img_a = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
        img_b = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
        pairs.append(siamese.TrainingPair(img_a, img_b, y))
    return model, pairs


def toy_cnn_gradcheck(step: float = 1e-5, seed: int = 3) -> float:
    model, pairs = toy_cnn_model(seed)
    return siamese.check_gradients(model, pairs, siamese.ContrastiveParams(), step=step)


def toy_gru_model(seed: int = 5) -> tuple[baseline_gru.GRUModel, list[baseline_gru.SequenceInstance]]:
    """Two-layer, 3-unit GRU plus two short labeled sequences."""
    config = baseline_gru.GRUConfig(hidden=3, layers=2, dropout=0.0, max_len=16)
    rng = np.random.default_rng(seed)
    model = baseline_gru.GRUModel(4, config, rng)
    instances = []
    for i, label in enumerate((False, True)):
        t = 5 + i
        feats = rng.normal(size=(t, 4))
        instances.append(baseline_gru.SequenceInstance(f"T{i}", None, feats, label))
    return model, instances


def toy_gru_gradcheck(step: float = 1e-5, seed: int = 5) -> float:
    model, instances = toy_gru_model(seed)
    return baseline_gru.check_gradients(model, instances, step=step)
