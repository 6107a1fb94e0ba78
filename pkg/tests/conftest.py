"""Shared builders for randomized test instances."""

from __future__ import annotations

import numpy as np

from xmodal import HyperParams, ModelConfig, RawBatch, init_params


def random_problem(
    rng: np.random.Generator,
    max_classes: int = 5,
    max_modalities: int = 3,
    max_batch: int = 16,
    max_dim: int = 8,
    hidden_prob: float = 0.3,
):
    """A small random (params, batch, hp) triple.

    Labels always contain at least one repeated class so the intra-class
    loss is defined; absent modalities are allowed (their gradients must
    come back exactly zero).
    """
    n_classes = int(rng.integers(2, max_classes + 1))
    n_modalities = int(rng.integers(1, max_modalities + 1))
    embed_dim = int(rng.integers(3, max_dim + 1))
    dims = tuple(int(x) for x in rng.integers(2, 9, size=n_modalities))
    hidden = int(rng.integers(3, 7)) if rng.random() < hidden_prob else 0
    cfg = ModelConfig(
        num_classes=n_classes,
        modality_dims=dims,
        embed_dim=embed_dim,
        hidden=hidden,
    )
    params = init_params(cfg, seed=int(rng.integers(0, 2**31)))

    batch_size = int(rng.integers(6, max_batch + 1))
    labels = rng.integers(0, n_classes, size=batch_size)
    labels[1] = labels[0]  # guarantee one same-class pair
    modality_ids = rng.integers(0, n_modalities, size=batch_size)
    features = [rng.standard_normal(dims[m]) for m in modality_ids]
    batch = RawBatch(features=features, labels=labels, modality_ids=modality_ids)

    hp = HyperParams(
        lambda0=float(rng.uniform(0.0, 0.5)),
        omega=float(rng.uniform(0.2, 1.0)),
        tau=float(rng.uniform(0.0, 2.0)),
        t_rbf=float(rng.uniform(0.5, 3.0)),
        detach_weight=False,
    )
    return params, batch, hp


def random_labeled_embeddings(rng: np.random.Generator, batch=None, n_classes=None, dim=None):
    """Random unit embeddings + unit weight rows + labels/modality ids."""
    n_classes = n_classes or int(rng.integers(2, 6))
    dim = dim or int(rng.integers(3, 9))
    batch = batch or int(rng.integers(2, 17))
    emb = rng.standard_normal((batch, dim))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    weights = rng.standard_normal((n_classes, dim))
    weights /= np.linalg.norm(weights, axis=1, keepdims=True)
    labels = rng.integers(0, n_classes, size=batch)
    labels[min(1, batch - 1)] = labels[0]
    modality_ids = rng.integers(0, 3, size=batch)
    return emb, labels, modality_ids, weights


def geodesic_monotonicity_setup(rng: np.random.Generator, steps: int = 10):
    """An embedding rotated toward its class weight with the competing
    weights drawn orthogonal to the rotation plane.

    Keeping non-target weights orthogonal to the plane holds every
    non-target cosine exactly constant along the path, so the check
    isolates the dependence on the target angle alone (free rotation
    against arbitrary weights is not monotone in general).
    """
    dim = int(rng.integers(4, 9))
    n_classes = int(rng.integers(2, 6))
    w_target = rng.standard_normal(dim)
    w_target /= np.linalg.norm(w_target)
    while True:
        v0 = rng.standard_normal(dim)
        v0 /= np.linalg.norm(v0)
        cos0 = float(v0 @ w_target)
        if -0.9 < cos0 < 0.9:
            break
    tangent = v0 - cos0 * w_target
    tangent /= np.linalg.norm(tangent)

    others = []
    for _ in range(n_classes - 1):
        g = rng.standard_normal(dim)
        g -= (g @ w_target) * w_target
        g -= (g @ tangent) * tangent
        others.append(g / np.linalg.norm(g))
    weights = np.vstack([w_target] + others)

    theta0 = np.arccos(cos0)
    thetas = theta0 * (1.0 - np.arange(steps + 1) / steps)
    path = np.array(
        [np.cos(t) * w_target + np.sin(t) * tangent for t in thetas]
    )
    return path, weights  # label is 0 along the whole path
