"""Per-modality encoders projecting raw features onto the shared hypersphere.

Each modality gets its own affine map (optionally with one tanh hidden
layer); the class-weight matrix is shared by all modalities.  Encoder
outputs are L2-normalized, so every embedding lives on the unit sphere
regardless of raw feature scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import BadConfig, DimensionMismatch, NearZeroNorm
from .losses import LabeledEmbeddings


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    modality_dims: tuple[int, ...]
    embed_dim: int = 16
    hidden: int = 0  # 0 = single affine layer, else hidden width

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(self.modality_dims))
        if self.embed_dim < 2:
            raise BadConfig(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.num_classes < 2:
            raise BadConfig(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.modality_dims) < 1:
            raise BadConfig("need at least one modality")
        if any(d < 1 for d in self.modality_dims):
            raise BadConfig(f"modality dims must be >= 1, got {self.modality_dims}")
        if self.hidden < 0:
            raise BadConfig(f"hidden width must be >= 0, got {self.hidden}")

    @property
    def num_modalities(self) -> int:
        return len(self.modality_dims)


@dataclass
class Encoder:
    """Parameter arrays of one modality's encoder (also reused as the
    container for the matching gradient arrays)."""

    w_in: np.ndarray  # (embed_dim or hidden, d_m)
    b_in: np.ndarray
    w_out: np.ndarray | None = None  # (embed_dim, hidden) when two-layer
    b_out: np.ndarray | None = None

    @property
    def two_layer(self) -> bool:
        return self.w_out is not None

    def arrays(self) -> list[np.ndarray]:
        out = [self.w_in, self.b_in]
        if self.two_layer:
            out += [self.w_out, self.b_out]
        return out


@dataclass
class ModelParams:
    weights: np.ndarray  # (num_classes, embed_dim), unit-norm rows
    encoders: list[Encoder]
    config: ModelConfig


@dataclass
class RawBatch:
    """Raw feature vectors with labels and modality ids.

    features[b] has the dimensionality of modality modality_ids[b], so
    the list is ragged across modalities.
    """

    features: list[np.ndarray]
    labels: np.ndarray
    modality_ids: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.modality_ids = np.asarray(self.modality_ids, dtype=np.int64)
        if len(self.features) < 1:
            raise DimensionMismatch("batch must contain at least one instance")
        if self.labels.shape != (len(self.features),) or self.modality_ids.shape != (
            len(self.features),
        ):
            raise DimensionMismatch("labels/modality_ids must match batch size")

    def __len__(self) -> int:
        return len(self.features)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Seed-deterministic initialization.

    Weight rows are isotropic normal draws renormalized to unit length;
    encoder entries are symmetric uniform scaled by 1/sqrt(fan_in).
    """
    rng = np.random.default_rng(seed)
    weights = geometry.normalize(rng.standard_normal((cfg.num_classes, cfg.embed_dim)))
    encoders = []
    for d_m in cfg.modality_dims:
        if cfg.hidden == 0:
            enc = Encoder(
                w_in=_uniform(rng, (cfg.embed_dim, d_m), d_m),
                b_in=_uniform(rng, (cfg.embed_dim,), d_m),
            )
        else:
            enc = Encoder(
                w_in=_uniform(rng, (cfg.hidden, d_m), d_m),
                b_in=_uniform(rng, (cfg.hidden,), d_m),
                w_out=_uniform(rng, (cfg.embed_dim, cfg.hidden), cfg.hidden),
                b_out=_uniform(rng, (cfg.embed_dim,), cfg.hidden),
            )
        encoders.append(enc)
    return ModelParams(weights=weights, encoders=encoders, config=cfg)


def modality_groups(batch: RawBatch, num_modalities: int) -> list[np.ndarray]:
    """Row indices of each modality, preserving batch order within groups."""
    if batch.modality_ids.min() < 0 or batch.modality_ids.max() >= num_modalities:
        raise DimensionMismatch(
            f"modality id outside [0, {num_modalities}) in batch"
        )
    return [np.flatnonzero(batch.modality_ids == m) for m in range(num_modalities)]


def encode_raw(params: ModelParams, batch: RawBatch) -> np.ndarray:
    """Pre-normalization encoder outputs, shape (B, embed_dim)."""
    cfg = params.config
    raw = np.empty((len(batch), cfg.embed_dim))
    for m, rows in enumerate(modality_groups(batch, cfg.num_modalities)):
        if rows.size == 0:
            continue
        enc = params.encoders[m]
        d_m = cfg.modality_dims[m]
        for i in rows:
            if batch.features[i].shape != (d_m,):
                raise DimensionMismatch(
                    f"instance {i}: expected {d_m} features for modality {m}, "
                    f"got shape {batch.features[i].shape}"
                )
        x = np.stack([batch.features[i] for i in rows]).astype(np.float64)
        pre = x @ enc.w_in.T + enc.b_in
        if enc.two_layer:
            pre = np.tanh(pre) @ enc.w_out.T + enc.b_out
        raw[rows] = pre
    return raw


def forward(params: ModelParams, batch: RawBatch) -> LabeledEmbeddings:
    """Encode and L2-normalize a raw batch.

    Raises NearZeroNorm if an encoder output collapses (a divergence
    signal during training).
    """
    raw = encode_raw(params, batch)
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms <= geometry.EPS_NORM):
        bad = int(np.argmin(norms))
        raise NearZeroNorm(
            f"encoder output for instance {bad} has norm {norms[bad]:.3e}"
        )
    return LabeledEmbeddings(
        embeddings=raw / norms[:, None],
        labels=batch.labels.copy(),
        modality_ids=batch.modality_ids.copy(),
    )
