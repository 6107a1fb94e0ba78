"""Losses on the shared unit hypersphere.

Four components, all driven by cosines between embeddings and a single
class-weight matrix shared by every modality:

* ``loss_ce``        cosine-logit cross-entropy (no margin),
* ``loss_ns_prime``  additive-margin softmax written as mean log(1 + gamma),
* ``loss_iv``        the same margin loss with each instance's term scaled
                     by its hardness weight (gamma / (1 + gamma))^tau,
* ``loss_ic``        Gaussian-RBF pull-together loss over same-class pairs.

gamma is the per-instance sum of exponentiated margin violations against
competing classes; large gamma marks a hard instance.  Everything is
evaluated through log-sum-exp so small temperatures (omega = 1/30) never
overflow.  Embeddings are re-normalized on entry; weight rows are used
as given (their unit norm is maintained by the optimizer's projection).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from . import geometry
from .errors import (
    BadConfig,
    ConflictingFlags,
    DimensionMismatch,
    InvalidLabel,
    NoValidClass,
)

# Loss component flags.
CE = "ce"
IV = "iv"
IC = "ic"
NS_PRIME = "ns"
LOSS_FLAGS = frozenset({CE, IV, IC, NS_PRIME})


@dataclass(frozen=True)
class HyperParams:
    """Loss hyperparameters.

    lambda0: additive margin subtracted from the target cosine.
    omega: softmax temperature dividing all cosine logits.
    tau: exponent of the per-instance hardness weight.
    t_rbf: bandwidth of the Gaussian RBF kernel.
    detach_weight: treat the hardness weight as a constant in gradients.
    """

    lambda0: float = 0.35
    omega: float = 1.0 / 30.0
    tau: float = 0.1
    t_rbf: float = 2.0
    detach_weight: bool = False

    def __post_init__(self):
        if not self.omega > 0:
            raise BadConfig(f"omega must be > 0, got {self.omega}")
        if not self.t_rbf > 0:
            raise BadConfig(f"t_rbf must be > 0, got {self.t_rbf}")
        if self.lambda0 < 0:
            raise BadConfig(f"lambda0 must be >= 0, got {self.lambda0}")
        if self.tau < 0:
            raise BadConfig(f"tau must be >= 0, got {self.tau}")


@dataclass
class LabeledEmbeddings:
    """A batch of embeddings with class labels and modality ids."""

    embeddings: np.ndarray  # (B, d), rows on (or near) the unit sphere
    labels: np.ndarray  # (B,) int class ids
    modality_ids: np.ndarray  # (B,) int modality ids

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.modality_ids = np.asarray(self.modality_ids, dtype=np.int64)
        if self.embeddings.ndim != 2:
            raise DimensionMismatch("embeddings must be a (B, d) array")
        B = self.embeddings.shape[0]
        if B < 1:
            raise DimensionMismatch("batch must contain at least one instance")
        if self.labels.shape != (B,) or self.modality_ids.shape != (B,):
            raise DimensionMismatch(
                "labels and modality_ids must match the batch size"
            )

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class LossBreakdown:
    """Component values of one joint-loss evaluation.

    Disabled components are reported as 0.  The per-instance arrays are
    always filled (they cost nothing extra).
    """

    ns_prime: float
    iv: float
    ic: float
    ce: float
    total: float
    per_instance_weight: np.ndarray  # (gamma / (1 + gamma))^tau, shape (B,)
    per_instance_gamma: np.ndarray  # shape (B,)
    ic_skipped_classes: int = 0


def _logsumexp(x: np.ndarray, axis=None):
    """Stable log(sum(exp(x))); -inf entries are treated as absent."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    if num_classes < 2:
        raise BadConfig(f"need at least 2 classes, got {num_classes}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = int(labels[(labels < 0) | (labels >= num_classes)][0])
        raise InvalidLabel(f"label {bad} outside [0, {num_classes})")


def _cosines(e: LabeledEmbeddings, weights) -> tuple[np.ndarray, np.ndarray]:
    """Normalized embeddings and their cosine matrix against the weight rows."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise DimensionMismatch("weights must be a (N, d) matrix")
    if w.shape[1] != e.embeddings.shape[1]:
        raise DimensionMismatch(
            f"weights dim {w.shape[1]} != embedding dim {e.embeddings.shape[1]}"
        )
    _check_labels(e.labels, w.shape[0])
    v = geometry.normalize(e.embeddings)
    return v, v @ w.T


def _margin_terms(cos: np.ndarray, labels: np.ndarray, hp: HyperParams):
    """Shared margin-softmax quantities.

    Returns (s, lse_neg, log1p_gamma, rho) where
      s[b, j]     = (cos_j - cos_target + lambda0) / omega, -inf at the target,
      lse_neg     = log(gamma) per instance,
      log1p_gamma = log(1 + gamma)  (the per-instance margin-softmax term),
      rho         = gamma / (1 + gamma).
    """
    B = cos.shape[0]
    rows = np.arange(B)
    cos_target = cos[rows, labels]
    s = (cos - cos_target[:, None] + hp.lambda0) / hp.omega
    s[rows, labels] = -np.inf
    lse_neg = _logsumexp(s, axis=1)
    log1p_gamma = np.logaddexp(0.0, lse_neg)
    rho = -np.expm1(-log1p_gamma)
    return s, lse_neg, log1p_gamma, rho


def compute_gamma(e: LabeledEmbeddings, weights, hp: HyperParams) -> np.ndarray:
    """Per-instance sum of exp((cos_j - cos_target + lambda0) / omega), j != target."""
    _, cos = _cosines(e, weights)
    _, lse_neg, _, _ = _margin_terms(cos, e.labels, hp)
    return np.exp(lse_neg)


def loss_ns_prime(e: LabeledEmbeddings, weights, hp: HyperParams) -> float:
    """Margin softmax without instance weighting: mean of log(1 + gamma)."""
    _, cos = _cosines(e, weights)
    _, _, log1p_gamma, _ = _margin_terms(cos, e.labels, hp)
    return float(np.mean(log1p_gamma))


def loss_iv(
    e: LabeledEmbeddings, weights, hp: HyperParams
) -> tuple[float, np.ndarray]:
    """Hardness-weighted margin softmax.

    Each instance's log(1 + gamma) term is scaled by
    (gamma / (1 + gamma))^tau, so harder instances (larger gamma) get a
    weight closer to 1.  tau = 0 reduces exactly to ``loss_ns_prime``.

    Returns (loss, per-instance weights).
    """
    _, cos = _cosines(e, weights)
    _, _, log1p_gamma, rho = _margin_terms(cos, e.labels, hp)
    w = rho**hp.tau
    return float(np.mean(w * log1p_gamma)), w


def loss_ce(e: LabeledEmbeddings, weights, hp: HyperParams) -> float:
    """Cross-entropy over cosine logits cos/omega against the shared weights.

    No margin: this is the margin-softmax term at lambda0 = 0, computed the
    same log-sum-exp way (exact even when the target logit dominates).
    """
    _, cos = _cosines(e, weights)
    _, _, log1p_gamma, _ = _margin_terms(cos, e.labels, replace(hp, lambda0=0.0))
    return float(np.mean(log1p_gamma))


def _ic_class_terms(
    v: np.ndarray, labels: np.ndarray, t: float
) -> tuple[list[float], int]:
    """log-sum of pairwise RBF kernels divided by class size, per class.

    Classes with fewer than two in-batch instances contribute nothing and
    are counted as skipped.  The pair sum runs over ordered pairs (i != j,
    both directions).
    """
    terms: list[float] = []
    skipped = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            skipped += 1
            continue
        exponents = -t * geometry.pairwise_sq_dists(v[idx])
        np.fill_diagonal(exponents, -np.inf)
        log_kernel_sum = _logsumexp(exponents, axis=None)
        terms.append(log_kernel_sum / idx.size)
    return terms, skipped


def loss_ic(e: LabeledEmbeddings, hp: HyperParams) -> float:
    """RBF pull-together loss.

    Negative mean over contributing classes of
    (1 / P_c) * log sum_{i != j in c} exp(-t * ||v_i - v_j||^2),
    where P_c is the in-batch size of class c.  Singleton classes are
    skipped; raises NoValidClass if no class has two instances.
    """
    v = geometry.normalize(e.embeddings)
    terms, _ = _ic_class_terms(v, e.labels, hp.t_rbf)
    if not terms:
        raise NoValidClass("every class in the batch has < 2 instances")
    return -sum(terms) / len(terms)


def validate_flags(enabled: Iterable[str]) -> frozenset:
    flags = frozenset(enabled)
    unknown = flags - LOSS_FLAGS
    if unknown:
        raise BadConfig(f"unknown loss flags: {sorted(unknown)}")
    if not flags:
        raise BadConfig("at least one loss flag must be enabled")
    if IV in flags and NS_PRIME in flags:
        raise ConflictingFlags(
            "'iv' and 'ns' are mutually exclusive (the weighted and "
            "unweighted variants of the same margin loss)"
        )
    return flags


def loss_total(
    e: LabeledEmbeddings, weights, hp: HyperParams, enabled: Iterable[str]
) -> LossBreakdown:
    """Joint loss over the enabled components; disabled ones report 0."""
    flags = validate_flags(enabled)
    _, cos = _cosines(e, weights)
    _, _, log1p_gamma, rho = _margin_terms(cos, e.labels, hp)
    per_weight = rho**hp.tau

    ns_val = float(np.mean(log1p_gamma)) if NS_PRIME in flags else 0.0
    iv_val = float(np.mean(per_weight * log1p_gamma)) if IV in flags else 0.0
    ce_val = loss_ce(e, weights, hp) if CE in flags else 0.0
    ic_val, skipped = 0.0, 0
    if IC in flags:
        v = geometry.normalize(e.embeddings)
        terms, skipped = _ic_class_terms(v, e.labels, hp.t_rbf)
        # unlike the standalone op, the joint loss tolerates a batch with
        # no same-class pair: the term is skipped and counted, not an error
        if terms:
            ic_val = -sum(terms) / len(terms)

    total = ns_val + iv_val + ce_val + ic_val
    per_gamma = np.expm1(log1p_gamma)  # gamma recovered from log(1 + gamma)
    return LossBreakdown(
        ns_prime=ns_val,
        iv=iv_val,
        ic=ic_val,
        ce=ce_val,
        total=total,
        per_instance_weight=per_weight,
        per_instance_gamma=per_gamma,
        ic_skipped_classes=skipped,
    )
