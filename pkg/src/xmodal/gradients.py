"""Analytic gradients of every loss, plus the finite-difference oracle.

Backprop is hand-derived (no autodiff dependency).  Gradients are taken
with respect to the raw encoder parameters and the class-weight rows as
free parameters: the chain rule runs through the L2 normalization of the
embeddings, while weight-row unit norm is restored by the optimizer's
projection step and is therefore NOT part of the gradient.

Margin-family chain (per instance, target class y, competitor j):
    s_j   = (cos_j - cos_y + lambda0) / omega
    A     = log(1 + gamma),  gamma = sum_j exp(s_j),  rho = gamma/(1+gamma)
    d(A)/d(s_j)                 = p_j = exp(s_j - A)
    d(rho^tau * A)/d(s_j)       = rho^tau * (tau * A * exp(-A) * r_j + p_j)
                                  with r_j = exp(s_j - log(gamma))
(the detached variant drops the first term).  All factors are bounded in
[0, 1] except A, so the computation cannot overflow at small omega.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import geometry
from .errors import BadArgs, NearZeroNorm, NonFiniteLoss
from .losses import (
    CE,
    IC,
    IV,
    NS_PRIME,
    HyperParams,
    _check_labels,
    _cosines,
    _margin_terms,
    loss_total,
    validate_flags,
)
from .model import Encoder, ModelParams, RawBatch, encode_raw, forward, modality_groups


@dataclass
class GradientBundle:
    """Gradients of the enabled total loss at one (params, batch) point."""

    d_weights: np.ndarray  # (N, d)
    d_encoders: list[Encoder]  # arrays shaped like the encoder params
    value: float
    components: dict  # per-flag loss values (0.0 for disabled flags)
    ic_skipped_classes: int = 0


def _margin_grad_coeff(s, lse_neg, log1p_gamma, rho, hp: HyperParams, weighted: bool):
    """d(per-instance margin loss)/d(s_j) as a (B, N) array (target col 0)."""
    p = np.exp(s - log1p_gamma[:, None])
    if not weighted:
        return p
    w = rho**hp.tau
    if hp.detach_weight:
        return w[:, None] * p
    r = np.exp(s - lse_neg[:, None])
    extra = hp.tau * log1p_gamma * np.exp(-log1p_gamma) * w
    return w[:, None] * p + extra[:, None] * r


def grad_total(
    params: ModelParams,
    batch: RawBatch,
    hp: HyperParams,
    enabled: Iterable[str],
) -> GradientBundle:
    """Gradient of the enabled joint loss w.r.t. weights and encoder params."""
    flags = validate_flags(enabled)
    cfg = params.config
    W = params.weights
    _check_labels(batch.labels, W.shape[0])

    groups = modality_groups(batch, cfg.num_modalities)
    raw = encode_raw(params, batch)
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms <= geometry.EPS_NORM):
        raise NearZeroNorm("encoder output collapsed during grad eval")
    V = raw / norms[:, None]

    B = len(batch)
    rows = np.arange(B)
    labels = batch.labels
    cos = V @ W.T

    dV = np.zeros_like(V)
    dW = np.zeros_like(W)
    dcos = np.zeros_like(cos)
    components = {CE: 0.0, IV: 0.0, NS_PRIME: 0.0, IC: 0.0}
    ic_skipped = 0

    if CE in flags:
        # cross-entropy == the unweighted margin loss at lambda0 = 0
        hp0 = HyperParams(lambda0=0.0, omega=hp.omega)
        s0, lse0, log1p0, rho0 = _margin_terms(cos, labels, hp0)
        components[CE] = float(np.mean(log1p0))
        coeff = _margin_grad_coeff(s0, lse0, log1p0, rho0, hp0, weighted=False)
        g = coeff.copy()
        g[rows, labels] = -coeff.sum(axis=1)
        dcos += g / (hp.omega * B)

    if IV in flags or NS_PRIME in flags:
        s, lse_neg, log1p_gamma, rho = _margin_terms(cos, labels, hp)
        if IV in flags:
            per_weight = rho**hp.tau
            components[IV] = float(np.mean(per_weight * log1p_gamma))
        else:
            components[NS_PRIME] = float(np.mean(log1p_gamma))
        coeff = _margin_grad_coeff(
            s, lse_neg, log1p_gamma, rho, hp, weighted=IV in flags
        )
        g = coeff.copy()
        g[rows, labels] = -coeff.sum(axis=1)
        dcos += g / (hp.omega * B)

    if np.any(dcos):
        dV += dcos @ W
        dW += dcos.T @ V

    if IC in flags:
        t = hp.t_rbf
        class_terms = []
        contributing: list[tuple[np.ndarray, np.ndarray]] = []
        for c in np.unique(labels):
            idx = np.flatnonzero(labels == c)
            if idx.size < 2:
                ic_skipped += 1
                continue
            exponents = -t * geometry.pairwise_sq_dists(V[idx])
            np.fill_diagonal(exponents, -np.inf)
            m = exponents.max()
            log_kernel_sum = float(np.log(np.sum(np.exp(exponents - m))) + m)
            class_terms.append(log_kernel_sum / idx.size)
            kn = np.exp(exponents - log_kernel_sum)  # kernel / kernel-sum, diag 0
            contributing.append((idx, kn))
        if class_terms:
            n_classes = len(class_terms)
            components[IC] = -sum(class_terms) / n_classes
            for idx, kn in contributing:
                vc = V[idx]
                # d(-log-sum)/dv_i over ordered pairs: 4t/(|C| P) * sum_j kn_ij (v_i - v_j)
                coef = 4.0 * t / (n_classes * idx.size)
                dV[idx] += coef * (kn.sum(axis=1)[:, None] * vc - kn @ vc)

    value = sum(components[f] for f in flags)

    # Through v = u/||u||: du = (dv - (dv.v) v) / ||u||
    radial = np.sum(dV * V, axis=1, keepdims=True)
    dU = (dV - radial * V) / norms[:, None]

    d_encoders: list[Encoder] = []
    for m, rows_m in enumerate(groups):
        enc = params.encoders[m]
        if enc.two_layer:
            grad = Encoder(
                w_in=np.zeros_like(enc.w_in),
                b_in=np.zeros_like(enc.b_in),
                w_out=np.zeros_like(enc.w_out),
                b_out=np.zeros_like(enc.b_out),
            )
        else:
            grad = Encoder(
                w_in=np.zeros_like(enc.w_in), b_in=np.zeros_like(enc.b_in)
            )
        if rows_m.size:
            x = np.stack([batch.features[i] for i in rows_m]).astype(np.float64)
            du = dU[rows_m]
            if enc.two_layer:
                h = np.tanh(x @ enc.w_in.T + enc.b_in)
                grad.w_out[:] = du.T @ h
                grad.b_out[:] = du.sum(axis=0)
                da = (du @ enc.w_out) * (1.0 - h * h)
                grad.w_in[:] = da.T @ x
                grad.b_in[:] = da.sum(axis=0)
            else:
                grad.w_in[:] = du.T @ x
                grad.b_in[:] = du.sum(axis=0)
        d_encoders.append(grad)

    return GradientBundle(
        d_weights=dW,
        d_encoders=d_encoders,
        value=float(value),
        components=components,
        ic_skipped_classes=ic_skipped,
    )


# ---------------------------------------------------------------------------
# Parameter flattening and the finite-difference oracle
# ---------------------------------------------------------------------------


def _param_arrays(params: ModelParams) -> list[np.ndarray]:
    out = [params.weights]
    for enc in params.encoders:
        out.extend(enc.arrays())
    return out


def _bundle_arrays(bundle: GradientBundle) -> list[np.ndarray]:
    out = [bundle.d_weights]
    for enc in bundle.d_encoders:
        out.extend(enc.arrays())
    return out


def flatten_params(params: ModelParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in _param_arrays(params)])


def unflatten_params(flat: np.ndarray, template: ModelParams) -> ModelParams:
    """Rebuild a ModelParams from a flat vector, using template shapes."""
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        block = flat[pos : pos + size].reshape(shape).copy()
        pos += size
        return block

    weights = take(template.weights.shape)
    encoders = []
    for enc in template.encoders:
        if enc.two_layer:
            encoders.append(
                Encoder(
                    w_in=take(enc.w_in.shape),
                    b_in=take(enc.b_in.shape),
                    w_out=take(enc.w_out.shape),
                    b_out=take(enc.b_out.shape),
                )
            )
        else:
            encoders.append(Encoder(w_in=take(enc.w_in.shape), b_in=take(enc.b_in.shape)))
    return ModelParams(weights=weights, encoders=encoders, config=template.config)


def coordinate_label(flat_index: int, params: ModelParams) -> str:
    """Human-readable name of one flattened parameter coordinate."""
    blocks = [("weights", params.weights)]
    for m, enc in enumerate(params.encoders):
        names = ["w_in", "b_in"] + (["w_out", "b_out"] if enc.two_layer else [])
        for name, arr in zip(names, enc.arrays()):
            blocks.append((f"enc{m}.{name}", arr))
    pos = 0
    for name, arr in blocks:
        if flat_index < pos + arr.size:
            idx = np.unravel_index(flat_index - pos, arr.shape)
            return f"{name}[{', '.join(str(int(i)) for i in idx)}]"
        pos += arr.size
    raise IndexError(flat_index)


@dataclass
class FDCheck:
    max_rel_err: float
    worst_index: int
    worst_label: str
    analytic: float  # analytic gradient at the worst coordinate
    numeric: float  # central difference at the worst coordinate
    n_coordinates: int


def finite_diff_check(
    params: ModelParams,
    batch: RawBatch,
    hp: HyperParams,
    enabled: Iterable[str],
    h: float = 1e-5,
) -> FDCheck:
    """Central-difference check of grad_total over every parameter coordinate.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8) to
    avoid blow-ups at true zeros.

    With detach_weight the analytic gradient treats each instance's
    hardness weight as a constant, so the probe evaluates the matching
    surrogate objective: weights frozen at their base-point values.
    """
    if not h > 0:
        raise BadArgs(f"step h must be > 0, got {h}")
    flags = validate_flags(enabled)

    frozen_weight = None
    if IV in flags and hp.detach_weight:
        e0 = forward(params, batch)
        frozen_weight = loss_total(e0, params.weights, hp, flags).per_instance_weight

    def value_at(flat: np.ndarray) -> float:
        p = unflatten_params(flat, params)
        e = forward(p, batch)
        if frozen_weight is None:
            val = loss_total(e, p.weights, hp, flags).total
        else:
            _, cos = _cosines(e, p.weights)
            _, _, log1p_gamma, _ = _margin_terms(cos, e.labels, hp)
            val = float(np.mean(frozen_weight * log1p_gamma))
            rest = flags - {IV}
            if rest:
                val += loss_total(e, p.weights, hp, rest).total
        if not np.isfinite(val):
            raise NonFiniteLoss(f"probe loss is {val}")
        return val

    analytic = np.concatenate(
        [a.ravel() for a in _bundle_arrays(grad_total(params, batch, hp, flags))]
    )
    flat = flatten_params(params)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = value_at(flat)
        flat[i] = orig - h
        down = value_at(flat)
        flat[i] = orig
        numeric[i] = (up - down) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    return FDCheck(
        max_rel_err=float(rel[worst]),
        worst_index=worst,
        worst_label=coordinate_label(worst, params),
        analytic=float(analytic[worst]),
        numeric=float(numeric[worst]),
        n_coordinates=int(flat.size),
    )
