"""Training loop: projected SGD with step decay, logging, checkpointing.

Weight rows are re-normalized to unit length after every update (the
gradient treats them as free parameters); encoder parameters are not
projected.  Runs are fully determined by (seed, config): the sampler rng
state is checkpointed, so a resumed run reproduces an uninterrupted one
bit-for-bit.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import MultiModalDataset, sample_batch
from .errors import (
    BadConfig,
    DivergenceDetected,
    FormatError,
    NearZeroNorm,
    VersionMismatch,
)
from .gradients import GradientBundle, grad_total
from .losses import CE, IC, IV, NS_PRIME, HyperParams, validate_flags
from .model import Encoder, ModelConfig, ModelParams, init_params
from .textio import LineReader, fmt_float, parse_float, parse_int

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    base_lr: float = 0.01
    decay_every: int = 1000
    decay_factor: float = 0.1
    batch_size: int = 128
    classes_per_batch: int = 8
    hp: HyperParams = field(default_factory=HyperParams)
    enabled: tuple[str, ...] = (CE, IV, IC)
    seed: int = 0
    momentum: float = 0.0
    log_every: int = 100
    checkpoint_every: int = 0  # 0 = no intermediate checkpoints

    def __post_init__(self):
        object.__setattr__(self, "enabled", tuple(self.enabled))
        if self.iterations < 0:
            raise BadConfig(f"iterations must be >= 0, got {self.iterations}")
        if not self.base_lr > 0:
            raise BadConfig(f"base_lr must be > 0, got {self.base_lr}")
        if not 0 < self.decay_factor <= 1:
            raise BadConfig(
                f"decay_factor must be in (0, 1], got {self.decay_factor}"
            )
        if self.decay_every < 1:
            raise BadConfig(f"decay_every must be >= 1, got {self.decay_every}")
        if self.batch_size < 2:
            raise BadConfig(f"batch_size must be >= 2, got {self.batch_size}")
        if self.classes_per_batch < 1:
            raise BadConfig("classes_per_batch must be >= 1")
        if not 0 <= self.momentum < 1:
            raise BadConfig(f"momentum must be in [0, 1), got {self.momentum}")
        if self.log_every < 1:
            raise BadConfig("log_every must be >= 1")
        if self.checkpoint_every < 0:
            raise BadConfig("checkpoint_every must be >= 0")
        validate_flags(self.enabled)


@dataclass
class TrainRecord:
    iteration: int
    lr: float
    total: float
    ce: float
    iv: float
    ns_prime: float
    ic: float
    ic_skipped: int


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)


@dataclass
class Checkpoint:
    params: ModelParams
    log: TrainLog
    iteration: int
    rng_state: dict
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    velocity: list[np.ndarray] | None = None  # momentum buffers, flat order


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Step-decay schedule: base_lr * decay_factor^(iteration // decay_every)."""
    return cfg.base_lr * cfg.decay_factor ** (iteration // cfg.decay_every)


def sgd_step(params: ModelParams, grads: GradientBundle, lr: float) -> ModelParams:
    """One descent step; weight rows are re-projected onto the unit sphere."""
    w = params.weights - lr * grads.d_weights
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise NearZeroNorm("a weight row collapsed to near-zero norm")
    w = w / norms
    encoders = []
    for enc, g in zip(params.encoders, grads.d_encoders):
        if enc.two_layer:
            encoders.append(
                Encoder(
                    w_in=enc.w_in - lr * g.w_in,
                    b_in=enc.b_in - lr * g.b_in,
                    w_out=enc.w_out - lr * g.w_out,
                    b_out=enc.b_out - lr * g.b_out,
                )
            )
        else:
            encoders.append(
                Encoder(w_in=enc.w_in - lr * g.w_in, b_in=enc.b_in - lr * g.b_in)
            )
    return ModelParams(weights=w, encoders=encoders, config=params.config)


def _grad_arrays(bundle: GradientBundle) -> list[np.ndarray]:
    out = [bundle.d_weights]
    for enc in bundle.d_encoders:
        out.extend(enc.arrays())
    return out


def _bundle_from_arrays(arrays: list[np.ndarray], like: GradientBundle) -> GradientBundle:
    it = iter(arrays)
    d_weights = next(it)
    d_encoders = []
    for enc in like.d_encoders:
        if enc.two_layer:
            d_encoders.append(
                Encoder(w_in=next(it), b_in=next(it), w_out=next(it), b_out=next(it))
            )
        else:
            d_encoders.append(Encoder(w_in=next(it), b_in=next(it)))
    return GradientBundle(
        d_weights=d_weights,
        d_encoders=d_encoders,
        value=like.value,
        components=like.components,
        ic_skipped_classes=like.ic_skipped_classes,
    )


def train(
    ds: MultiModalDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    checkpoint_dir=None,
) -> Checkpoint:
    """Run sample -> forward -> grad -> step for cfg.iterations steps.

    With ``resume``, continues from the checkpointed iteration and rng
    stream; the result is identical to an uninterrupted run of the same
    total length.  Raises DivergenceDetected on a non-finite loss.
    """
    if resume is not None:
        params = resume.params
        start = resume.iteration
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        log = TrainLog(records=list(resume.log.records))
        velocity = resume.velocity
    else:
        params = init_params(model_cfg, cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        log = TrainLog()
        velocity = None
        start = 0

    last_ckpt = None
    for it in range(start, cfg.iterations):
        batch = sample_batch(ds, cfg.batch_size, cfg.classes_per_batch, rng)
        bundle = grad_total(params, batch, cfg.hp, cfg.enabled)
        if not math.isfinite(bundle.value):
            raise DivergenceDetected(
                f"non-finite loss at iteration {it}; "
                f"last checkpoint: {last_ckpt or 'none'}"
            )
        lr = lr_at(it, cfg)
        # strictly interval-based so a resumed run's log matches an
        # uninterrupted one record-for-record
        if it % cfg.log_every == 0:
            c = bundle.components
            log.records.append(
                TrainRecord(
                    iteration=it,
                    lr=lr,
                    total=bundle.value,
                    ce=c[CE],
                    iv=c[IV],
                    ns_prime=c[NS_PRIME],
                    ic=c[IC],
                    ic_skipped=bundle.ic_skipped_classes,
                )
            )
        step = bundle
        if cfg.momentum > 0:
            g_arrays = _grad_arrays(bundle)
            if velocity is None:
                velocity = [a.copy() for a in g_arrays]
            else:
                velocity = [
                    cfg.momentum * v + g for v, g in zip(velocity, g_arrays)
                ]
            step = _bundle_from_arrays(velocity, bundle)
        params = sgd_step(params, step, lr)
        done = it + 1
        if (
            checkpoint_dir is not None
            and cfg.checkpoint_every > 0
            and done % cfg.checkpoint_every == 0
            and done < cfg.iterations
        ):
            ckpt = Checkpoint(
                params=params,
                log=TrainLog(records=list(log.records)),
                iteration=done,
                rng_state=rng.bit_generator.state,
                model_cfg=model_cfg,
                train_cfg=cfg,
                velocity=velocity,
            )
            last_ckpt = os.path.join(str(checkpoint_dir), f"checkpoint_{done:06d}.txt")
            save_checkpoint(ckpt, last_ckpt)

    return Checkpoint(
        params=params,
        log=log,
        iteration=cfg.iterations,
        rng_state=rng.bit_generator.state,
        model_cfg=model_cfg,
        train_cfg=cfg,
        velocity=velocity,
    )


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------


def _named_param_arrays(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    out = [("weights", params.weights)]
    for m, enc in enumerate(params.encoders):
        out.append((f"enc{m}.w_in", enc.w_in))
        out.append((f"enc{m}.b_in", enc.b_in))
        if enc.two_layer:
            out.append((f"enc{m}.w_out", enc.w_out))
            out.append((f"enc{m}.b_out", enc.b_out))
    return out


def _write_array(lines: list[str], name: str, arr: np.ndarray) -> None:
    dims = " ".join(str(d) for d in arr.shape)
    lines.append(f"array {name} {arr.ndim} {dims}")
    rows = arr.reshape(arr.shape[0] if arr.ndim == 2 else 1, -1)
    for row in rows:
        lines.append(" ".join(fmt_float(x) for x in row))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    cfg, mc = ckpt.train_cfg, ckpt.model_cfg
    lines = [f"xmodal-checkpoint {FORMAT_VERSION}"]
    lines.append(f"iteration {ckpt.iteration}")
    lines.append("rng_state " + json.dumps(ckpt.rng_state, sort_keys=True))
    lines.append(f"model.num_classes {mc.num_classes}")
    lines.append("model.modality_dims " + ",".join(str(d) for d in mc.modality_dims))
    lines.append(f"model.embed_dim {mc.embed_dim}")
    lines.append(f"model.hidden {mc.hidden}")
    lines.append(f"train.iterations {cfg.iterations}")
    lines.append(f"train.base_lr {fmt_float(cfg.base_lr)}")
    lines.append(f"train.decay_every {cfg.decay_every}")
    lines.append(f"train.decay_factor {fmt_float(cfg.decay_factor)}")
    lines.append(f"train.batch_size {cfg.batch_size}")
    lines.append(f"train.classes_per_batch {cfg.classes_per_batch}")
    lines.append(f"train.seed {cfg.seed}")
    lines.append(f"train.momentum {fmt_float(cfg.momentum)}")
    lines.append(f"train.log_every {cfg.log_every}")
    lines.append(f"train.checkpoint_every {cfg.checkpoint_every}")
    lines.append("train.loss " + "+".join(cfg.enabled))
    lines.append(f"train.hp.lambda0 {fmt_float(cfg.hp.lambda0)}")
    lines.append(f"train.hp.omega {fmt_float(cfg.hp.omega)}")
    lines.append(f"train.hp.tau {fmt_float(cfg.hp.tau)}")
    lines.append(f"train.hp.t_rbf {fmt_float(cfg.hp.t_rbf)}")
    lines.append(f"train.hp.detach_weight {'true' if cfg.hp.detach_weight else 'false'}")
    lines.append(f"log_records {len(ckpt.log.records)}")
    for rec in ckpt.log.records:
        lines.append(
            f"log {rec.iteration} {fmt_float(rec.lr)} {fmt_float(rec.total)} "
            f"{fmt_float(rec.ce)} {fmt_float(rec.iv)} {fmt_float(rec.ns_prime)} "
            f"{fmt_float(rec.ic)} {rec.ic_skipped}"
        )
    named = _named_param_arrays(ckpt.params)
    n_vel = len(ckpt.velocity) if ckpt.velocity is not None else 0
    lines.append(f"arrays {len(named) + n_vel}")
    for name, arr in named:
        _write_array(lines, name, arr)
    if ckpt.velocity is not None:
        for (name, _), varr in zip(named, ckpt.velocity):
            _write_array(lines, f"vel.{name}", varr)
    lines.append("end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> Checkpoint:
    r = LineReader(path)
    magic = r.next("header").split()
    if len(magic) != 2 or magic[0] != "xmodal-checkpoint":
        raise FormatError(f"{path}: not a checkpoint file")
    version = parse_int(magic[1], f"{path}: line 1")
    if version != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format version {version} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    where = lambda: f"{path}: line {r.line_no}"
    iteration = parse_int(r.next_kv("iteration"), where())
    rng_state = json.loads(r.next_kv("rng_state"))
    num_classes = parse_int(r.next_kv("model.num_classes"), where())
    dims = tuple(
        parse_int(t, where()) for t in r.next_kv("model.modality_dims").split(",")
    )
    embed_dim = parse_int(r.next_kv("model.embed_dim"), where())
    hidden = parse_int(r.next_kv("model.hidden"), where())
    model_cfg = ModelConfig(
        num_classes=num_classes,
        modality_dims=dims,
        embed_dim=embed_dim,
        hidden=hidden,
    )
    iterations = parse_int(r.next_kv("train.iterations"), where())
    base_lr = parse_float(r.next_kv("train.base_lr"), where())
    decay_every = parse_int(r.next_kv("train.decay_every"), where())
    decay_factor = parse_float(r.next_kv("train.decay_factor"), where())
    batch_size = parse_int(r.next_kv("train.batch_size"), where())
    cpb = parse_int(r.next_kv("train.classes_per_batch"), where())
    seed = parse_int(r.next_kv("train.seed"), where())
    momentum = parse_float(r.next_kv("train.momentum"), where())
    log_every = parse_int(r.next_kv("train.log_every"), where())
    ckpt_every = parse_int(r.next_kv("train.checkpoint_every"), where())
    enabled = tuple(r.next_kv("train.loss").split("+"))
    hp = HyperParams(
        lambda0=parse_float(r.next_kv("train.hp.lambda0"), where()),
        omega=parse_float(r.next_kv("train.hp.omega"), where()),
        tau=parse_float(r.next_kv("train.hp.tau"), where()),
        t_rbf=parse_float(r.next_kv("train.hp.t_rbf"), where()),
        detach_weight=r.next_kv("train.hp.detach_weight") == "true",
    )
    train_cfg = TrainConfig(
        iterations=iterations,
        base_lr=base_lr,
        decay_every=decay_every,
        decay_factor=decay_factor,
        batch_size=batch_size,
        classes_per_batch=cpb,
        hp=hp,
        enabled=enabled,
        seed=seed,
        momentum=momentum,
        log_every=log_every,
        checkpoint_every=ckpt_every,
    )

    n_records = parse_int(r.next_kv("log_records"), where())
    records = []
    for _ in range(n_records):
        toks = r.next("log record").split()
        loc = where()
        if len(toks) != 9 or toks[0] != "log":
            raise FormatError(f"{loc}: malformed log record")
        records.append(
            TrainRecord(
                iteration=parse_int(toks[1], loc),
                lr=parse_float(toks[2], loc),
                total=parse_float(toks[3], loc),
                ce=parse_float(toks[4], loc),
                iv=parse_float(toks[5], loc),
                ns_prime=parse_float(toks[6], loc),
                ic=parse_float(toks[7], loc),
                ic_skipped=parse_int(toks[8], loc),
            )
        )

    n_arrays = parse_int(r.next_kv("arrays"), where())
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        head = r.next("array header").split()
        loc = where()
        if len(head) < 3 or head[0] != "array":
            raise FormatError(f"{loc}: malformed array header")
        name = head[1]
        ndim = parse_int(head[2], loc)
        shape = tuple(parse_int(t, loc) for t in head[3 : 3 + ndim])
        n_rows = shape[0] if ndim == 2 else 1
        rows = []
        for _ in range(n_rows):
            row = [parse_float(t, where()) for t in r.next("array row").split()]
            rows.append(row)
        arr = np.asarray(rows, dtype=np.float64).reshape(shape)
        arrays[name] = arr
    if r.next("trailer") != "end":
        raise FormatError(f"{path}: line {r.line_no}: missing 'end' trailer")

    def get(name: str) -> np.ndarray:
        if name not in arrays:
            raise FormatError(f"{path}: missing array {name!r}")
        return arrays[name]

    encoders = []
    for m in range(model_cfg.num_modalities):
        if hidden > 0:
            encoders.append(
                Encoder(
                    w_in=get(f"enc{m}.w_in"),
                    b_in=get(f"enc{m}.b_in"),
                    w_out=get(f"enc{m}.w_out"),
                    b_out=get(f"enc{m}.b_out"),
                )
            )
        else:
            encoders.append(Encoder(w_in=get(f"enc{m}.w_in"), b_in=get(f"enc{m}.b_in")))
    params = ModelParams(weights=get("weights"), encoders=encoders, config=model_cfg)
    velocity = None
    if any(k.startswith("vel.") for k in arrays):
        velocity = [arrays[f"vel.{name}"] for name, _ in _named_param_arrays(params)]
    return Checkpoint(
        params=params,
        log=TrainLog(records=records),
        iteration=iteration,
        rng_state=rng_state,
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        velocity=velocity,
    )
