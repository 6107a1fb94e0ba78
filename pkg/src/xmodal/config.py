"""Run configuration: flat ``key = value`` files with dotted sections.

Precedence (lowest to highest): built-in defaults, the XMODAL_SEED
environment variable (seed keys only), the config file, command-line
``--key=value`` overrides.  Unknown keys and out-of-range values are
rejected before any work starts.
"""

from __future__ import annotations

import os

from .data import GenConfig
from .errors import BadConfig
from .losses import HyperParams, validate_flags
from .training import TrainConfig


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise BadConfig(f"expected an integer, got {text!r}") from None


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise BadConfig(f"expected a number, got {text!r}") from None


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise BadConfig(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(_parse_int(tok) for tok in text.split(",") if tok.strip() != "")


def parse_loss_flags(text: str) -> tuple[str, ...]:
    """'ce+iv+ic' -> ('ce', 'iv', 'ic'), validated."""
    flags = tuple(tok.strip() for tok in text.split("+") if tok.strip())
    validate_flags(flags)
    return flags


def parse_combo_list(text: str) -> list[tuple[str, ...]]:
    """'ce,iv+ic' -> [('ce',), ('iv', 'ic')]."""
    combos = [parse_loss_flags(part) for part in text.split(",") if part.strip()]
    if not combos:
        raise BadConfig("combo list is empty")
    return combos


_SCHEMA = {
    "gen.N": _parse_int,
    "gen.M": _parse_int,
    "gen.n_train": _parse_int,
    "gen.n_test": _parse_int,
    "gen.d_m": _parse_int_list,
    "gen.latent_dim": _parse_int,
    "gen.sigma_intra": _parse_float,
    "gen.modal_shift": _parse_float,
    "gen.overlap": _parse_float,
    "gen.shift_test": _parse_float,
    "gen.seed": _parse_int,
    "model.embed_dim": _parse_int,
    "model.hidden": _parse_int,
    "train.iterations": _parse_int,
    "train.base_lr": _parse_float,
    "train.decay_every": _parse_int,
    "train.decay_factor": _parse_float,
    "train.batch_size": _parse_int,
    "train.classes_per_batch": _parse_int,
    "train.seed": _parse_int,
    "train.momentum": _parse_float,
    "train.log_every": _parse_int,
    "train.checkpoint_every": _parse_int,
    "train.loss": parse_loss_flags,
    "train.hp.lambda0": _parse_float,
    "train.hp.omega": _parse_float,
    "train.hp.tau": _parse_float,
    "train.hp.t_rbf": _parse_float,
    "train.hp.detach_weight": _parse_bool,
    "eval.top_r": _parse_int,
    "eval.per_query": _parse_bool,
    "ablate.combos": parse_combo_list,
}

_DEFAULTS = {
    "gen.N": "8",
    "gen.M": "3",
    "gen.n_train": "40",
    "gen.n_test": "10",
    "gen.d_m": "24,18,20",
    "gen.latent_dim": "16",
    "gen.sigma_intra": "0.1",
    "gen.modal_shift": "1.0",
    "gen.overlap": "0.0",
    "gen.shift_test": "0.0",
    "gen.seed": "0",
    "model.embed_dim": "16",
    "model.hidden": "0",
    "train.iterations": "2000",
    "train.base_lr": "0.01",
    "train.decay_every": "1000",
    "train.decay_factor": "0.1",
    "train.batch_size": "128",
    "train.classes_per_batch": "8",
    "train.seed": "0",
    "train.momentum": "0.0",
    "train.log_every": "100",
    "train.checkpoint_every": "0",
    "train.loss": "ce+iv+ic",
    "train.hp.lambda0": "0.35",
    "train.hp.omega": "0.03333333333333333",
    "train.hp.tau": "0.1",
    "train.hp.t_rbf": "2.0",
    "train.hp.detach_weight": "false",
    "eval.top_r": "0",
    "eval.per_query": "false",
    "ablate.combos": "ce,iv,ns,iv+ic,ce+iv,ce+iv+ic,ce+ic",
}

ENV_SEED = "XMODAL_SEED"
_SEED_KEYS = ("gen.seed", "train.seed")


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' comments and blank lines allowed."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise BadConfig(f"{path}: line {ln}: expected 'key = value', got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key in values:
                raise BadConfig(f"{path}: line {ln}: duplicate key {key!r}")
            values[key] = value
    return values


def resolve(
    file_values: dict[str, str] | None, overrides: dict[str, str] | None = None
) -> dict[str, object]:
    """Merge defaults, env seed, file, and overrides into typed values."""
    raw = dict(_DEFAULTS)
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        for key in _SEED_KEYS:
            raw[key] = env_seed
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in _SCHEMA:
                raise BadConfig(f"unknown config key {key!r}")
            raw[key] = value
    typed: dict[str, object] = {}
    for key, value in raw.items():
        try:
            typed[key] = _SCHEMA[key](value)
        except BadConfig as exc:
            raise BadConfig(f"config key {key!r}: {exc}") from None
    return typed


def make_gen_config(cfg: dict[str, object]) -> GenConfig:
    return GenConfig(
        num_classes=cfg["gen.N"],
        num_modalities=cfg["gen.M"],
        n_train=cfg["gen.n_train"],
        n_test=cfg["gen.n_test"],
        modality_dims=cfg["gen.d_m"],
        latent_dim=cfg["gen.latent_dim"],
        sigma_intra=cfg["gen.sigma_intra"],
        modal_shift=cfg["gen.modal_shift"],
        overlap=cfg["gen.overlap"],
        shift_test=cfg["gen.shift_test"],
        seed=cfg["gen.seed"],
    )


def make_hyper_params(cfg: dict[str, object]) -> HyperParams:
    return HyperParams(
        lambda0=cfg["train.hp.lambda0"],
        omega=cfg["train.hp.omega"],
        tau=cfg["train.hp.tau"],
        t_rbf=cfg["train.hp.t_rbf"],
        detach_weight=cfg["train.hp.detach_weight"],
    )


def make_train_config(cfg: dict[str, object]) -> TrainConfig:
    return TrainConfig(
        iterations=cfg["train.iterations"],
        base_lr=cfg["train.base_lr"],
        decay_every=cfg["train.decay_every"],
        decay_factor=cfg["train.decay_factor"],
        batch_size=cfg["train.batch_size"],
        classes_per_batch=cfg["train.classes_per_batch"],
        hp=make_hyper_params(cfg),
        enabled=cfg["train.loss"],
        seed=cfg["train.seed"],
        momentum=cfg["train.momentum"],
        log_every=cfg["train.log_every"],
        checkpoint_every=cfg["train.checkpoint_every"],
    )
