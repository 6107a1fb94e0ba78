"""Command-line entry point.

Subcommands: gen, train, gradcheck, eval, ablate.  Each is a pure
function of its config file, flags, and input files, so reruns produce
bit-identical outputs.  Arbitrary config keys can be overridden with
``--key=value`` (e.g. ``--train.hp.tau=1.0``).

Exit codes: 0 success, 1 validation error (bad config/flags/missing
inputs), 2 runtime failure (divergence, I/O, malformed data), 3
gradcheck failure.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from dataclasses import replace

import numpy as np

from . import config as cfgmod
from .config import parse_combo_list, parse_loss_flags
from .data import generate, read_dataset, write_dataset
from .errors import BadConfig, ConflictingFlags, XModalError
from .gradients import finite_diff_check
from .model import ModelConfig, RawBatch, init_params
from .retrieval import (
    cross_modal_matrix,
    detail_text,
    embed_split,
    margin_satisfaction,
    matrix_csv,
)
from .textio import fmt_float
from .training import load_checkpoint, save_checkpoint, train

GRADCHECK_TOL = 1e-4

_OVERRIDE_RE = re.compile(r"^--([a-z][a-z0-9_.]*)=(.*)$")


class _CliError(Exception):
    """Usage/validation problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse errors to exit code 1
        raise _CliError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="xmodal", description=__doc__, add_help=True)
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset file")
    gen.add_argument("--config", help="config file (key = value lines)")
    gen.add_argument("--out", required=True, help="output dataset path")
    gen.add_argument("--seed", type=int, help="shorthand for --gen.seed=N")

    tr = sub.add_parser("train", help="train encoders on a dataset")
    tr.add_argument("--config")
    tr.add_argument("--data", required=True, help="dataset file from 'gen'")
    tr.add_argument("--out", required=True, help="output directory")
    tr.add_argument("--seed", type=int, help="shorthand for --train.seed=N")
    tr.add_argument("--loss", help="shorthand for --train.loss=STR, e.g. ce+iv+ic")
    tr.add_argument("--resume", help="checkpoint file to continue from")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--config")
    gc.add_argument("--seed", type=int, help="seed for the random probe instance")
    gc.add_argument("--h", type=float, default=1e-5, help="central-difference step")
    gc.add_argument("--loss", default="ce+iv+ic")
    gc.add_argument("--detach-weight", action="store_true")

    ev = sub.add_parser("eval", help="cross-modal retrieval report")
    ev.add_argument("--config")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True, help="output directory")
    ev.add_argument("--top-R", type=int, dest="top_r", help="rank cutoff (default: full gallery)")
    ev.add_argument("--per-query", action="store_true", help="emit per-query AP detail")

    ab = sub.add_parser("ablate", help="train/eval a grid of loss combinations")
    ab.add_argument("--config")
    ab.add_argument("--data", help="dataset file; generated from config if omitted")
    ab.add_argument("--out", required=True, help="output directory")
    ab.add_argument("--combos", help="e.g. 'ce,iv+ic,ce+iv+ic'")
    return p


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for token in extra:
        m = _OVERRIDE_RE.match(token)
        if not m:
            raise _CliError(f"unrecognized argument {token!r} (expected --key=value)")
        overrides[m.group(1)] = m.group(2)
    return overrides


def _load_values(args, overrides: dict[str, str]) -> dict[str, object]:
    file_values = None
    if args.config is not None:
        if not os.path.exists(args.config):
            raise _CliError(f"config file not found: {args.config}")
        file_values = cfgmod.read_config_file(args.config)
    return cfgmod.resolve(file_values, overrides)


def _require_file(path: str, what: str) -> None:
    if not os.path.isfile(path):
        raise _CliError(f"{what} not found: {path}")


def _model_config(ds, values) -> ModelConfig:
    return ModelConfig(
        num_classes=ds.config.num_classes,
        modality_dims=ds.config.modality_dims,
        embed_dim=values["model.embed_dim"],
        hidden=values["model.hidden"],
    )


def _env_seed_default() -> int:
    raw = os.environ.get(cfgmod.ENV_SEED)
    return int(raw) if raw is not None else 0


def cmd_gen(args, overrides) -> int:
    if args.seed is not None:
        overrides = {**overrides, "gen.seed": str(args.seed)}
    values = _load_values(args, overrides)
    gen_cfg = cfgmod.make_gen_config(values)
    ds = generate(gen_cfg)
    write_dataset(ds, args.out)
    print(
        f"dataset written to {args.out}: N={gen_cfg.num_classes} "
        f"M={gen_cfg.num_modalities} train_rows={ds.train.rows()} "
        f"test_rows={ds.test.rows()} seed={gen_cfg.seed}"
    )
    return 0


def _write_train_log_csv(log, path) -> None:
    lines = ["iteration,lr,total,ce,iv,ns,ic,ic_skipped"]
    for r in log.records:
        lines.append(
            f"{r.iteration},{fmt_float(r.lr)},{fmt_float(r.total)},"
            f"{fmt_float(r.ce)},{fmt_float(r.iv)},{fmt_float(r.ns_prime)},"
            f"{fmt_float(r.ic)},{r.ic_skipped}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_train(args, overrides) -> int:
    if args.seed is not None:
        overrides = {**overrides, "train.seed": str(args.seed)}
    if args.loss is not None:
        overrides = {**overrides, "train.loss": args.loss}
    values = _load_values(args, overrides)
    _require_file(args.data, "dataset")
    resume = None
    if args.resume is not None:
        _require_file(args.resume, "resume checkpoint")
    ds = read_dataset(args.data)
    model_cfg = _model_config(ds, values)
    train_cfg = cfgmod.make_train_config(values)
    if args.resume is not None:
        resume = load_checkpoint(args.resume)
        if resume.model_cfg != model_cfg:
            raise BadConfig(
                "resume checkpoint model config does not match this run "
                f"({resume.model_cfg} vs {model_cfg})"
            )
    os.makedirs(args.out, exist_ok=True)
    ckpt = train(ds, model_cfg, train_cfg, resume=resume, checkpoint_dir=args.out)
    ckpt_path = os.path.join(args.out, "checkpoint.txt")
    save_checkpoint(ckpt, ckpt_path)
    _write_train_log_csv(ckpt.log, os.path.join(args.out, "train_log.csv"))
    last = ckpt.log.records[-1] if ckpt.log.records else None
    if last is None:
        print(f"no iterations run; initial params written to {ckpt_path}")
    else:
        print(
            f"final iteration {last.iteration}: total {fmt_float(last.total)} "
            f"(ce {fmt_float(last.ce)} iv {fmt_float(last.iv)} "
            f"ns {fmt_float(last.ns_prime)} ic {fmt_float(last.ic)}) "
            f"-> {ckpt_path}"
        )
    return 0


def cmd_gradcheck(args, overrides) -> int:
    values = _load_values(args, overrides)
    hp_base = cfgmod.make_hyper_params(values)
    hp = replace(hp_base, detach_weight=args.detach_weight or hp_base.detach_weight)
    flags = parse_loss_flags(args.loss)
    seed = args.seed if args.seed is not None else _env_seed_default()

    # Small random probe instance; labels/modalities are tiled so every
    # class has at least two members (the pull-together loss needs pairs).
    rng = np.random.default_rng(seed)
    n_classes, n_modalities, batch, embed = 4, 3, 12, 6
    dims = tuple(int(d) for d in rng.integers(4, 9, size=n_modalities))
    model_cfg = ModelConfig(
        num_classes=n_classes, modality_dims=dims, embed_dim=embed, hidden=0
    )
    params = init_params(model_cfg, seed=seed)
    labels = np.resize(np.arange(n_classes), batch)
    modality_ids = np.resize(np.arange(n_modalities), batch)
    feats = [rng.standard_normal(dims[m]) for m in modality_ids]
    probe = RawBatch(features=feats, labels=labels, modality_ids=modality_ids)

    fd = finite_diff_check(params, probe, hp, flags, h=args.h)
    verdict = "PASS" if fd.max_rel_err < GRADCHECK_TOL else "FAIL"
    print(
        f"{verdict} max_rel_err={fd.max_rel_err:.6e} at {fd.worst_label} "
        f"(analytic {fd.analytic:.6e}, numeric {fd.numeric:.6e}, "
        f"{fd.n_coordinates} coordinates, h={args.h:g}, loss={args.loss})"
    )
    return 0 if verdict == "PASS" else 3


def cmd_eval(args, overrides) -> int:
    values = _load_values(args, overrides)
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.data, "dataset")
    ckpt = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    top_r = args.top_r if args.top_r is not None else values["eval.top_r"]
    top_r = None if not top_r else int(top_r)
    per_query = bool(args.per_query or values["eval.per_query"])
    report = cross_modal_matrix(ckpt.params, ds.test, top_r=top_r, per_query=per_query)

    test_embeddings = embed_split(ckpt.params, ds.test)
    margin = margin_satisfaction(
        test_embeddings, ckpt.params.weights, ckpt.train_cfg.hp.lambda0
    )

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "map_matrix.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(matrix_csv(report))
    summary_path = os.path.join(args.out, "summary.txt")
    with open(summary_path, "w", encoding="utf-8") as fh:
        fh.write(f"mean_map {fmt_float(report.mean_map())}\n")
        fh.write(f"margin_satisfaction {fmt_float(margin)}\n")
        fh.write(
            "gallery_sizes " + " ".join(str(g) for g in report.gallery_sizes) + "\n"
        )
        fh.write(f"top_r {top_r if top_r is not None else 'full'}\n")
    if per_query:
        with open(os.path.join(args.out, "per_query_ap.txt"), "w", encoding="utf-8") as fh:
            fh.write(detail_text(report))
    sys.stdout.write(matrix_csv(report))
    print(f"mean mAP {fmt_float(report.mean_map())}, margin {fmt_float(margin)}")
    return 0


def _combo_name(combo: tuple[str, ...]) -> str:
    return "+".join(combo)


def cmd_ablate(args, overrides) -> int:
    values = _load_values(args, overrides)
    combos = parse_combo_list(args.combos) if args.combos else values["ablate.combos"]
    if args.data is not None:
        _require_file(args.data, "dataset")
        ds = read_dataset(args.data)
    else:
        ds = generate(cfgmod.make_gen_config(values))
    model_cfg = _model_config(ds, values)
    base_train = cfgmod.make_train_config(values)

    M = ds.config.num_modalities
    tasks = [(s, t) for s in range(M) for t in range(M)]
    columns: list[tuple[str, np.ndarray]] = []
    for combo in combos:
        train_cfg = replace(base_train, enabled=combo)
        ckpt = train(ds, model_cfg, train_cfg)
        report = cross_modal_matrix(ckpt.params, ds.test)
        columns.append((_combo_name(combo), report.map_matrix))
        print(f"combo {_combo_name(combo)}: mean mAP {fmt_float(report.map_matrix.mean())}")

    os.makedirs(args.out, exist_ok=True)
    lines = ["task," + ",".join(name for name, _ in columns)]
    for s, t in tasks:
        cells = ",".join(fmt_float(matrix[s, t]) for _, matrix in columns)
        lines.append(f"mod{s}->mod{t},{cells}")
    lines.append(
        "Mean," + ",".join(fmt_float(matrix.mean()) for _, matrix in columns)
    )
    table = "\n".join(lines) + "\n"
    out_path = os.path.join(args.out, "ablation.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(table)
    sys.stdout.write(table)
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        overrides = _parse_overrides(extra)
    except _CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args, overrides)
    except (_CliError, BadConfig, ConflictingFlags) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (XModalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
