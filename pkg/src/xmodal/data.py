"""Synthetic multi-modal datasets: generation, file I/O, batch sampling.

The generator is a desk-scale stand-in for real multi-modal corpora.
Class prototypes live on a latent unit sphere; each modality embeds them
into its own raw feature space through a fixed random orthonormal map
plus a modality offset, and instances are prototypes plus Gaussian noise.
Difficulty dials: ``sigma_intra`` (noise), ``overlap`` (prototype
correlation), ``modal_shift`` (cross-modal discrepancy) and
``shift_test`` (domain shift applied to the test split only).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadConfig, FormatError, InsufficientData
from .model import RawBatch
from .textio import LineReader, fmt_float, parse_float, parse_int

FORMAT_VERSION = 1

_SPLITS = ("train", "test")


@dataclass(frozen=True)
class GenConfig:
    num_classes: int = 8  # N
    num_modalities: int = 3  # M
    n_train: int = 40  # instances per class per modality
    n_test: int = 10
    modality_dims: tuple[int, ...] = (24, 18, 20)  # d_m
    latent_dim: int = 16
    sigma_intra: float = 0.1
    modal_shift: float = 1.0
    overlap: float = 0.0
    shift_test: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(self.modality_dims))
        if self.num_classes < 2:
            raise BadConfig(f"N must be >= 2, got {self.num_classes}")
        if self.num_modalities < 1:
            raise BadConfig(f"M must be >= 1, got {self.num_modalities}")
        if self.n_train < 2:
            raise BadConfig(f"n_train must be >= 2, got {self.n_train}")
        if self.n_test < 1:
            raise BadConfig(f"n_test must be >= 1, got {self.n_test}")
        if len(self.modality_dims) != self.num_modalities:
            raise BadConfig(
                f"d_m lists {len(self.modality_dims)} dims but M={self.num_modalities}"
            )
        if self.latent_dim < 2:
            raise BadConfig(f"latent_dim must be >= 2, got {self.latent_dim}")
        if any(d < self.latent_dim for d in self.modality_dims):
            raise BadConfig(
                f"every modality dim must be >= latent_dim={self.latent_dim}, "
                f"got {self.modality_dims}"
            )
        if self.sigma_intra < 0:
            raise BadConfig("sigma_intra must be >= 0")
        if self.modal_shift < 0:
            raise BadConfig("modal_shift must be >= 0")
        if not 0 <= self.overlap < 1:
            raise BadConfig(f"overlap must be in [0, 1), got {self.overlap}")
        if self.shift_test < 0:
            raise BadConfig("shift_test must be >= 0")


@dataclass
class Split:
    """Per-modality feature/label arrays; rows are class-major."""

    features: list[np.ndarray]  # [m] -> (rows_m, d_m)
    labels: list[np.ndarray]  # [m] -> (rows_m,)

    def rows(self) -> int:
        return sum(f.shape[0] for f in self.features)


@dataclass
class MultiModalDataset:
    train: Split
    test: Split
    config: GenConfig


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def generate(cfg: GenConfig) -> MultiModalDataset:
    """Seed-deterministic synthetic dataset.

    Draw order is fixed (shared direction, prototypes, then per modality:
    map, offset, test shift, train noise, test noise) so identical configs
    produce bit-identical datasets.
    """
    rng = np.random.default_rng(cfg.seed)
    shared = rng.standard_normal(cfg.latent_dim)
    protos = np.empty((cfg.num_classes, cfg.latent_dim))
    for c in range(cfg.num_classes):
        g = rng.standard_normal(cfg.latent_dim)
        p = np.sqrt(1.0 - cfg.overlap) * g + np.sqrt(cfg.overlap) * shared
        protos[c] = p / np.linalg.norm(p)

    train_feats, train_labels, test_feats, test_labels = [], [], [], []
    for d_m in cfg.modality_dims:
        basis, _ = np.linalg.qr(rng.standard_normal((d_m, cfg.latent_dim)))
        offset = cfg.modal_shift * _unit(rng, d_m)
        test_offset = cfg.shift_test * _unit(rng, d_m)
        means = protos @ basis.T + offset  # (N, d_m)

        noise = rng.standard_normal((cfg.num_classes, cfg.n_train, d_m))
        rows = means[:, None, :] + cfg.sigma_intra * noise
        train_feats.append(rows.reshape(-1, d_m))
        train_labels.append(np.repeat(np.arange(cfg.num_classes), cfg.n_train))

        noise = rng.standard_normal((cfg.num_classes, cfg.n_test, d_m))
        rows = (means + test_offset)[:, None, :] + cfg.sigma_intra * noise
        test_feats.append(rows.reshape(-1, d_m))
        test_labels.append(np.repeat(np.arange(cfg.num_classes), cfg.n_test))

    return MultiModalDataset(
        train=Split(train_feats, train_labels),
        test=Split(test_feats, test_labels),
        config=cfg,
    )


def datasets_equal(a: MultiModalDataset, b: MultiModalDataset) -> bool:
    """Bit-exact equality (used by the round-trip contract)."""
    if a.config != b.config:
        return False
    for sa, sb in ((a.train, b.train), (a.test, b.test)):
        if len(sa.features) != len(sb.features):
            return False
        for fa, fb, la, lb in zip(sa.features, sb.features, sa.labels, sb.labels):
            if not (np.array_equal(fa, fb) and np.array_equal(la, lb)):
                return False
    return True


# ---------------------------------------------------------------------------
# File format: header block, then one text row per instance
# ---------------------------------------------------------------------------


def write_dataset(ds: MultiModalDataset, path) -> None:
    cfg = ds.config
    lines = [f"xmodal-dataset {FORMAT_VERSION}"]
    lines.append(f"N {cfg.num_classes}")
    lines.append(f"M {cfg.num_modalities}")
    lines.append("d_m " + ",".join(str(d) for d in cfg.modality_dims))
    lines.append(f"latent_dim {cfg.latent_dim}")
    lines.append(f"n_train {cfg.n_train}")
    lines.append(f"n_test {cfg.n_test}")
    lines.append(f"sigma_intra {fmt_float(cfg.sigma_intra)}")
    lines.append(f"modal_shift {fmt_float(cfg.modal_shift)}")
    lines.append(f"overlap {fmt_float(cfg.overlap)}")
    lines.append(f"shift_test {fmt_float(cfg.shift_test)}")
    lines.append(f"seed {cfg.seed}")
    total = ds.train.rows() + ds.test.rows()
    lines.append(f"rows {total}")
    for split_name, split in (("train", ds.train), ("test", ds.test)):
        for m in range(cfg.num_modalities):
            feats, labels = split.features[m], split.labels[m]
            for i in range(feats.shape[0]):
                vals = " ".join(fmt_float(x) for x in feats[i])
                lines.append(f"{split_name} {labels[i]} {m} {vals}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(path) -> MultiModalDataset:
    r = LineReader(path)
    magic = r.next("header")
    parts = magic.split()
    if len(parts) != 2 or parts[0] != "xmodal-dataset":
        raise FormatError(f"{path}: line 1: not a dataset file: {magic!r}")
    version = parse_int(parts[1], f"{path}: line 1")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{path}: unsupported dataset format version {version}"
        )
    where = lambda: f"{path}: line {r.line_no}"
    N = parse_int(r.next_kv("N"), where())
    M = parse_int(r.next_kv("M"), where())
    dims = tuple(
        parse_int(tok, where()) for tok in r.next_kv("d_m").split(",")
    )
    latent = parse_int(r.next_kv("latent_dim"), where())
    n_train = parse_int(r.next_kv("n_train"), where())
    n_test = parse_int(r.next_kv("n_test"), where())
    sigma = parse_float(r.next_kv("sigma_intra"), where())
    shift = parse_float(r.next_kv("modal_shift"), where())
    overlap = parse_float(r.next_kv("overlap"), where())
    shift_test = parse_float(r.next_kv("shift_test"), where())
    seed = parse_int(r.next_kv("seed"), where())
    rows = parse_int(r.next_kv("rows"), where())
    try:
        cfg = GenConfig(
            num_classes=N,
            num_modalities=M,
            n_train=n_train,
            n_test=n_test,
            modality_dims=dims,
            latent_dim=latent,
            sigma_intra=sigma,
            modal_shift=shift,
            overlap=overlap,
            shift_test=shift_test,
            seed=seed,
        )
    except BadConfig as exc:
        raise FormatError(f"{path}: invalid header: {exc}") from None

    store = {
        s: [([], []) for _ in range(M)] for s in _SPLITS
    }  # split -> [m] -> (feature rows, labels)
    for _ in range(rows):
        line = r.next("data row")
        toks = line.split()
        loc = f"{path}: line {r.line_no}"
        if len(toks) < 3:
            raise FormatError(f"{loc}: malformed data row {line!r}")
        split_name, label_tok, mod_tok = toks[0], toks[1], toks[2]
        if split_name not in _SPLITS:
            raise FormatError(f"{loc}: unknown split {split_name!r}")
        label = parse_int(label_tok, loc)
        mod = parse_int(mod_tok, loc)
        if not 0 <= mod < M:
            raise FormatError(f"{loc}: modality id {mod} outside [0, {M})")
        if not 0 <= label < N:
            raise FormatError(f"{loc}: class id {label} outside [0, {N})")
        d_m = dims[mod]
        if len(toks) != 3 + d_m:
            raise FormatError(
                f"{loc}: expected {d_m} features for modality {mod}, "
                f"got {len(toks) - 3}"
            )
        feats = [parse_float(tok, loc) for tok in toks[3:]]
        store[split_name][mod][0].append(feats)
        store[split_name][mod][1].append(label)
    if not r.at_end():
        raise FormatError(
            f"{path}: line {r.line_no + 1}: trailing content after {rows} rows"
        )

    splits = {}
    for split_name, per_class in (("train", n_train), ("test", n_test)):
        feats, labels = [], []
        for m in range(M):
            raw_feats, raw_labels = store[split_name][m]
            expected = N * per_class
            if len(raw_feats) != expected:
                raise FormatError(
                    f"{path}: {split_name} split has {len(raw_feats)} rows for "
                    f"modality {m}, expected {expected}"
                )
            feats.append(np.asarray(raw_feats, dtype=np.float64))
            labels.append(np.asarray(raw_labels, dtype=np.int64))
        splits[split_name] = Split(feats, labels)
    return MultiModalDataset(train=splits["train"], test=splits["test"], config=cfg)


# ---------------------------------------------------------------------------
# Class-balanced batch sampling
# ---------------------------------------------------------------------------


def sample_batch(
    ds: MultiModalDataset,
    batch_size: int,
    classes_per_batch: int,
    rng: np.random.Generator,
) -> RawBatch:
    """Class-balanced sample from the train split.

    Picks ``classes_per_batch`` classes, then an (almost) equal number of
    instances per (class, modality) cell: a base of batch_size // cells
    each, with the remainder spread one-per-cell in rng order.  Requires
    batch_size >= 2 * classes_per_batch * M so every selected class has
    at least two in-batch instances (the pull-together loss needs pairs).
    """
    cfg = ds.config
    N, M = cfg.num_classes, cfg.num_modalities
    if not 1 <= classes_per_batch <= N:
        raise InsufficientData(
            f"classes_per_batch={classes_per_batch} not in [1, {N}]"
        )
    n_cells = classes_per_batch * M
    if batch_size < 2 * n_cells:
        raise InsufficientData(
            f"batch_size={batch_size} < 2 * classes_per_batch * M = {2 * n_cells}"
        )
    base, rem = divmod(batch_size, n_cells)
    chosen = rng.choice(N, size=classes_per_batch, replace=False)
    extras = np.zeros(n_cells, dtype=np.int64)
    extras[rng.permutation(n_cells)[:rem]] = 1

    features: list[np.ndarray] = []
    labels: list[int] = []
    modality_ids: list[int] = []
    cell = 0
    for c in chosen:
        for m in range(M):
            count = base + int(extras[cell])
            cell += 1
            pool = np.flatnonzero(ds.train.labels[m] == c)
            if count > pool.size:
                raise InsufficientData(
                    f"need {count} instances of class {c} modality {m}, "
                    f"dataset has {pool.size}"
                )
            picks = rng.choice(pool.size, size=count, replace=False)
            for p in np.sort(picks):
                features.append(ds.train.features[m][pool[p]].copy())
                labels.append(int(c))
                modality_ids.append(m)
    return RawBatch(
        features=features,
        labels=np.asarray(labels, dtype=np.int64),
        modality_ids=np.asarray(modality_ids, dtype=np.int64),
    )
