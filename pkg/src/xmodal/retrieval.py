"""Cross-modal retrieval evaluation: ranking, average precision, mAP.

Queries and galleries are cosine-ranked on the shared hypersphere.  Each
(source, target) modality pair yields one mAP cell; the diagonal excludes
the query itself from its gallery.  Ties are broken by ascending gallery
index so reports are reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadArgs, EmptyGallery, EmptyModality
from .losses import LabeledEmbeddings, _cosines
from .model import ModelParams, RawBatch, forward
from .textio import fmt_float


@dataclass
class RetrievalReport:
    map_matrix: np.ndarray  # (M, M): source modality x target modality
    gallery_sizes: tuple[int, ...]  # test rows per modality
    query_counts: tuple[int, ...]
    top_r: int | None  # None = full gallery
    per_query_ap: list | None  # [src][tgt] -> list of AP floats

    def mean_map(self) -> float:
        return float(self.map_matrix.mean())


def rank_gallery(query, gallery) -> np.ndarray:
    """Gallery indices sorted by descending cosine; ties by ascending index."""
    g = np.asarray(gallery, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 1:
        raise EmptyGallery("gallery must contain at least one vector")
    q = np.asarray(query, dtype=np.float64)
    sims = g @ q
    return np.argsort(-sims, kind="stable")


def average_precision(relevance, R: int | None = None, T: int | None = None) -> float:
    """AP = (1/T) * sum_{r=1..R} P_r * delta(r).

    P_r is the precision of the top r items and delta(r) flags a relevant
    item at rank r.  T defaults to the number of relevant items within
    the top R (the retrieved set); returns 0.0 when T == 0.
    """
    rel = [1 if x else 0 for x in relevance]
    if R is None:
        R = len(rel)
    if R < 0 or R > len(rel):
        raise BadArgs(f"R={R} outside [0, {len(rel)}]")
    top = rel[:R]
    if T is None:
        T = sum(top)
    if T < 0:
        raise BadArgs(f"T={T} must be >= 0")
    if T == 0:
        return 0.0
    hits = 0
    acc = 0.0
    for r, flag in enumerate(top, start=1):
        if flag:
            hits += 1
            acc += hits / r
    return acc / T


def _embed_test_modalities(
    params: ModelParams, split
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-modality (embeddings, labels) for a dataset split."""
    out = []
    for m, (feats, labels) in enumerate(zip(split.features, split.labels)):
        if feats.shape[0] == 0:
            raise EmptyModality(f"modality {m} has no rows in this split")
        batch = RawBatch(
            features=[feats[i] for i in range(feats.shape[0])],
            labels=labels,
            modality_ids=np.full(feats.shape[0], m, dtype=np.int64),
        )
        e = forward(params, batch)
        out.append((e.embeddings, e.labels))
    return out


def embed_split(params: ModelParams, split) -> LabeledEmbeddings:
    """All modalities of a split embedded and concatenated."""
    per_mod = _embed_test_modalities(params, split)
    embs = np.concatenate([v for v, _ in per_mod])
    labels = np.concatenate([l for _, l in per_mod])
    mods = np.concatenate(
        [np.full(len(l), m, dtype=np.int64) for m, (_, l) in enumerate(per_mod)]
    )
    return LabeledEmbeddings(embeddings=embs, labels=labels, modality_ids=mods)


def cross_modal_matrix(
    params: ModelParams,
    split,
    top_r: int | None = None,
    per_query: bool = False,
) -> RetrievalReport:
    """mAP for every (source, target) modality pair of a dataset split.

    Every source embedding queries the full target gallery (minus itself
    on the diagonal); an item is relevant iff it shares the query's class.
    Per-cell means are accumulated in query order for reproducibility.
    """
    per_mod = _embed_test_modalities(params, split)
    M = len(per_mod)
    matrix = np.zeros((M, M))
    detail: list | None = [[None] * M for _ in range(M)] if per_query else None
    for src in range(M):
        v_src, lab_src = per_mod[src]
        for tgt in range(M):
            v_tgt, lab_tgt = per_mod[tgt]
            sims = v_src @ v_tgt.T
            aps: list[float] = []
            for q in range(v_src.shape[0]):
                order = np.argsort(-sims[q], kind="stable")
                if src == tgt:
                    order = order[order != q]
                if order.size == 0:
                    raise EmptyGallery(
                        f"gallery for pair ({src}->{tgt}) is empty after "
                        "self-exclusion"
                    )
                rel = (lab_tgt[order] == lab_src[q]).astype(np.int64)
                R = order.size if top_r is None else min(top_r, order.size)
                aps.append(average_precision(rel, R))
            matrix[src, tgt] = sum(aps) / len(aps)
            if per_query:
                detail[src][tgt] = aps
    return RetrievalReport(
        map_matrix=matrix,
        gallery_sizes=tuple(v.shape[0] for v, _ in per_mod),
        query_counts=tuple(v.shape[0] for v, _ in per_mod),
        top_r=top_r,
        per_query_ap=detail,
    )


def margin_satisfaction(e: LabeledEmbeddings, weights, lambda0: float) -> float:
    """Fraction of instances whose target cosine distance beats every
    competing class by at least lambda0 (strictly)."""
    _, cos = _cosines(e, weights)
    rows = np.arange(len(e))
    cos_target = cos[rows, e.labels]
    others = cos.copy()
    others[rows, e.labels] = -np.inf
    best_other = others.max(axis=1)
    return float(np.mean((cos_target - lambda0) > best_other))


def matrix_csv(report: RetrievalReport) -> str:
    """The mAP matrix as CSV: source rows, target columns."""
    M = report.map_matrix.shape[0]
    header = "source," + ",".join(f"mod{t}" for t in range(M))
    lines = [header]
    for s in range(M):
        cells = ",".join(fmt_float(report.map_matrix[s, t]) for t in range(M))
        lines.append(f"mod{s},{cells}")
    return "\n".join(lines) + "\n"


def detail_text(report: RetrievalReport) -> str:
    """Structured text with per-query AP detail (requires per_query=True)."""
    if report.per_query_ap is None:
        raise BadArgs("report was built without per-query detail")
    M = report.map_matrix.shape[0]
    lines = [
        f"top_r {report.top_r if report.top_r is not None else 'full'}",
        "gallery_sizes " + " ".join(str(g) for g in report.gallery_sizes),
    ]
    for s in range(M):
        for t in range(M):
            aps = report.per_query_ap[s][t]
            lines.append(f"pair mod{s}->mod{t} mean {fmt_float(report.map_matrix[s, t])}")
            for q, ap in enumerate(aps):
                lines.append(f"  query {q} ap {fmt_float(ap)}")
    return "\n".join(lines) + "\n"
