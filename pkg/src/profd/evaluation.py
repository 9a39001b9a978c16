"""Query-gallery distance matrix and CMC / mAP under the single-query protocol.

Gallery entries sharing both identity and camera with the query are
excluded before ranking (the standard protocol); ties in distance break
by gallery index.  Embeddings round-trip through the PFEM container.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EMB_MAGIC = b"PFEM"
EMB_VERSION = 1


@dataclass
class EmbeddingSet:
    """Aligned arrays describing one side of the retrieval problem."""

    global_feats: np.ndarray  # [n, d] float32
    parts: np.ndarray  # [n, N, d] float32
    visibility: np.ndarray  # [n, N] float32 in [0, 1]
    ids: np.ndarray  # [n] int
    cams: np.ndarray  # [n] int

    def __post_init__(self) -> None:
        n = self.global_feats.shape[0]
        if self.parts.shape[0] != n or self.visibility.shape[0] != n:
            raise ValueError("embedding arrays disagree on item count")
        if self.ids.shape != (n,) or self.cams.shape != (n,):
            raise ValueError("ids/cams must be [n] arrays")
        if self.parts.shape[2] != self.global_feats.shape[1]:
            raise ValueError("part width differs from global width")
        if self.parts.shape[1] != self.visibility.shape[1]:
            raise ValueError("visibility count differs from part count")

    def __len__(self) -> int:
        return self.global_feats.shape[0]

    @property
    def d(self) -> int:
        return self.global_feats.shape[1]

    @property
    def n_parts(self) -> int:
        return self.parts.shape[1]


@dataclass
class MetricsReport:
    rank_k: dict[int, float]
    mAP: float
    n_query: int
    n_gallery: int
    n_excluded: int = 0

    def __post_init__(self) -> None:
        ks = sorted(self.rank_k)
        accs = [self.rank_k[k] for k in ks]
        if any(a < 0 or a > 1 for a in accs) or not 0 <= self.mAP <= 1:
            raise ValueError("metric values must lie in [0, 1]")
        if any(b < a for a, b in zip(accs, accs[1:])):
            raise ValueError("rank accuracies must be non-decreasing in k")

    def as_text(self) -> str:
        lines = [f"rank-{k}: {v:.6f}" for k, v in sorted(self.rank_k.items())]
        lines.append(f"mAP: {self.mAP:.6f}")
        lines.append(f"n_query: {self.n_query}")
        lines.append(f"n_gallery: {self.n_gallery}")
        lines.append(f"n_excluded: {self.n_excluded}")
        return "\n".join(lines)

    def as_record(self) -> dict:
        return {
            "rank_k": {str(k): v for k, v in self.rank_k.items()},
            "mAP": self.mAP,
            "n_query": self.n_query,
            "n_gallery": self.n_gallery,
            "n_excluded": self.n_excluded,
        }


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, np.finfo(x.dtype).tiny)


def distance_matrix(
    query: EmbeddingSet, gallery: EmbeddingSet, binarize: bool = True
) -> np.ndarray:
    """Visibility-weighted distances for every query-gallery pair.

    Entry (q, g) follows the same formula as the per-pair distance op:
    part cosine distances weighted by the visibility product, plus the
    global cosine distance with weight one.
    """
    if query.d != gallery.d or query.n_parts != gallery.n_parts:
        raise ValueError("query and gallery embedding shapes disagree")
    qg = _unit_rows(query.global_feats.astype(np.float64))
    gg = _unit_rows(gallery.global_feats.astype(np.float64))
    d_global = 1.0 - qg @ gg.T  # [nq, ng]
    qp = _unit_rows(query.parts.astype(np.float64))
    gp = _unit_rows(gallery.parts.astype(np.float64))
    d_parts = 1.0 - np.einsum("qnd,gnd->qgn", qp, gp)
    vq = query.visibility.astype(np.float64)
    vg = gallery.visibility.astype(np.float64)
    if binarize:
        vq = (vq >= 0.5).astype(np.float64)
        vg = (vg >= 0.5).astype(np.float64)
    w = np.einsum("qn,gn->qgn", vq, vg)
    return ((w * d_parts).sum(axis=-1) + d_global) / (w.sum(axis=-1) + 1.0)


def cmc_map(
    dist: np.ndarray,
    q_ids: np.ndarray,
    g_ids: np.ndarray,
    q_cams: np.ndarray,
    g_cams: np.ndarray,
    ranks: tuple[int, ...] = (1, 5, 10),
) -> MetricsReport:
    """Single-query CMC at the requested ranks plus mAP.

    Per query, same-id same-camera gallery items are dropped, the rest
    ranked by distance (stable sort, so equal distances keep gallery
    order).  Queries left without any correct match are excluded from the
    averages and counted in the report.
    """
    n_query, n_gallery = dist.shape
    if q_ids.shape != (n_query,) or q_cams.shape != (n_query,):
        raise ValueError("query id/cam arrays do not match distance matrix")
    if g_ids.shape != (n_gallery,) or g_cams.shape != (n_gallery,):
        raise ValueError("gallery id/cam arrays do not match distance matrix")
    max_rank = max(ranks)
    cmc_hits = np.zeros(max_rank, dtype=np.float64)
    aps: list[float] = []
    n_excluded = 0
    for q in range(n_query):
        keep = ~((g_ids == q_ids[q]) & (g_cams == q_cams[q]))
        order = np.argsort(dist[q][keep], kind="stable")
        matches = (g_ids[keep][order] == q_ids[q])
        n_rel = int(matches.sum())
        if n_rel == 0:
            n_excluded += 1
            continue
        first = int(np.flatnonzero(matches)[0])
        if first < max_rank:
            cmc_hits[first:] += 1.0
        hit_positions = np.flatnonzero(matches)
        precisions = (np.arange(1, n_rel + 1)) / (hit_positions + 1.0)
        aps.append(float(precisions.sum() / n_rel))
    n_valid = n_query - n_excluded
    if n_valid == 0:
        raise ValueError("no query has a valid gallery match after filtering")
    cmc = cmc_hits / n_valid
    return MetricsReport(
        rank_k={k: float(cmc[k - 1]) for k in ranks},
        mAP=float(np.mean(aps)),
        n_query=n_query,
        n_gallery=n_gallery,
        n_excluded=n_excluded,
    )


# ---------------------------------------------------------------------------
# PFEM embedding container


def write_embeddings(path: str | Path, emb: EmbeddingSet) -> None:
    """Serialize an embedding set; float payloads are stored as f32."""
    n, d, n_parts = len(emb), emb.d, emb.n_parts
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<IIII", EMB_VERSION, n, d, n_parts))
        for i in range(n):
            f.write(np.ascontiguousarray(emb.global_feats[i], dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(emb.parts[i], dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(emb.visibility[i], dtype="<f4").tobytes())
            f.write(struct.pack("<II", int(emb.ids[i]), int(emb.cams[i])))


def read_embeddings(path: str | Path) -> EmbeddingSet:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != EMB_MAGIC:
        raise ValueError(f"{path}: bad magic at offset 0, expected {EMB_MAGIC!r}")
    if len(blob) < 20:
        raise ValueError(f"{path}: truncated header, file ends at offset {len(blob)}")
    version, n, d, n_parts = struct.unpack_from("<IIII", blob, 4)
    if version != EMB_VERSION:
        raise ValueError(f"{path}: unsupported version {version} at offset 4")
    item = (d + n_parts * d + n_parts) * 4 + 8
    need = 20 + n * item
    if len(blob) < need:
        raise ValueError(
            f"{path}: truncated payload, file ends at offset {len(blob)}, need {need}"
        )
    global_feats = np.empty((n, d), dtype=np.float32)
    parts = np.empty((n, n_parts, d), dtype=np.float32)
    visibility = np.empty((n, n_parts), dtype=np.float32)
    ids = np.empty(n, dtype=np.int64)
    cams = np.empty(n, dtype=np.int64)
    off = 20
    for i in range(n):
        global_feats[i] = np.frombuffer(blob, "<f4", d, off)
        off += d * 4
        parts[i] = np.frombuffer(blob, "<f4", n_parts * d, off).reshape(n_parts, d)
        off += n_parts * d * 4
        visibility[i] = np.frombuffer(blob, "<f4", n_parts, off)
        off += n_parts * 4
        ids[i], cams[i] = struct.unpack_from("<II", blob, off)
        off += 8
    return EmbeddingSet(global_feats, parts, visibility, ids, cams)
