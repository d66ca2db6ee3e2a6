"""The joint latent space and its retrieval machinery.

Image embeddings come from the penultimate-layer activations, concept
embeddings are the scoring layer's weight columns, and their dot product
reproduces the network's score vector. Ranked retrieval plus AP / P@k /
R-Precision evaluation for the image-to-concept, concept-to-image and
image-to-image tasks.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from . import tinynet
from .errors import (
    FormatError,
    GraphLookupError,
    MetricUndefinedError,
    ParameterError,
    StructuralError,
)

EMBEDDING_MAGIC = b"LWEMB1"


@dataclass
class RankedList:
    """Items sorted by descending score; ties broken by ascending id."""

    ids: list[int]
    scores: np.ndarray
    relevance: np.ndarray  # bool per item

    def __len__(self) -> int:
        return len(self.ids)

    def top(self, n: int):
        return list(zip(self.ids[:n], self.scores[:n].tolist()))


def rank_items(ids, scores, relevant_ids) -> RankedList:
    ids = list(ids)
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    relevant_ids = set(relevant_ids)
    return RankedList(
        ids=[ids[i] for i in order],
        scores=scores[order],
        relevance=np.array([ids[i] in relevant_ids for i in order], dtype=bool),
    )


class EmbeddingSpace:
    """Immutable snapshot of image embeddings, concept embeddings and truth."""

    def __init__(self, image_ids, phi, scores, psi, relevance):
        self.image_ids = list(image_ids)
        self.phi = np.asarray(phi)
        self.scores = np.asarray(scores)
        self.psi = np.asarray(psi)  # D x K
        self.relevance = {int(i): frozenset(r) for i, r in relevance.items()}
        self._row = {img_id: i for i, img_id in enumerate(self.image_ids)}
        if self.phi.shape[1] != self.psi.shape[0]:
            raise StructuralError(
                f"phi dim {self.phi.shape[1]} != psi rows {self.psi.shape[0]}"
            )
        if self.scores.shape != (len(self.image_ids), self.psi.shape[1]):
            raise StructuralError("score matrix shape does not match images x K")

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    @property
    def k(self) -> int:
        return self.psi.shape[1]

    def row(self, image_id: int) -> int:
        if image_id not in self._row:
            raise GraphLookupError(image_id)
        return self._row[image_id]

    def consistency_error(self) -> float:
        """Max relative deviation of phi . psi_k from the stored scores."""
        recon = self.phi @ self.psi
        return float(np.max(np.abs(recon - self.scores) / (1.0 + np.abs(self.scores))))


def extract(net: tinynet.Network, images: np.ndarray, image_ids, relevance) -> EmbeddingSpace:
    """Eval-mode forward over the corpus; psi is the scoring weight matrix."""
    res = tinynet.forward(net, images, mode="eval")
    space = EmbeddingSpace(image_ids, res.phi, res.scores, net.concept_matrix.copy(), relevance)
    return space


def _l2_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    out = np.zeros_like(m, dtype=np.float64)
    nz = norms[:, 0] > 0
    out[nz] = m[nz] / norms[nz]
    return out


def image_to_concept(space: EmbeddingSpace, image_id: int) -> RankedList:
    """Concepts ranked by the raw dot product phi(I) . psi_k."""
    r = space.row(image_id)
    scores = space.phi[r].astype(np.float64) @ space.psi.astype(np.float64)
    return rank_items(range(space.k), scores, space.relevance.get(image_id, frozenset()))


def concept_to_image(space: EmbeddingSpace, concept: int, normalize: bool = True) -> RankedList:
    """Images ranked against one concept embedding.

    With normalization on (the default), zero-norm embeddings score 0 and
    therefore sort last among non-positive scores.
    """
    if not 0 <= concept < space.k:
        raise ParameterError(f"concept index {concept} out of range [0,{space.k})")
    feats = _l2_rows(space.phi) if normalize else space.phi.astype(np.float64)
    scores = feats @ space.psi[:, concept].astype(np.float64)
    relevant = [i for i in space.image_ids if concept in space.relevance.get(i, frozenset())]
    return rank_items(space.image_ids, scores, relevant)


def image_to_image(space: EmbeddingSpace, query_id: int, feature: str = "phi") -> RankedList:
    """Other images ranked by normalized dot product; relevant = shares a concept."""
    if feature == "phi":
        feats = _l2_rows(space.phi)
    elif feature == "scores":
        feats = _l2_rows(space.scores)
    else:
        raise ParameterError(f"feature must be phi or scores, got {feature!r}")
    q = space.row(query_id)
    sims = feats @ feats[q]
    q_concepts = space.relevance.get(query_id, frozenset())
    others = [i for i in space.image_ids if i != query_id]
    mask = [space.row(i) for i in others]
    relevant = [i for i in others if q_concepts & space.relevance.get(i, frozenset())]
    return rank_items(others, sims[mask], relevant)


def concept_arithmetic_query(space: EmbeddingSpace, add, sub=()) -> RankedList:
    """Images ranked by summed minus subtracted concept compatibilities."""
    add, sub = list(add), list(sub)
    if set(add) & set(sub):
        raise ParameterError("additive and subtractive concept lists overlap")
    if not add and not sub:
        raise ParameterError("at least one concept required")
    for c in add + sub:
        if not 0 <= c < space.k:
            raise ParameterError(f"concept index {c} out of range [0,{space.k})")
    feats = _l2_rows(space.phi)
    direction = np.zeros(space.d)
    for c in add:
        direction += space.psi[:, c]
    for c in sub:
        direction -= space.psi[:, c]
    scores = feats @ direction
    relevant = [
        i for i in space.image_ids
        if set(add) & space.relevance.get(i, frozenset())
    ]
    return rank_items(space.image_ids, scores, relevant)


# ---------------------------------------------------------------------------
# metrics

def average_precision(ranked: RankedList) -> float:
    """Interpolation-free AP: mean of precision at each relevant rank."""
    rel = np.asarray(ranked.relevance, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        raise MetricUndefinedError("average precision undefined with no relevant items")
    hits = 0
    acc = 0.0
    for i, flag in enumerate(rel, start=1):
        if flag:
            hits += 1
            acc += hits / i
    return acc / total


def precision_at_k(ranked: RankedList, k: int) -> float:
    """Relevant items in the top k over k; short lists keep denominator k."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    rel = np.asarray(ranked.relevance, dtype=bool)
    return float(rel[:k].sum()) / k


def r_precision(ranked: RankedList) -> float:
    rel = np.asarray(ranked.relevance, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        raise MetricUndefinedError("R-Precision undefined with no relevant items")
    return float(rel[:total].sum()) / total


def mean_average_precision(lists: dict) -> tuple[float, dict]:
    """Mean AP over queries with at least one relevant item.

    Degenerate queries (zero relevant) are excluded from the mean and listed
    in the report. lists maps query id -> RankedList.
    """
    if not lists:
        raise ParameterError("query set is empty")
    per_query = {}
    degenerate = []
    for qid, ranked in lists.items():
        if not np.any(ranked.relevance):
            degenerate.append(qid)
            continue
        per_query[qid] = average_precision(ranked)
    if not per_query:
        raise MetricUndefinedError("every query has zero relevant items")
    mean = sum(per_query.values()) / len(per_query)
    return mean, {"per_query": per_query, "degenerate_queries": degenerate}


# ---------------------------------------------------------------------------
# serialization

def save_embeddings(space: EmbeddingSpace, path) -> None:
    """Binary export: magic, D, K, f32 psi (column-major), then per-image phi."""
    with open(path, "wb") as f:
        f.write(EMBEDDING_MAGIC)
        f.write(struct.pack("<II", space.d, space.k))
        f.write(np.asfortranarray(space.psi.astype("<f4")).tobytes(order="F"))
        f.write(struct.pack("<I", len(space.image_ids)))
        for img_id in space.image_ids:
            f.write(struct.pack("<I", img_id))
            f.write(space.phi[space.row(img_id)].astype("<f4").tobytes())


def load_embeddings(path):
    """Returns (image_ids, phi, psi); relevance is not stored in this format."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise FormatError(f"bad embedding magic {data[:6]!r}")
    pos = len(EMBEDDING_MAGIC)
    try:
        d, k = struct.unpack_from("<II", data, pos)
        pos += 8
        psi = np.frombuffer(data, dtype="<f4", count=d * k, offset=pos).reshape((d, k), order="F").copy()
        pos += d * k * 4
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ids, phis = [], []
        for _ in range(count):
            (img_id,) = struct.unpack_from("<I", data, pos)
            pos += 4
            phi = np.frombuffer(data, dtype="<f4", count=d, offset=pos).copy()
            pos += d * 4
            ids.append(img_id)
            phis.append(phi)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"malformed embedding file: {exc}") from None
    return ids, np.array(phis).reshape(count, d), psi


def write_metrics_csv(rows: list[dict], path) -> None:
    """One row per query: task, query id, AP, P@1/10/50, R-Precision, R."""
    fields = ["task", "query_id", "ap", "p_at_1", "p_at_10", "p_at_50", "r_precision", "relevant"]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def query_metrics_row(task: str, query_id, ranked: RankedList) -> dict:
    rel = int(np.asarray(ranked.relevance).sum())
    return {
        "task": task,
        "query_id": query_id,
        "ap": repr(average_precision(ranked)) if rel else "",
        "p_at_1": repr(precision_at_k(ranked, 1)),
        "p_at_10": repr(precision_at_k(ranked, 10)),
        "p_at_50": repr(precision_at_k(ranked, 50)),
        "r_precision": repr(r_precision(ranked)) if rel else "",
        "relevant": rel,
    }
