"""Recall@K / subset recall evaluation and the mask-alignment diagnostic."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import roc_auc_score

from .composition import teacher_compose
from .config import ConfigError
from .data import Triplet
from .losses import TRAIN_EPS, pool, unit_rows

PROTOCOLS = ("synthetic", "fashioniq", "shoes", "cirr")


class Retriever(Protocol):
    def embed_queries(self, reference: torch.Tensor, text: torch.Tensor) -> torch.Tensor: ...
    def embed_gallery(self, images: torch.Tensor) -> torch.Tensor: ...


@dataclass
class EvalReport:
    recall_at: dict[int, float]
    recall_subset_at: dict[int, float] = field(default_factory=dict)
    averages: dict[str, float] = field(default_factory=dict)
    num_queries: int = 0

    def to_dict(self) -> dict:
        return {
            "num_queries": self.num_queries,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "recall_subset_at": {str(k): v for k, v in self.recall_subset_at.items()},
            "averages": self.averages,
        }

    def to_text(self) -> str:
        lines = [f"num_queries = {self.num_queries}"]
        lines += [f"R@{k} = {v:.4f}" for k, v in self.recall_at.items()]
        lines += [f"R_subset@{k} = {v:.4f}" for k, v in self.recall_subset_at.items()]
        lines += [f"{name} = {v:.4f}" for name, v in self.averages.items()]
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def target_ranks(scores: np.ndarray, target_ids: Sequence[int]) -> np.ndarray:
    """0-based rank of each query's target under descending score, ties broken by gallery index."""
    scores = np.asarray(scores)
    target_ids = np.asarray(target_ids)
    t = scores[np.arange(len(scores)), target_ids][:, None]
    before = np.arange(scores.shape[1])[None, :] < target_ids[:, None]
    return (scores > t).sum(axis=1) + ((scores == t) & before).sum(axis=1)


def recall_at_k(scores: np.ndarray, target_ids: Sequence[int], ks: Sequence[int]) -> dict[int, float]:
    ranks = target_ranks(scores, target_ids)
    return {int(k): float(np.mean(ranks < k)) for k in ks}


def subset_recall_at_k(
    scores: np.ndarray, target_ids: Sequence[int], subsets: Sequence[Sequence[int]], ks: Sequence[int]
) -> dict[int, float]:
    """Recall when each query is ranked only against its own candidate subset."""
    hits = {int(k): 0 for k in ks}
    for row, target, subset in zip(np.asarray(scores), target_ids, subsets):
        members = np.sort(np.asarray(subset))
        if target not in members:
            raise ValueError(f"target {target} is not in its candidate subset")
        rank = target_ranks(row[members][None, :], [int(np.searchsorted(members, target))])[0]
        for k in hits:
            hits[k] += rank < k
    return {k: v / len(target_ids) for k, v in hits.items()}


def protocol_averages(protocol: str, recall: dict[int, float], subset: dict[int, float]) -> dict[str, float]:
    def need(d, k, label):
        if k not in d:
            raise ConfigError(f"protocol {protocol!r} needs {label}@{k}")
        return d[k]

    if protocol == "synthetic":
        return {"avg": float(np.mean(list(recall.values())))}
    if protocol == "fashioniq":
        return {"avg": (need(recall, 10, "R") + need(recall, 50, "R")) / 2}
    if protocol == "shoes":
        return {"avg": (need(recall, 1, "R") + need(recall, 10, "R") + need(recall, 50, "R")) / 3}
    if protocol == "cirr":
        return {"avg": (need(recall, 5, "R") + need(subset, 1, "R_subset")) / 2}
    raise ConfigError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")


def score_matrix(
    model: Retriever, queries: Sequence[Triplet], gallery_payloads: np.ndarray, batch_size: int = 1024
) -> np.ndarray:
    """Cosine scores between student query embeddings and every gallery image, ``(N, G)``."""
    dtype = next(iter(model.parameters())).dtype if hasattr(model, "parameters") else torch.float32
    gallery = torch.as_tensor(np.asarray(gallery_payloads), dtype=dtype)
    g = torch.cat([model.embed_gallery(gallery[i : i + batch_size]) for i in range(0, len(gallery), batch_size)])
    rows = []
    for i in range(0, len(queries), batch_size):
        chunk = queries[i : i + batch_size]
        ref = gallery[[t.reference_id for t in chunk]]
        text = torch.as_tensor(np.stack([t.text for t in chunk]), dtype=dtype)
        rows.append(model.embed_queries(ref, text) @ g.T)
    return torch.cat(rows).cpu().numpy().astype(np.float64)


def evaluate(
    model: Retriever,
    queries: Sequence[Triplet],
    gallery_payloads: np.ndarray,
    ks: Sequence[int] = (1, 5, 10, 50),
    subset_ks: Sequence[int] = (),
    protocol: str = "synthetic",
) -> EvalReport:
    """Rank the whole gallery for each query with the student (early-fusion) path."""
    if not ks:
        raise ConfigError("need at least one K")
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    if subset_ks and any(t.subset is None for t in queries):
        raise ConfigError("subset recall requested but some queries carry no candidate subset")
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        scores = score_matrix(model, queries, gallery_payloads)
    finally:
        if was_training:
            model.train()
    targets = [t.target_id for t in queries]
    recall = recall_at_k(scores, targets, sorted(ks))
    subset = subset_recall_at_k(scores, targets, [t.subset for t in queries], sorted(subset_ks)) if subset_ks else {}
    return EvalReport(recall, subset, protocol_averages(protocol, recall, subset), len(queries))


@torch.no_grad()
def teacher_ceiling(
    model, queries: Sequence[Triplet], gallery_payloads: np.ndarray, ks: Sequence[int] = (1, 5, 10, 50)
) -> EvalReport:
    """Recall when each query is composed by the teacher branch, which sees its own target.

    Not a deployable number: it bounds what the student can hope to reach
    with the same attribute features.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    gallery = torch.as_tensor(np.asarray(gallery_payloads), dtype=dtype)
    g = model.embed_gallery(gallery)
    ref = gallery[[t.reference_id for t in queries]]
    tgt = gallery[[t.target_id for t in queries]]
    text = torch.as_tensor(np.stack([t.text for t in queries]), dtype=dtype)
    _, composed = teacher_compose(
        model.attributes("image", tgt), model.attributes("image", ref), model.attributes("text", text), model.heads
    )
    scores = (unit_rows(pool(composed), TRAIN_EPS) @ g.T).numpy().astype(np.float64)
    recall = recall_at_k(scores, [t.target_id for t in queries], sorted(ks))
    return EvalReport(recall, {}, protocol_averages("synthetic", recall, {}), len(queries))


@dataclass
class MaskAlignment:
    score: float
    assignment: dict[int, int]  # latent attribute -> attribute slot
    auc: np.ndarray  # (K, A)


def mask_alignment_report(replace_masks: np.ndarray, changed: np.ndarray) -> MaskAlignment:
    """AUC agreement between replace-mask values and which latent attributes changed.

    ``replace_masks`` is ``(N, K)`` and ``changed`` a boolean ``(N, A)``.  Each
    slot/attribute pair is scored by the AUC of the slot's replace value as a
    detector of the attribute changing.  Slots are matched one-to-one to
    attributes maximizing total ``|AUC - 0.5|`` (informativeness, whatever the
    sign), and the mean AUC over matched pairs is returned.  Attributes that
    never (or always) change are left out.
    """
    replace_masks = np.asarray(replace_masks, dtype=np.float64)
    changed = np.asarray(changed, dtype=bool)
    K, A = replace_masks.shape[1], changed.shape[1]
    if K < A:
        raise ConfigError(f"need at least as many attribute slots ({K}) as latent attributes ({A})")
    usable = [a for a in range(A) if 0 < changed[:, a].sum() < len(changed)]
    auc = np.full((K, A), 0.5)
    for a in usable:
        for k in range(K):
            auc[k, a] = roc_auc_score(changed[:, a], replace_masks[:, k])
    if not usable:
        return MaskAlignment(0.5, {}, auc)
    rows, cols = linear_sum_assignment(np.abs(auc[:, usable] - 0.5), maximize=True)
    assignment = {usable[c]: int(r) for r, c in zip(rows, cols)}
    score = float(np.mean([auc[k, a] for a, k in assignment.items()]))
    return MaskAlignment(score, assignment, auc)
