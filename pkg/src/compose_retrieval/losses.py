"""Batch-based ranking losses, similarity distributions, and the joint objective.

Cosine similarities are computed strictly by default (``eps=0``): a zero-norm
row raises :class:`DegenerateInputError`.  Training passes ``eps=1e-8``, which
is added to every norm instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ConfigError

TRAIN_EPS = 1e-8


class DegenerateInputError(ValueError):
    """A cosine similarity was requested for a zero-norm vector."""


@dataclass
class SimilarityDistribution:
    probs: torch.Tensor  # (B,)
    owner_index: int
    kind: str  # "target_visual" or "matching_degree"


PART_NAMES = ("rank_stu", "rank_tea", "mask_tea", "ortho", "ckd", "kl")
WEIGHT_FOR = {"rank_tea": "lambda_", "mask_tea": "eta", "ortho": "mu", "ckd": "nu", "kl": "kappa"}


@dataclass
class LossBreakdown:
    rank_stu: torch.Tensor
    rank_tea: torch.Tensor
    mask_tea: torch.Tensor
    ortho: torch.Tensor
    ckd: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in (*PART_NAMES, "total")}


def unit_rows(x: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if eps == 0.0:
        if bool((norms == 0).any()):
            raise DegenerateInputError("cosine similarity of a zero-norm vector is undefined")
        return x / norms
    return x / (norms + eps)


def cosine_matrix(x: torch.Tensor, y: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """``(N, D) x (M, D) -> (N, M)`` pairwise cosine similarities."""
    return unit_rows(x, eps) @ unit_rows(y, eps).T


def attribute_similarity(A: torch.Tensor, B: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Sum over attribute rows of the row-wise cosine similarity of two ``(K, D)`` matrices."""
    if A.shape != B.shape:
        raise ValueError(f"attribute matrices disagree in shape: {tuple(A.shape)} vs {tuple(B.shape)}")
    return (unit_rows(A, eps) * unit_rows(B, eps)).sum()


def attribute_similarity_matrix(As: torch.Tensor, Bs: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """``(N, K, D) x (M, K, D) -> (N, M)``; entry ``[i, j]`` is ``attribute_similarity(As[i], Bs[j])``."""
    if As.shape[1:] != Bs.shape[1:]:
        raise ValueError("attribute matrices disagree in (K, D)")
    return torch.einsum("ikd,jkd->ij", unit_rows(As, eps), unit_rows(Bs, eps))


def pool(E: torch.Tensor) -> torch.Tensor:
    """Mean over attribute rows: ``(..., K, D) -> (..., D)``."""
    return E.mean(dim=-2)


def _check_tau(tau: float) -> None:
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")


def _diag_cross_entropy(logits: torch.Tensor) -> torch.Tensor:
    target = torch.arange(logits.shape[0], device=logits.device)
    return F.cross_entropy(logits, target)


def late_fusion_rank_loss(composed: torch.Tensor, targets: torch.Tensor, tau: float, eps: float = 0.0) -> torch.Tensor:
    """Softmax cross-entropy over the batch with summed per-attribute cosine logits."""
    _check_tau(tau)
    return _diag_cross_entropy(attribute_similarity_matrix(composed, targets, eps) / tau)


def early_fusion_rank_loss(
    composed_pooled: torch.Tensor, targets_pooled: torch.Tensor, tau: float, eps: float = 0.0
) -> torch.Tensor:
    """Softmax cross-entropy over the batch with cosine logits of mean-pooled features."""
    _check_tau(tau)
    return _diag_cross_entropy(cosine_matrix(composed_pooled, targets_pooled, eps) / tau)


def target_similarity_logits(targets: torch.Tensor, tau: float, eps: float = 0.0) -> torch.Tensor:
    _check_tau(tau)
    return attribute_similarity_matrix(targets, targets, eps) / tau


def matching_degree_logits(
    composed_pooled: torch.Tensor, targets_pooled: torch.Tensor, tau: float, eps: float = 0.0
) -> torch.Tensor:
    _check_tau(tau)
    return cosine_matrix(composed_pooled, targets_pooled, eps) / tau


def target_similarity_distribution(targets: torch.Tensor, i: int, tau: float, eps: float = 0.0) -> SimilarityDistribution:
    """Softmax over the batch of visual similarities between target ``i`` and every target."""
    _check_tau(tau)
    sims = attribute_similarity_matrix(targets[i : i + 1], targets, eps)[0]
    return SimilarityDistribution(torch.softmax(sims / tau, dim=0), i, "target_visual")


def matching_degree_distribution(
    query_pooled: torch.Tensor, targets_pooled: torch.Tensor, tau: float, owner_index: int = 0, eps: float = 0.0
) -> SimilarityDistribution:
    """Softmax over the batch of cosine matching degrees between one query and every target."""
    _check_tau(tau)
    sims = cosine_matrix(query_pooled.unsqueeze(0), targets_pooled, eps)[0]
    return SimilarityDistribution(torch.softmax(sims / tau, dim=0), owner_index, "matching_degree")


def kl_matching_regularization(p_t, p_c) -> torch.Tensor:
    """Mean over owners of ``KL(p_t || p_c)`` (natural log); ``p_t`` is treated as a constant.

    Accepts :class:`SimilarityDistribution` objects or probability tensors of
    shape ``(B,)`` (one owner) or ``(B, B)`` (one row per owner).
    """
    p_t = p_t.probs if isinstance(p_t, SimilarityDistribution) else p_t
    p_c = p_c.probs if isinstance(p_c, SimilarityDistribution) else p_c
    if p_t.shape != p_c.shape:
        raise ValueError("distributions differ in shape")
    p_t = p_t.detach()
    terms = torch.where(p_t > 0, p_t * (torch.log(p_t) - torch.log(p_c)), torch.zeros_like(p_t))
    return terms.sum(dim=-1).mean()


def kl_from_logits(target_logits: torch.Tensor, query_logits: torch.Tensor) -> torch.Tensor:
    """Same quantity as :func:`kl_matching_regularization`, computed stably from row logits."""
    log_pt = torch.log_softmax(target_logits.detach(), dim=-1)
    log_pc = torch.log_softmax(query_logits, dim=-1)
    return (log_pt.exp() * (log_pt - log_pc)).sum(dim=-1).mean()


def total_objective(parts: dict[str, torch.Tensor], weights: dict[str, float]) -> LossBreakdown:
    """Weighted sum of the six terms.  A zero weight drops its term from the graph."""
    for name, w in weights.items():
        if w < 0:
            raise ConfigError(f"loss weight {name} must be nonnegative")
    total = parts["rank_stu"]
    for name, wname in WEIGHT_FOR.items():
        w = weights.get(wname, 0.0)
        if w != 0.0:
            total = total + w * parts[name]
    return LossBreakdown(**{n: parts[n] for n in PART_NAMES}, total=total)
