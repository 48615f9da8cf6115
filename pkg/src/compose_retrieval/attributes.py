"""Unified attribute features: condition-masked global rows, token-pooled local rows.

Every function accepts arbitrary leading batch dimensions.  An attribute
matrix has shape ``(..., K, D)`` with the ``P`` global rows first.
"""

from __future__ import annotations

from typing import Callable

import torch
from torch import nn

from .backbone import EncodedFeatures
from .config import ConfigError, ModelConfig


def extract_global_attributes(
    global_: torch.Tensor,
    masks: torch.Tensor,
    pre_proj: Callable[[torch.Tensor], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Row ``i`` of the result is ``pre_proj(global_) * masks[i]``; shape ``(..., P, D)``."""
    f = global_ if pre_proj is None else pre_proj(global_)
    if f.shape[-1] != masks.shape[-1]:
        raise ConfigError(f"global feature width {f.shape[-1]} != condition mask width {masks.shape[-1]}")
    return f.unsqueeze(-2) * masks


def extract_local_attributes(
    tokens: torch.Tensor,
    projection: Callable[[torch.Tensor], torch.Tensor],
    agg_weight: torch.Tensor,
    agg_bias: torch.Tensor,
    return_weights: bool = False,
):
    """Sigmoid-weighted (unnormalized) token sums, one per aggregator.

    ``agg_weight`` is ``(Q, D)`` and ``agg_bias`` ``(Q,)``: the per-token 1x1
    convolutions.  Returns ``(..., Q, D)``, plus the ``(..., Q, L)`` pooling
    weights when ``return_weights`` is set.
    """
    if tokens.shape[-2] == 0:
        raise ValueError("cannot pool an empty token sequence (L = 0)")
    projected = projection(tokens)  # (..., L, D)
    if projected.shape[-1] != agg_weight.shape[-1]:
        raise ConfigError(f"projected token width {projected.shape[-1]} != aggregator width {agg_weight.shape[-1]}")
    weights = torch.sigmoid(projected @ agg_weight.T + agg_bias).transpose(-1, -2)  # (..., Q, L)
    rows = weights @ projected
    return (rows, weights) if return_weights else rows


def orthogonal_regularization(*matrices: torch.Tensor) -> torch.Tensor:
    """Sum over ``matrices`` of ``||E E^T - I||_F^2``.

    Batched inputs ``(B, K, D)`` are averaged over the batch, so the result is
    the per-triplet penalty.
    """
    if not matrices:
        raise ValueError("need at least one attribute matrix")
    total = 0.0
    for E in matrices:
        if E.dim() < 2:
            raise ValueError("attribute matrices must be at least 2-D")
        K = E.shape[-2]
        gram = E @ E.transpose(-1, -2)
        eye = torch.eye(K, dtype=E.dtype, device=E.device)
        per = ((gram - eye) ** 2).sum(dim=(-1, -2))
        total = total + per.mean()
    return total


class AttributeExtractor(nn.Module):
    """Shared condition masks and token aggregators with per-modality projections."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.P, self.Q, self.D = cfg.P, cfg.Q, cfg.D
        gen = torch.Generator().manual_seed(cfg.init_seed)
        self.condition_masks = nn.Parameter(1.0 + 0.1 * torch.randn(cfg.P, cfg.D, generator=gen))
        self.pre_proj = nn.ModuleDict()
        self.token_proj = nn.ModuleDict()
        for kind, enc in (("image", cfg.image_encoder), ("text", cfg.text_encoder)):
            self.pre_proj[kind] = nn.Identity() if enc.global_dim == cfg.D else _linear(enc.global_dim, cfg.D, gen)
            self.token_proj[kind] = _linear(enc.token_dim, cfg.D, gen)
        self.aggregators = _linear(cfg.D, cfg.Q, gen)

    @property
    def K(self) -> int:
        return self.P + self.Q

    def global_rows(self, kind: str, feats: EncodedFeatures) -> torch.Tensor:
        return extract_global_attributes(feats.global_, self.condition_masks, self.pre_proj[kind])

    def local_rows(self, kind: str, feats: EncodedFeatures, return_weights: bool = False):
        return extract_local_attributes(
            feats.tokens, self.token_proj[kind], self.aggregators.weight, self.aggregators.bias, return_weights
        )

    def forward(self, kind: str, feats: EncodedFeatures) -> torch.Tensor:
        if kind not in self.pre_proj:
            raise ConfigError(f"unknown input kind {kind!r}")
        return torch.cat([self.global_rows(kind, feats), self.local_rows(kind, feats)], dim=-2)


def _linear(n_in: int, n_out: int, gen: torch.Generator) -> nn.Linear:
    lin = nn.Linear(n_in, n_out)
    bound = n_in ** -0.5
    with torch.no_grad():
        lin.weight.uniform_(-bound, bound, generator=gen)
        lin.bias.uniform_(-bound, bound, generator=gen)
    return lin
