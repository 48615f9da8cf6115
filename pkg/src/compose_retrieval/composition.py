"""Keep-and-replace query composition: target-free student, target-aware teacher."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import activation
from .config import ModelConfig


@dataclass
class MaskPair:
    """Per-attribute keep/replace gates, each of shape ``(..., K)`` with values in [0, 1]."""

    keep: torch.Tensor
    replace: torch.Tensor
    branch: str  # "student" or "teacher"

    def detach(self) -> "MaskPair":
        return MaskPair(self.keep.detach(), self.replace.detach(), self.branch)


class RowHead(nn.Module):
    """Shared per-row MLP ``2D -> hidden -> 1`` applied to each of the K concatenated rows.

    The output layer starts at zero so every initial gate is exactly 0.5.
    """

    def __init__(self, D: int, hidden: int, act: str = "relu", generator: torch.Generator | None = None):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(2 * D, hidden), activation(act), nn.Linear(hidden, 1))
        bound = (2 * D) ** -0.5
        with torch.no_grad():
            self.net[0].weight.uniform_(-bound, bound, generator=generator)
            self.net[0].bias.uniform_(-bound, bound, generator=generator)
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([a, b], dim=-1)).squeeze(-1)


class CompositionHeads(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        hidden = cfg.head_hidden or cfg.D
        gen = torch.Generator().manual_seed(cfg.init_seed + 7)
        self.student = RowHead(cfg.D, hidden, cfg.activation, gen)
        self.teacher_keep = RowHead(cfg.D, hidden, cfg.activation, gen)
        self.teacher_replace = RowHead(cfg.D, hidden, cfg.activation, gen)


def _check(*mats: torch.Tensor) -> None:
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise ValueError(f"attribute matrices disagree in shape: {tuple(shape)} vs {tuple(m.shape)}")


def blend(keep: torch.Tensor, replace: torch.Tensor, E_r: torch.Tensor, E_m: torch.Tensor) -> torch.Tensor:
    """Row-wise ``keep[k] * E_r[k] + replace[k] * E_m[k]``."""
    return keep.unsqueeze(-1) * E_r + replace.unsqueeze(-1) * E_m


def student_compose(E_r: torch.Tensor, E_m: torch.Tensor, heads: CompositionHeads) -> tuple[MaskPair, torch.Tensor]:
    _check(E_r, E_m)
    keep = torch.sigmoid(heads.student(E_r, E_m))
    replace = 1.0 - keep
    return MaskPair(keep, replace, "student"), blend(keep, replace, E_r, E_m)


def teacher_compose(
    E_t: torch.Tensor, E_r: torch.Tensor, E_m: torch.Tensor, heads: CompositionHeads
) -> tuple[MaskPair, torch.Tensor]:
    """Independent keep (from target vs. reference) and replace (from target vs. text) gates."""
    _check(E_t, E_r, E_m)
    keep = torch.sigmoid(heads.teacher_keep(E_t, E_r))
    replace = torch.sigmoid(heads.teacher_replace(E_t, E_m))
    return MaskPair(keep, replace, "teacher"), blend(keep, replace, E_r, E_m)


def teacher_mask_regularization(mask: MaskPair) -> torch.Tensor:
    """Mean squared gap between the replace gate and ``1 - keep``."""
    if mask.branch != "teacher":
        raise ValueError("mask regularization applies to teacher masks only")
    return ((mask.replace - (1.0 - mask.keep)) ** 2).mean()


def composition_distillation_loss(student: MaskPair, teacher: MaskPair, stop_gradient: bool = True) -> torch.Tensor:
    """MSE(keep) + MSE(replace) pulling the student gates toward the teacher's."""
    if student.branch != "student" or teacher.branch != "teacher":
        raise ValueError("expected (student, teacher) mask pairs")
    if student.keep.shape != teacher.keep.shape:
        raise ValueError("student and teacher masks differ in shape")
    if stop_gradient:
        teacher = teacher.detach()
    return ((teacher.keep - student.keep) ** 2).mean() + ((teacher.replace - student.replace) ** 2).mean()
