"""The composed-retrieval network: backbone, attribute extractor, composition heads."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .attributes import AttributeExtractor
from .backbone import Backbone
from .composition import CompositionHeads, MaskPair, student_compose, teacher_compose
from .config import ModelConfig
from .losses import TRAIN_EPS, pool, unit_rows

TEACHER_PREFIX = "heads.teacher_"


@dataclass
class ForwardOutput:
    E_r: torch.Tensor
    E_m: torch.Tensor
    E_t: torch.Tensor
    student_masks: MaskPair
    student_composed: torch.Tensor
    teacher_masks: MaskPair | None = None
    teacher_composed: torch.Tensor | None = None


class ComposedRetrievalModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone(cfg.image_encoder, cfg.text_encoder, cfg.activation)
        self.extractor = AttributeExtractor(cfg)
        self.heads = CompositionHeads(cfg)

    def attributes(self, kind: str, payload: torch.Tensor) -> torch.Tensor:
        return self.extractor(kind, self.backbone.encode(kind, payload))

    def forward(
        self, reference: torch.Tensor, text: torch.Tensor, target: torch.Tensor, teacher: bool = True
    ) -> ForwardOutput:
        E_r = self.attributes("image", reference)
        E_m = self.attributes("text", text)
        E_t = self.attributes("image", target)
        s_masks, s_comp = student_compose(E_r, E_m, self.heads)
        out = ForwardOutput(E_r, E_m, E_t, s_masks, s_comp)
        if teacher:
            out.teacher_masks, out.teacher_composed = teacher_compose(E_t, E_r, E_m, self.heads)
        return out

    # -- deployed (student) path -------------------------------------------

    @torch.no_grad()
    def embed_queries(self, reference: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        """Unit-norm mean-pooled student compositions, ``(N, D)``."""
        E_r = self.attributes("image", reference)
        E_m = self.attributes("text", text)
        _, composed = student_compose(E_r, E_m, self.heads)
        return unit_rows(pool(composed), TRAIN_EPS)

    @torch.no_grad()
    def embed_gallery(self, images: torch.Tensor) -> torch.Tensor:
        return unit_rows(pool(self.attributes("image", images)), TRAIN_EPS)

    @torch.no_grad()
    def masks(self, reference: torch.Tensor, text: torch.Tensor, target: torch.Tensor | None = None):
        """Student masks, plus teacher masks when a target is supplied."""
        E_r = self.attributes("image", reference)
        E_m = self.attributes("text", text)
        student, _ = student_compose(E_r, E_m, self.heads)
        if target is None:
            return student, None
        teacher, _ = teacher_compose(self.attributes("image", target), E_r, E_m, self.heads)
        return student, teacher

    def backbone_parameters(self):
        return list(self.backbone.parameters())

    def head_parameters(self):
        ids = {id(p) for p in self.backbone.parameters()}
        return [p for p in self.parameters() if id(p) not in ids]
