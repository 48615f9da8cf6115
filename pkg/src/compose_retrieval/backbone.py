"""Pluggable two-tower encoder producing a global vector and a token matrix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Protocol

import numpy as np
import torch
from torch import nn

from .config import ACTIVATIONS, ConfigError, EncoderConfig

KINDS = ("image", "text")


@dataclass(frozen=True)
class RawInput:
    """One image or text payload.  ``payload`` is a flat numeric vector."""

    kind: str
    payload: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown input kind {self.kind!r}")
        object.__setattr__(self, "payload", np.asarray(self.payload, dtype=np.float64).reshape(-1))

    @property
    def length(self) -> int:
        return self.payload.shape[0]


class EncodedFeatures(NamedTuple):
    global_: torch.Tensor  # (..., D_raw)
    tokens: torch.Tensor  # (..., L, D')


def activation(name: str) -> nn.Module:
    if name not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {name!r}")
    return {"relu": nn.ReLU, "gelu": nn.GELU, "tanh": nn.Tanh}[name]()


class Encoder(nn.Module):
    """affine -> nonlinearity -> affine gives L tokens; affine on the token mean gives the global vector."""

    def __init__(self, cfg: EncoderConfig, act: str = "relu"):
        super().__init__()
        if cfg.input_size is None or cfg.input_size < 1:
            raise ConfigError("encoder input_size must be a positive integer")
        self.cfg = cfg
        self.hidden = nn.Linear(cfg.input_size, cfg.hidden)
        self.act = activation(act)
        self.to_tokens = nn.Linear(cfg.hidden, cfg.num_tokens * cfg.token_dim)
        self.to_global = nn.Linear(cfg.token_dim, cfg.global_dim)
        gen = torch.Generator().manual_seed(cfg.seed)
        for lin in (self.hidden, self.to_tokens, self.to_global):
            bound = 1.0 / np.sqrt(lin.in_features)
            with torch.no_grad():
                lin.weight.copy_(torch.empty_like(lin.weight).uniform_(-bound, bound, generator=gen))
                lin.bias.copy_(torch.empty_like(lin.bias).uniform_(-bound, bound, generator=gen))

    def forward(self, payload: torch.Tensor) -> EncodedFeatures:
        if payload.shape[-1] != self.cfg.input_size:
            raise ConfigError(
                f"payload width {payload.shape[-1]} does not match encoder input_size {self.cfg.input_size}"
            )
        h = self.act(self.hidden(payload))
        tokens = self.to_tokens(h).unflatten(-1, (self.cfg.num_tokens, self.cfg.token_dim))
        return EncodedFeatures(self.to_global(tokens.mean(dim=-2)), tokens)


class BackboneAdapter(Protocol):
    """Anything that maps (kind, payload batch) to :class:`EncodedFeatures`.

    Wrap an external pretrained vision-language model behind this to replace
    the desk-scale :class:`Backbone`.
    """

    def encode(self, kind: str, payload: torch.Tensor) -> EncodedFeatures: ...


class Backbone(nn.Module):
    """Separate image and text towers; no shared weights."""

    def __init__(self, image: EncoderConfig, text: EncoderConfig, act: str = "relu"):
        super().__init__()
        self.image = Encoder(image, act)
        self.text = Encoder(text, act)

    def encode(self, kind: str, payload: torch.Tensor) -> EncodedFeatures:
        if kind == "image":
            return self.image(payload)
        if kind == "text":
            return self.text(payload)
        raise ConfigError(f"unknown input kind {kind!r}")


def encode(inp: RawInput, backbone: BackboneAdapter, dtype: torch.dtype = torch.float32) -> EncodedFeatures:
    """Encode a single :class:`RawInput` (no batch dimension in the result)."""
    payload = torch.as_tensor(inp.payload, dtype=dtype)
    return backbone.encode(inp.kind, payload)
