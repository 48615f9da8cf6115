"""Optimization of the joint objective: steps, epochs, LR schedule, checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .attributes import orthogonal_regularization
from .composition import composition_distillation_loss, teacher_compose, teacher_mask_regularization
from .config import ConfigError, ExperimentConfig, ModelConfig, TrainConfig, fingerprint
from .data import Triplet
from .losses import (
    TRAIN_EPS,
    LossBreakdown,
    early_fusion_rank_loss,
    kl_from_logits,
    late_fusion_rank_loss,
    matching_degree_logits,
    pool,
    target_similarity_logits,
    total_objective,
)
from .model import TEACHER_PREFIX, ComposedRetrievalModel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "compose-retrieval-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TripletBatch:
    reference: torch.Tensor  # (B, image_dim)
    text: torch.Tensor  # (B, text_dim)
    target: torch.Tensor  # (B, image_dim)

    @classmethod
    def from_triplets(cls, triplets: Sequence[Triplet], gallery: np.ndarray, dtype=torch.float32) -> "TripletBatch":
        gallery = np.asarray(gallery)
        return cls(
            torch.as_tensor(gallery[[t.reference_id for t in triplets]], dtype=dtype),
            torch.as_tensor(np.stack([t.text for t in triplets]), dtype=dtype),
            torch.as_tensor(gallery[[t.target_id for t in triplets]], dtype=dtype),
        )

    def __len__(self) -> int:
        return self.reference.shape[0]


@dataclass
class TripletDataset:
    """Triplets plus the image payloads their ids index into.

    Payloads are converted once to a tensor so batches are cheap gathers.
    """

    triplets: list[Triplet]
    gallery: np.ndarray
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        self._gallery = torch.as_tensor(np.asarray(self.gallery), dtype=self.dtype)
        self._text = torch.as_tensor(np.stack([t.text for t in self.triplets]), dtype=self.dtype) if self.triplets else None
        self._ref = torch.as_tensor([t.reference_id for t in self.triplets], dtype=torch.long)
        self._tgt = torch.as_tensor([t.target_id for t in self.triplets], dtype=torch.long)

    def __len__(self) -> int:
        return len(self.triplets)

    def batch(self, idx: torch.Tensor) -> TripletBatch:
        return TripletBatch(self._gallery[self._ref[idx]], self._text[idx], self._gallery[self._tgt[idx]])


@dataclass
class TrainLogRecord:
    step: int
    epoch: int
    losses: dict[str, float]
    lrs: dict[str, float]
    wall_clock: float

    def to_json(self) -> str:
        return json.dumps(
            {"step": self.step, "epoch": self.epoch, **self.losses, "lrs": self.lrs, "wall_clock": self.wall_clock}
        )


@dataclass
class TrainState:
    config: ExperimentConfig
    model: ComposedRetrievalModel
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    epoch: int = 0
    step: int = 0
    history: list[TrainLogRecord] = field(default_factory=list)


def build_optimizer(model: ComposedRetrievalModel, cfg: TrainConfig) -> torch.optim.AdamW:
    groups = [{"params": model.head_parameters(), "lr": cfg.base_lr, "name": "head", "base_lr": cfg.base_lr}]
    if cfg.freeze_backbone:
        for p in model.backbone_parameters():
            p.requires_grad_(False)
    else:
        groups.insert(
            0,
            {"params": model.backbone_parameters(), "lr": cfg.backbone_lr, "name": "backbone", "base_lr": cfg.backbone_lr},
        )
    return torch.optim.AdamW(groups, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)


def init_state(config: ExperimentConfig, dtype: torch.dtype = torch.float32) -> TrainState:
    config = config.resolve()
    model = ComposedRetrievalModel(config.model).to(dtype)
    optimizer = build_optimizer(model, config.train)
    generator = torch.Generator().manual_seed(config.train.seed)
    return TrainState(config, model, optimizer, generator)


def compute_losses(model: ComposedRetrievalModel, batch: TripletBatch, cfg: TrainConfig, stop_gradient: bool = True) -> LossBreakdown:
    """Forward both branches and assemble every term of the joint objective.

    Terms whose weight is zero are still evaluated for logging but under
    ``no_grad``, so they contribute nothing to any gradient.
    """
    weights = cfg.loss_weights()
    tau = cfg.tau
    need_teacher = any(weights[w] > 0 for w in ("lambda_", "eta", "nu"))
    out = model(batch.reference, batch.text, batch.target, teacher=need_teacher)

    psi_c = pool(out.student_composed)
    psi_t = pool(out.E_t)
    parts = {"rank_stu": early_fusion_rank_loss(psi_c, psi_t, tau, TRAIN_EPS)}

    def term(weight: str, fn: Callable[[], torch.Tensor]) -> torch.Tensor:
        if weights[weight] > 0:
            return fn()
        with torch.no_grad():
            return fn().detach()

    if not need_teacher:
        with torch.no_grad():
            out.teacher_masks, out.teacher_composed = teacher_compose(out.E_t, out.E_r, out.E_m, model.heads)
    parts["rank_tea"] = term("lambda_", lambda: late_fusion_rank_loss(out.teacher_composed, out.E_t, tau, TRAIN_EPS))
    parts["mask_tea"] = term("eta", lambda: teacher_mask_regularization(out.teacher_masks))
    parts["ortho"] = term("mu", lambda: orthogonal_regularization(out.E_r, out.E_m, out.E_t))
    parts["ckd"] = term("nu", lambda: composition_distillation_loss(out.student_masks, out.teacher_masks, stop_gradient))
    parts["kl"] = term(
        "kappa",
        lambda: kl_from_logits(
            target_similarity_logits(out.E_t, tau, TRAIN_EPS), matching_degree_logits(psi_c, psi_t, tau, TRAIN_EPS)
        ),
    )
    return total_objective(parts, weights)


def _set_lrs(state: TrainState) -> dict[str, float]:
    scale = state.config.train.lr_scale(state.epoch)
    lrs = {}
    for group in state.optimizer.param_groups:
        group["lr"] = group["base_lr"] * scale
        lrs[group["name"]] = group["lr"]
    return lrs


def train_step(state: TrainState, batch: TripletBatch) -> tuple[TrainState, TrainLogRecord]:
    """One AdamW update on ``batch``; mutates and returns ``state``."""
    cfg = state.config.train
    if len(batch) != cfg.batch_size:
        raise ValueError(f"batch has {len(batch)} triplets, config expects {cfg.batch_size}")
    lrs = _set_lrs(state)
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    losses = compute_losses(state.model, batch, cfg, state.config.model.stop_gradient_distillation)
    values = losses.as_floats()
    bad = [name for name, v in values.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDivergedError(f"non-finite loss at step {state.step}: {', '.join(bad)} = {[values[b] for b in bad]}")
    losses.total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.step += 1
    record = TrainLogRecord(state.step, state.epoch, values, lrs, time.time())
    state.history.append(record)
    return state, record


def run_training(
    config: ExperimentConfig,
    dataset: TripletDataset,
    checkpoint_dir: str | Path | None = None,
    state: TrainState | None = None,
    log_sink: Callable[[TrainLogRecord], None] | None = None,
    stop_after_epoch: int | None = None,
) -> TrainState:
    """Epoch loop with step-decay learning rates and a checkpoint after every epoch.

    Pass a ``state`` restored by :func:`load_checkpoint` to resume.
    ``stop_after_epoch`` ends the run early (used to simulate interruption).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    state = state if state is not None else init_state(config, dataset.dtype)
    cfg = state.config.train
    n_batches = len(dataset) // cfg.batch_size
    if n_batches == 0 and cfg.epochs > state.epoch:
        raise ValueError(f"dataset of {len(dataset)} triplets is smaller than one batch of {cfg.batch_size}")
    while state.epoch < cfg.epochs:
        order = torch.randperm(len(dataset), generator=state.generator)
        for b in range(n_batches):
            _, record = train_step(state, dataset.batch(order[b * cfg.batch_size : (b + 1) * cfg.batch_size]))
            if log_sink is not None:
                log_sink(record)
        log.info("epoch %d done: total=%.4f", state.epoch, state.history[-1].losses["total"] if state.history else float("nan"))
        state.epoch += 1
        if checkpoint_dir is not None:
            save_checkpoint(state, Path(checkpoint_dir) / f"epoch_{state.epoch:03d}.pt")
            save_checkpoint(state, Path(checkpoint_dir) / "last.pt")
        if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
            break
    return state


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Atomic write: a failure leaves any previous file at ``path`` intact."""
    path = Path(path)
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "fingerprint": fingerprint(state.config.model),
        "config": state.config.to_dict(),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "rng": state.generator.get_state(),
        "dtype": str(next(state.model.parameters()).dtype),
    }
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(blob, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc


def _read(path: str | Path) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # the unpickler raises a grab bag of types on corrupt input
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')} (expected {CHECKPOINT_VERSION})")
    return blob


def load_checkpoint(
    path: str | Path, expected: ExperimentConfig | None = None, evaluate_only: bool = False
) -> TrainState:
    """Restore a :class:`TrainState`.

    The stored fingerprint must match the stored model config (and
    ``expected``, when given).  With ``evaluate_only`` the teacher heads may be
    absent from the file; the optimizer state is not restored.
    """
    blob = _read(path)
    config = ExperimentConfig.from_dict(blob["config"])
    fp = fingerprint(config.model)
    if blob["fingerprint"] != fp:
        raise CheckpointError(f"{path}: config fingerprint mismatch (file says {blob['fingerprint'][:12]}, config hashes to {fp[:12]})")
    if expected is not None and fingerprint(expected.resolve().model) != fp:
        raise CheckpointError(f"{path}: checkpoint was trained with a different model configuration")
    dtype = getattr(torch, blob.get("dtype", "torch.float32").split(".")[-1])
    state = init_state(config, dtype)
    if evaluate_only:
        missing, unexpected = state.model.load_state_dict(blob["model"], strict=False)
        bad = [k for k in missing if not k.startswith(TEACHER_PREFIX)] + list(unexpected)
        if bad:
            raise CheckpointError(f"{path}: parameter mismatch {bad[:5]}")
        state.model.eval()
    else:
        if blob.get("optimizer") is None:
            raise CheckpointError(f"{path}: no optimizer state (stripped checkpoint); load it with evaluate_only=True")
        try:
            state.model.load_state_dict(blob["model"])
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: parameter mismatch ({str(exc).splitlines()[0]})") from exc
        state.optimizer.load_state_dict(blob["optimizer"])
    state.epoch, state.step = blob["epoch"], blob["step"]
    state.generator.set_state(blob["rng"])
    return state


def strip_teacher(src: str | Path, dst: str | Path) -> None:
    """Write a copy of a checkpoint without teacher heads or optimizer state (deployment form)."""
    blob = _read(src)
    blob = copy.copy(blob)
    blob["model"] = {k: v for k, v in blob["model"].items() if not k.startswith(TEACHER_PREFIX)}
    blob["optimizer"] = None
    torch.save(blob, dst)
