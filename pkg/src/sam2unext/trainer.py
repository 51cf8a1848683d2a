"""AdamW + cosine-decay training loop with checkpointing and a CSV step log."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from . import nn_core
from .checkpoint import read_tensors, write_tensors
from .data import Sample, augment, to_model_inputs
from .errors import CheckpointError, TrainingError
from .loss import LossBreakdown, structure_loss
from .metrics import MaskPair, miou
from .model import ModelConfig, SAM2UNeXt, build_model, predict
from .nn_core import ParamRegistry, resize_bilinear

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "wbce", "wiou", "total")


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr0: float = Field(2e-4, gt=0)
    epochs: int = Field(20, ge=1)
    batch: int = Field(1, ge=1)
    weight_decay: float = Field(1e-4, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = Field(0, ge=0)
    precision: str = "float32"
    recalibrate_bn: bool = True


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return max(0.0, lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


def decays(name: str, p: torch.Tensor) -> bool:
    """Weight decay applies to conv weights only, not biases or norm affine terms."""
    return p.dim() > 1


class AdamW:
    """Decoupled-weight-decay Adam over the trainable entries of a registry."""

    def __init__(self, registry: ParamRegistry, weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = registry.trainable()
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params}
        self.v = {n: torch.zeros_like(p) for n, p in self.params}

    @torch.no_grad()
    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingError(f"non-finite gradient in {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if self.weight_decay and decays(name, p):
                p.mul_(1.0 - lr * self.weight_decay)
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m / bc1, denom, value=-lr)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for n, _ in self.params:
            out[f"optim.m.{n}"] = self.m[n]
            out[f"optim.v.{n}"] = self.v[n]
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor], t: int) -> None:
        for n, p in self.params:
            for kind, store in (("m", self.m), ("v", self.v)):
                key = f"optim.{kind}.{n}"
                if key not in tensors:
                    raise CheckpointError(f"checkpoint lacks optimizer state {key}")
                store[n] = tensors[key].to(p.dtype).clone()
        self.t = t


def adamw_step(optimizer: AdamW, lr: float) -> None:
    optimizer.step(lr)


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    step: int
    model_config: dict
    train_config: dict
    version: int

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("optim.")}


def save_checkpoint(path: str | Path, model: SAM2UNeXt, optimizer: AdamW | None, step: int,
                    train_cfg: TrainConfig | None = None) -> None:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    meta = {
        "format": "sam2unext-checkpoint",
        "step": int(step),
        "optimizer_t": int(optimizer.t) if optimizer is not None else 0,
        "model_config": model.cfg.model_dump(mode="json"),
        "train_config": train_cfg.model_dump(mode="json") if train_cfg is not None else {},
    }
    write_tensors(path, tensors, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    from .checkpoint import FORMAT_VERSION

    tensors, meta = read_tensors(path)
    if meta.get("format") != "sam2unext-checkpoint":
        raise CheckpointError(f"{path} is not a model checkpoint")
    return Checkpoint(tensors, int(meta["step"]), meta["model_config"], meta.get("train_config", {}),
                      FORMAT_VERSION)


def restore_model(ckpt: Checkpoint, precision: str | None = None) -> SAM2UNeXt:
    cfg = ModelConfig.model_validate(ckpt.model_config)
    state = ckpt.model_state()
    dtype = next(iter(state.values())).dtype if precision is None else nn_core.resolve_dtype(precision)
    model = build_model(cfg, precision=dtype)
    own = model.state_dict()
    missing = sorted(set(own) - set(state))
    if missing:
        raise CheckpointError(f"checkpoint lacks model tensors {missing}")
    model.load_state_dict({k: state[k] for k in own})
    return model


# --------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: SAM2UNeXt
    optimizer: AdamW
    rows: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _batch_inputs(samples: list[Sample], cfg: ModelConfig, dtype):
    parts = [to_model_inputs(s, cfg, dtype) for s in samples]
    return tuple(torch.cat(xs, dim=0) for xs in zip(*parts))


def training_loss(model: SAM2UNeXt, high, low, gt) -> tuple[torch.Tensor, LossBreakdown]:
    logits = model(high, low if model.cfg.has_aux else None)
    logits = resize_bilinear(logits, gt.shape[2], gt.shape[3])
    return structure_loss(logits, gt)


def _format_row(row: dict) -> dict:
    return {k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()}


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: list[Sample],
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          max_steps: int | None = None) -> TrainResult:
    """Run (or continue) training.

    Sample order and flips derive from ``(seed, epoch)`` and ``(seed, step)``,
    so a resumed run replays exactly the steps an uninterrupted run would.
    ``max_steps`` stops early without changing the schedule.
    """
    if not dataset:
        raise ValueError("training needs at least one sample")
    dtype = nn_core.resolve_dtype(train_cfg.precision)
    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg, precision=dtype)
    registry = ParamRegistry(model)
    optimizer = AdamW(registry, train_cfg.weight_decay, train_cfg.betas, train_cfg.eps)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        state = ckpt.model_state()
        model.load_state_dict({k: state[k].to(v.dtype) for k, v in model.state_dict().items()})
        optimizer.load_state_tensors(ckpt.tensors, ckpt.step)
        start = ckpt.step

    n = len(dataset)
    steps_per_epoch = math.ceil(n / train_cfg.batch)
    total = train_cfg.epochs * steps_per_epoch
    stop = total if max_steps is None else min(total, start + max_steps)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        append = resume is not None and log_path.exists()
        log_fh = open(log_path, "a" if append else "w", newline="")
        writer = csv.DictWriter(log_fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        if not append:
            writer.writeheader()

    result = TrainResult(model, optimizer)
    model.train()
    order = None
    try:
        for step in range(start, stop):
            epoch, within = divmod(step, steps_per_epoch)
            if order is None or within == 0:
                order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
            idx = order[within * train_cfg.batch:(within + 1) * train_cfg.batch]
            rng = np.random.default_rng([train_cfg.seed, 1_000_003, step])
            batch = [augment(dataset[i], rng) for i in idx]
            high, low, gt = _batch_inputs(batch, model_cfg, dtype)

            lr = cosine_lr(step, total, train_cfg.lr0)
            loss, parts = training_loss(model, high, low, gt)
            if not all(math.isfinite(v) for v in (parts.total, parts.wbce, parts.wiou)):
                raise TrainingError(f"non-finite loss at step {step + 1}: {parts}")
            nn_core.backward(loss, registry)
            optimizer.step(lr)

            row = {"step": step + 1, "epoch": epoch + 1, "lr": lr,
                   "wbce": parts.wbce, "wiou": parts.wiou, "total": parts.total}
            result.rows.append(row)
            if writer is not None:
                writer.writerow(_format_row(row))
            if out is not None and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
                path = out / f"ckpt_{step + 1:06d}.bin"
                save_checkpoint(path, model, optimizer, step + 1, train_cfg)
                result.checkpoints.append(path)
    finally:
        if log_fh is not None:
            log_fh.close()
    if train_cfg.recalibrate_bn and stop == total:
        recalibrate_batch_norm(model, dataset, model_cfg, train_cfg.batch)
    if out is not None:
        path = out / "final.bin"
        save_checkpoint(path, model, optimizer, stop, train_cfg)
        result.checkpoints.append(path)
    return result


@torch.no_grad()
def recalibrate_batch_norm(model: SAM2UNeXt, samples: list[Sample], cfg: ModelConfig, batch: int) -> None:
    """Replace BatchNorm running statistics by the average batch statistics
    over the unaugmented samples, in chunks of ``batch``."""
    bns = [m for m in model.modules() if isinstance(m, nn_core.BatchNorm)]
    if not bns:
        return
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.train()
    for bn in bns:
        bn.running_mean.zero_()
        bn.running_var.fill_(1.0)
    try:
        for k, start in enumerate(range(0, len(samples), batch)):
            for bn in bns:
                bn.momentum = 1.0 / (k + 1)  # cumulative average of per-chunk statistics
            high, low, _ = _batch_inputs(samples[start:start + batch], cfg, dtype)
            model(high, low if cfg.has_aux else None)
    finally:
        for bn in bns:
            bn.momentum = nn_core.BN_MOMENTUM
        model.train(was_training)


def dataset_miou(model: SAM2UNeXt, samples: list[Sample], threshold: float = 0.5) -> float:
    """Mean per-image IoU of thresholded predictions at each sample's own size."""
    scores = [miou(MaskPair.from_arrays(predict(model, s.image), s.mask.astype(bool)), threshold)
              for s in samples]
    return float(np.mean(scores))


def trainable_changed(before: dict[str, torch.Tensor], model: nn.Module) -> tuple[list[str], list[str]]:
    """Split trainable parameter names into changed / unchanged relative to ``before``."""
    changed, same = [], []
    for name, p in model.named_parameters():
        if p.requires_grad:
            (same if torch.equal(before[name], p.detach()) else changed).append(name)
    return changed, same
