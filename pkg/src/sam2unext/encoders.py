"""Frozen detail and semantic encoders.

``HierEncoder`` is a shape-faithful stand-in for the SAM2 Hiera trunk: a
stride-4 patchify stem followed by four stages of per-location MLP blocks,
stride-2 patch merging between stages, and a trainable bottleneck adapter in
front of every block. ``PlainEncoder`` stands in for DINOv2: a patchify
projection and residual per-location MLP blocks, all frozen.

Backbone weights come from a seeded RNG; only the adapters learn.
"""

from __future__ import annotations

import logging
from pathlib import Path

import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator
from torch import nn

from . import nn_core
from .errors import CheckpointError, ConfigurationError
from .nn_core import Conv, activation

log = logging.getLogger(__name__)

STAGE_STRIDES = (4, 8, 16, 32)
HIERA_L_CHANNELS = (144, 288, 576, 1152)
DINOV2_L_DIM = 1024

# ImageNet statistics, applied to both branches
PIXEL_MEAN = (0.485, 0.456, 0.406)
PIXEL_STD = (0.229, 0.224, 0.225)


class HierEncoderSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    stage_channels: tuple[int, int, int, int] = HIERA_L_CHANNELS
    blocks_per_stage: int = Field(2, ge=1)
    adapter_bottleneck: int = Field(32, ge=1)
    mlp_ratio: float = Field(1.0, gt=0)
    backbone_frozen: bool = True

    @field_validator("stage_channels")
    @classmethod
    def _positive(cls, v):
        if any(c < 1 for c in v):
            raise ValueError(f"stage channels must be positive, got {v}")
        return v

    @property
    def stage_strides(self) -> tuple[int, ...]:
        return STAGE_STRIDES

    @classmethod
    def preset(cls, name: str, **overrides) -> "HierEncoderSpec":
        if name == "hiera-l-shape":
            return cls(stage_channels=HIERA_L_CHANNELS, **overrides)
        raise ConfigurationError(f"unknown hierarchical encoder preset {name!r}")


class PlainEncoderSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    embed_dim: int = Field(DINOV2_L_DIM, ge=1)
    patch_size: int = Field(14, ge=1)
    depth: int = Field(2, ge=1)
    mlp_ratio: float = Field(1.0, gt=0)
    frozen: bool = True

    @field_validator("frozen")
    @classmethod
    def _always_frozen(cls, v):
        if not v:
            raise ValueError("the plain encoder is always frozen")
        return v

    @classmethod
    def preset(cls, name: str, **overrides) -> "PlainEncoderSpec":
        if name == "dinov2-l-shape":
            return cls(embed_dim=DINOV2_L_DIM, **overrides)
        raise ConfigurationError(f"unknown plain encoder preset {name!r}")


def check_divisible(h: int, w: int, divisor: int, what: str) -> None:
    if h % divisor or w % divisor:
        raise ConfigurationError(f"{what} resolution {h}x{w} must be divisible by {divisor}")


class Adapter(nn.Module):
    """Residual bottleneck MLP applied at every spatial location.

    ``out = x + gelu(up(gelu(down(x))))``. ``up`` starts at zero so the
    adapted encoder reproduces the frozen one before training.
    """

    def __init__(self, channels: int, bottleneck: int, generator: torch.Generator):
        super().__init__()
        self.down = Conv(channels, bottleneck, 1, generator=generator)
        self.up = Conv(bottleneck, channels, 1, generator=generator, zero=True)

    @property
    def channels(self) -> int:
        return self.down.c_in

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ConfigurationError(
                f"adapter expects {self.channels} channels, got input of shape {tuple(x.shape)}"
            )
        return x + activation(self.up(activation(self.down(x), "gelu")), "gelu")


def adapter_forward(x: torch.Tensor, adapter: Adapter) -> torch.Tensor:
    return adapter(x)


class MLPBlock(nn.Module):
    """Frozen residual per-location MLP: ``x + fc2(gelu(fc1(x)))``."""

    def __init__(self, channels: int, ratio: float, generator: torch.Generator, trainable: bool):
        super().__init__()
        hidden = max(1, int(round(channels * ratio)))
        self.fc1 = Conv(channels, hidden, 1, generator=generator, trainable=trainable)
        # small residual branch keeps activations bounded through deep frozen stacks
        self.fc2 = Conv(hidden, channels, 1, generator=generator, trainable=trainable, gain=0.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc2(activation(self.fc1(x), "gelu"))


class HierStage(nn.Module):
    def __init__(self, index: int, c_in: int, c_out: int, spec: HierEncoderSpec, generator: torch.Generator):
        super().__init__()
        trainable = not spec.backbone_frozen
        if index == 1:
            self.stem = Conv(3, c_out, 4, stride=4, generator=generator, trainable=trainable)
        else:
            self.down = Conv(c_in, c_out, 2, stride=2, generator=generator, trainable=trainable, gain=1.0)
        for m in range(1, spec.blocks_per_stage + 1):
            self.add_module(f"block{m}", MLPBlock(c_out, spec.mlp_ratio, generator, trainable))
        self.n_blocks = spec.blocks_per_stage


class HierEncoder(nn.Module):
    """Four-stage hierarchical encoder with adapters before every block.

    Parameter paths: ``stage{N}.block{M}.*`` for the frozen trunk,
    ``adapter{N}_{M}.{down,up}.{w,b}`` for the adapters.
    """

    prefix = "hier"

    def __init__(self, spec: HierEncoderSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        gen = nn_core.seeded_generator(seed)
        c_prev = 3
        for n, c in enumerate(spec.stage_channels, start=1):
            self.add_module(f"stage{n}", HierStage(n, c_prev, c, spec, gen))
            c_prev = c
        # adapters get their own stream so trunk weights do not depend on bottleneck size
        agen = nn_core.seeded_generator(seed + 7919)
        for n, c in enumerate(spec.stage_channels, start=1):
            for m in range(1, spec.blocks_per_stage + 1):
                self.add_module(f"adapter{n}_{m}", Adapter(c, spec.adapter_bottleneck, agen))

    def adapters(self) -> list[Adapter]:
        return [m for m in self.modules() if isinstance(m, Adapter)]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ConfigurationError(f"hierarchical encoder expects (n, 3, h, w), got {tuple(x.shape)}")
        check_divisible(x.shape[2], x.shape[3], 32, "high")
        feats = []
        for n in range(1, 5):
            stage: HierStage = getattr(self, f"stage{n}")
            x = stage.stem(x) if n == 1 else stage.down(x)
            for m in range(1, stage.n_blocks + 1):
                x = getattr(self, f"adapter{n}_{m}")(x)
                x = getattr(stage, f"block{m}")(x)
            feats.append(x)
        return feats


def hier_encode(x: torch.Tensor, encoder: HierEncoder) -> list[torch.Tensor]:
    return encoder(x)


class PlainEncoder(nn.Module):
    """Single-scale frozen encoder; output grid is ``input / patch_size``."""

    prefix = "plain"

    def __init__(self, spec: PlainEncoderSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        gen = nn_core.seeded_generator(seed + 104729)
        self.patch = Conv(3, spec.embed_dim, spec.patch_size, stride=spec.patch_size,
                          generator=gen, trainable=False)
        for k in range(1, spec.depth + 1):
            self.add_module(f"block{k}", MLPBlock(spec.embed_dim, spec.mlp_ratio, gen, trainable=False))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ConfigurationError(f"plain encoder expects (n, 3, h, w), got {tuple(x.shape)}")
        check_divisible(x.shape[2], x.shape[3], self.spec.patch_size, "low")
        x = self.patch(x)
        for k in range(1, self.spec.depth + 1):
            x = getattr(self, f"block{k}")(x)
        return x


def plain_encode(x: torch.Tensor, encoder: PlainEncoder) -> torch.Tensor:
    return encoder(x)


def encoder_state(encoder: nn.Module) -> dict[str, torch.Tensor]:
    return {f"{encoder.prefix}.{k}": v for k, v in encoder.state_dict().items()}


def save_encoder_weights(path: str | Path, encoder: nn.Module) -> None:
    from .checkpoint import write_tensors

    write_tensors(path, encoder_state(encoder), meta={"kind": "encoder", "prefix": encoder.prefix})


def load_encoder_weights(path: str | Path, encoder: nn.Module | HierEncoderSpec | PlainEncoderSpec):
    """Populate an encoder from a checkpoint file by parameter path.

    Accepts either a built encoder or a spec (a fresh encoder is built).
    Tensors outside the encoder's prefix are ignored; unknown names under the
    prefix are reported. The encoder is only touched once every tensor has
    been validated.

    Returns ``(encoder, extra_names)``.
    """
    from .checkpoint import read_tensors

    if isinstance(encoder, HierEncoderSpec):
        encoder = HierEncoder(encoder)
    elif isinstance(encoder, PlainEncoderSpec):
        encoder = PlainEncoder(encoder)
    tensors, _ = read_tensors(path)
    prefix = encoder.prefix + "."
    own = encoder_state(encoder)
    available = {k: v for k, v in tensors.items() if k.startswith(prefix)}

    missing = [k for k in own if k not in available]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    mismatched = [
        f"{k}: file {tuple(available[k].shape)} vs encoder {tuple(v.shape)}"
        for k, v in own.items()
        if tuple(available[k].shape) != tuple(v.shape)
    ]
    if mismatched:
        raise CheckpointError(f"{path}: shape mismatch: " + "; ".join(mismatched))
    extra = sorted(k for k in available if k not in own)
    if extra:
        log.warning("%s: ignoring %d unknown tensors under %r: %s", path, len(extra), prefix, extra)

    with torch.no_grad():
        for k, v in encoder.state_dict(keep_vars=True).items():
            v.copy_(available[prefix + k].to(v.dtype))
    return encoder, extra


def pyramid_shapes(h: int, w: int, channels) -> list[tuple[int, int, int]]:
    return [(c, h // s, w // s) for c, s in zip(channels, STAGE_STRIDES)]


def count_parameters(module: nn.Module, trainable: bool | None = None) -> int:
    return sum(p.numel() for p in module.parameters() if trainable is None or p.requires_grad == trainable)

