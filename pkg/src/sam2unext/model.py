"""Full dual-resolution segmentation network and inference helper."""

from __future__ import annotations

from pathlib import Path
from typing import Literal

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from torch import nn

from . import nn_core
from .encoders import (
    HierEncoder,
    HierEncoderSpec,
    PIXEL_MEAN,
    PIXEL_STD,
    PlainEncoder,
    PlainEncoderSpec,
    check_divisible,
)
from .errors import ConfigurationError
from .glue import DenseGlue, GlueConfig
from .nn_core import BatchNorm, Conv, activation, concat_channels, resize_bilinear

AuxMode = Literal["dinov2-shape", "conv-stand-in", "none"]


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    high_res: tuple[int, int] = (1024, 1024)
    low_res: tuple[int, int] = (448, 448)
    hier_spec: HierEncoderSpec = HierEncoderSpec()
    plain_spec: PlainEncoderSpec | None = PlainEncoderSpec()
    glue: GlueConfig = GlueConfig()
    decoder_channels: int = Field(128, ge=1)
    aux_mode: AuxMode = "dinov2-shape"
    seed: int = 0

    @model_validator(mode="after")
    def _consistent(self):
        check_divisible(*self.high_res, 32, "high")
        if tuple(self.glue.stage_channels) != tuple(self.hier_spec.stage_channels):
            raise ConfigurationError(
                f"glue stage_channels {self.glue.stage_channels} differ from encoder {self.hier_spec.stage_channels}"
            )
        if self.decoder_channels != self.glue.fused_channels:
            raise ConfigurationError(
                f"decoder_channels={self.decoder_channels} must equal glue fused_channels={self.glue.fused_channels}"
            )
        if self.aux_mode == "dinov2-shape":
            if self.plain_spec is None:
                raise ConfigurationError("aux_mode 'dinov2-shape' needs plain_spec")
            if self.plain_spec.embed_dim != self.glue.aux_dim:
                raise ConfigurationError(
                    f"plain encoder embed_dim={self.plain_spec.embed_dim} differs from glue aux_dim={self.glue.aux_dim}"
                )
            check_divisible(*self.low_res, self.plain_spec.patch_size, "low")
        elif self.aux_mode == "conv-stand-in":
            check_divisible(*self.low_res, 16, "low")
        return self

    @property
    def has_aux(self) -> bool:
        return self.aux_mode != "none"


def toy_config(high: int = 64, low: int = 28, aux_mode: AuxMode = "dinov2-shape", **kw) -> ModelConfig:
    """Desk-scale config: channels [4, 8, 16, 32], aux_dim 8, fused width 8."""
    channels = kw.pop("stage_channels", (4, 8, 16, 32))
    aux_dim = kw.pop("aux_dim", 8)
    fused = kw.pop("fused_channels", 8)
    try:
        return ModelConfig(
            high_res=(high, high),
            low_res=(low, low),
            hier_spec=HierEncoderSpec(stage_channels=channels, blocks_per_stage=kw.pop("blocks_per_stage", 1),
                                      adapter_bottleneck=kw.pop("adapter_bottleneck", 4)),
            plain_spec=PlainEncoderSpec(embed_dim=aux_dim, patch_size=kw.pop("patch_size", 14),
                                        depth=kw.pop("depth", 1)),
            glue=GlueConfig(aux_dim=aux_dim, stage_channels=channels, fused_channels=fused),
            decoder_channels=fused,
            aux_mode=aux_mode,
            **kw,
        )
    except ValidationError as exc:
        raise ConfigurationError("; ".join(e["msg"] for e in exc.errors())) from None


class DecoderBlock(nn.Module):
    """Two (3x3 conv, BatchNorm, ReLU) layers; spatial size is preserved.

    The convs carry no bias: BatchNorm subtracts the per-channel mean, so a
    bias there would have an identically zero gradient.
    """

    def __init__(self, c_in: int, c_out: int, generator: torch.Generator):
        super().__init__()
        self.conv1 = Conv(c_in, c_out, 3, pad=1, generator=generator, bias=False)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv(c_out, c_out, 3, pad=1, generator=generator, bias=False)
        self.bn2 = BatchNorm(c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = activation(self.bn1(self.conv1(x)), "relu")
        return activation(self.bn2(self.conv2(x)), "relu")


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return resize_bilinear(x, 2 * x.shape[2], 2 * x.shape[3])


class Decoder(nn.Module):
    """U-Net decoder over the fused pyramid plus one concat-free stage to stride 2."""

    def __init__(self, channels: int, seed: int = 0):
        super().__init__()
        self.channels = channels
        gen = nn_core.seeded_generator(seed + 32452843)
        self.block4 = DecoderBlock(channels, channels, gen)
        self.block3 = DecoderBlock(2 * channels, channels, gen)
        self.block2 = DecoderBlock(2 * channels, channels, gen)
        self.block1 = DecoderBlock(2 * channels, channels, gen)
        self.partial = DecoderBlock(channels, channels, gen)
        self.head = Conv(channels, 1, 1, generator=gen, gain=1.0)

    def forward(self, fused: list[torch.Tensor]) -> torch.Tensor:
        for i, f in enumerate(fused, start=1):
            if f.shape[1] != self.channels:
                raise ConfigurationError(f"decoder expects {self.channels} channels, stage {i} is {tuple(f.shape)}")
        d = self.block4(fused[3])
        for i in (3, 2, 1):
            d = getattr(self, f"block{i}")(concat_channels(upsample2x(d), fused[i - 1]))
        p = self.partial(upsample2x(d))
        return self.head(p)


class ConvAuxEncoder(nn.Module):
    """Trainable strided CNN giving a single (n, aux_dim, h/16, w/16) map."""

    prefix = "aux"

    def __init__(self, aux_dim: int, seed: int = 0):
        super().__init__()
        gen = nn_core.seeded_generator(seed + 49979687)
        widths = [3] + [max(1, aux_dim // 8), max(1, aux_dim // 4), max(1, aux_dim // 2), aux_dim]
        for i in range(4):
            self.add_module(f"conv{i + 1}", Conv(widths[i], widths[i + 1], 3, stride=2, pad=1, generator=gen))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_divisible(x.shape[2], x.shape[3], 16, "low")
        for i in range(1, 5):
            x = getattr(self, f"conv{i}")(x)
            if i < 4:
                x = activation(x, "relu")
        return x


def conv_stand_in_aux(image_low: torch.Tensor, encoder: ConvAuxEncoder) -> torch.Tensor:
    return encoder(image_low)


class SAM2UNeXt(nn.Module):
    """Detail encoder at high resolution, semantic encoder at low resolution,
    dense glue, U-Net decoder; emits logits at half the high resolution."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.hier = HierEncoder(cfg.hier_spec, seed=cfg.seed)
        if cfg.aux_mode == "dinov2-shape":
            self.plain = PlainEncoder(cfg.plain_spec, seed=cfg.seed)
        elif cfg.aux_mode == "conv-stand-in":
            self.aux = ConvAuxEncoder(cfg.glue.aux_dim, seed=cfg.seed)
        self.glue = DenseGlue(cfg.glue, with_aux=cfg.has_aux, seed=cfg.seed)
        self.decoder = Decoder(cfg.decoder_channels, seed=cfg.seed)

    def auxiliary(self, image_low: torch.Tensor) -> torch.Tensor | None:
        if self.cfg.aux_mode == "dinov2-shape":
            return self.plain(image_low)
        if self.cfg.aux_mode == "conv-stand-in":
            return self.aux(image_low)
        return None

    def forward(self, image_high: torch.Tensor, image_low: torch.Tensor | None = None) -> torch.Tensor:
        exp_h = tuple(self.cfg.high_res)
        if tuple(image_high.shape[2:]) != exp_h:
            raise ConfigurationError(f"high-resolution input {tuple(image_high.shape)} does not match {exp_h}")
        pyramid = self.hier(image_high)
        aux = None
        if self.cfg.has_aux:
            if image_low is None:
                raise ConfigurationError("low-resolution input required when the auxiliary branch is enabled")
            if tuple(image_low.shape[2:]) != tuple(self.cfg.low_res):
                raise ConfigurationError(
                    f"low-resolution input {tuple(image_low.shape)} does not match {tuple(self.cfg.low_res)}"
                )
            aux = self.auxiliary(image_low)
        fused = self.glue(pyramid, aux)
        return self.decoder(fused)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Trainable parameters split into adapters / aux / glue / decoder."""
        groups: dict[str, list] = {"adapters": [], "aux": [], "glue": [], "decoder": [], "other": []}
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            if name.startswith("hier.adapter"):
                groups["adapters"].append((name, p))
            elif name.startswith("aux."):
                groups["aux"].append((name, p))
            elif name.startswith("glue."):
                groups["glue"].append((name, p))
            elif name.startswith("decoder."):
                groups["decoder"].append((name, p))
            else:
                groups["other"].append((name, p))
        return {k: v for k, v in groups.items() if v}


def build_model(cfg: ModelConfig, precision: str = "float32") -> SAM2UNeXt:
    return SAM2UNeXt(cfg).to(nn_core.resolve_dtype(precision))


def shape_only_forward(cfg: ModelConfig, batch: int = 1) -> dict:
    """Run the model on the meta device: shapes are propagated, nothing is computed.

    Returns the logit shape, pyramid shapes and the glue widths before and
    after compression.
    """
    with torch.device("meta"):
        model = SAM2UNeXt(cfg)
        high = torch.empty(batch, 3, *cfg.high_res)
        low = torch.empty(batch, 3, *cfg.low_res) if cfg.has_aux else None
    pyramid = model.hier(high)
    logits = model(high, low)
    return {
        "logits": tuple(logits.shape),
        "pyramid": [tuple(f.shape) for f in pyramid],
        "concat_widths": list(model.glue.trace),
        "fused_widths": list(model.glue.trace_out),
    }


def forward(model: SAM2UNeXt, image_high: torch.Tensor, image_low: torch.Tensor | None) -> torch.Tensor:
    return model(image_high, image_low)


def decode(model: SAM2UNeXt, fused: list[torch.Tensor]) -> torch.Tensor:
    return model.decoder(fused)


def full_resolution_logits(model: SAM2UNeXt, image_high, image_low) -> torch.Tensor:
    """Logits bilinearly upsampled from stride 2 to the high-resolution input size."""
    logits = model(image_high, image_low)
    return resize_bilinear(logits, image_high.shape[2], image_high.shape[3])


# --------------------------------------------------------------------------
# inference


def normalize_image(x: torch.Tensor) -> torch.Tensor:
    """(n, 3, h, w) in [0, 1] to per-channel standardized values."""
    mean = torch.tensor(PIXEL_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(PIXEL_STD, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - mean) / std


def image_to_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(h, w, 3) uint8 to (1, 3, h, w) in [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigurationError(f"expected an RGB image (h, w, 3), got {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype).unsqueeze(0) / 255.0


def prepare_inputs(image: np.ndarray, cfg: ModelConfig, dtype=torch.float32):
    x = image_to_tensor(image, dtype)
    high = normalize_image(resize_bilinear(x, *cfg.high_res))
    low = normalize_image(resize_bilinear(x, *cfg.low_res)) if cfg.has_aux else None
    return high, low


@torch.no_grad()
def predict(model: SAM2UNeXt, image: np.ndarray | str | Path) -> np.ndarray:
    """Probability map in [0, 1] at the input image's own size."""
    if not isinstance(image, np.ndarray):
        from .data import read_rgb

        image = read_rgb(image)
    was_training = model.training
    model.eval()
    try:
        dtype = next(model.parameters()).dtype
        high, low = prepare_inputs(image, model.cfg, dtype)
        logits = model(high, low)
        # resize before the sigmoid, the same convention the loss is trained with
        logits = resize_bilinear(logits, image.shape[0], image.shape[1])
        prob = activation(logits, "sigmoid")
    finally:
        model.train(was_training)
    return prob[0, 0].clamp(0.0, 1.0).cpu().numpy().astype(np.float64)
