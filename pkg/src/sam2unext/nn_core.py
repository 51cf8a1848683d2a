"""Differentiable building blocks, parameter registry and gradient checking.

Everything here is a thin, validated layer over ``torch``: autograd does the
backpropagation, this module pins the conventions (bilinear half-pixel
centers, exact GeLU, BatchNorm eps/momentum) and turns shape mistakes into
:class:`ConfigurationError` messages that name both shapes.

Production code runs in ``float32``; gradient checks switch to ``float64``.
"""

from __future__ import annotations

import contextlib
import math
from collections import Counter
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DegenerateVarianceError, GraphStateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

DTYPES = {"float32": torch.float32, "float64": torch.float64}

_op_counts: list[Counter] = []


def resolve_dtype(precision: str | torch.dtype) -> torch.dtype:
    if isinstance(precision, torch.dtype):
        return precision
    try:
        return DTYPES[precision]
    except KeyError:
        raise ConfigurationError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}") from None


@contextlib.contextmanager
def count_ops() -> Iterator[Counter]:
    """Count the non-trivial ops executed inside the block.

    Only work that actually happens is counted: a resize to the input's own
    size is an identity and is not recorded.
    """
    counter: Counter = Counter()
    _op_counts.append(counter)
    try:
        yield counter
    finally:
        _op_counts.remove(counter)


def _record(name: str) -> None:
    for c in _op_counts:
        c[name] += 1


def _shape(x: torch.Tensor) -> tuple[int, ...]:
    return tuple(x.shape)


def _check_rank4(x: torch.Tensor, what: str) -> None:
    if x.dim() != 4:
        raise ConfigurationError(f"{what} must be rank-4 (n, c, h, w), got shape {_shape(x)}")


# --------------------------------------------------------------------------
# functional ops


def conv2d(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None, stride: int = 1, pad: int = 0) -> torch.Tensor:
    _check_rank4(x, "conv2d input")
    if w.dim() != 4 or w.shape[2] != w.shape[3]:
        raise ConfigurationError(f"conv2d weight must be (c_out, c_in, k, k), got {_shape(w)}")
    if x.shape[1] != w.shape[1]:
        raise ConfigurationError(
            f"conv2d channel mismatch: input {_shape(x)} has {x.shape[1]} channels, weight {_shape(w)} expects {w.shape[1]}"
        )
    if b is not None and tuple(b.shape) != (w.shape[0],):
        raise ConfigurationError(f"conv2d bias shape {_shape(b)} does not match weight {_shape(w)}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    k = w.shape[2]
    if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
        raise ConfigurationError(f"conv2d kernel {_shape(w)} larger than padded input {_shape(x)}")
    _record("conv2d")
    return F.conv2d(x, w, b, stride=stride, padding=pad)


def batch_norm(
    x: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
) -> torch.Tensor:
    """BatchNorm over (n, h, w) per channel; updates running stats in place when training."""
    _check_rank4(x, "batch_norm input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError(f"batch_norm affine shapes {_shape(gamma)}/{_shape(beta)} do not match input {_shape(x)}")
    if training and x.shape[0] * x.shape[2] * x.shape[3] == 1:
        raise DegenerateVarianceError(
            f"batch_norm in train mode needs more than one value per channel, got input {_shape(x)}"
        )
    _record("batch_norm")
    return F.batch_norm(x, running_mean, running_var, gamma, beta, training=training, momentum=momentum, eps=BN_EPS)


def activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "relu":
        return F.relu(x)
    if kind == "gelu":
        return F.gelu(x, approximate="none")
    if kind == "sigmoid":
        return torch.sigmoid(x)
    raise ConfigurationError(f"unknown activation {kind!r}")


def resize_bilinear(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize with half-pixel centers (align_corners=False)."""
    _check_rank4(x, "resize input")
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"resize target must be >= 1, got {out_h}x{out_w}")
    if x.shape[2] == out_h and x.shape[3] == out_w:
        return x
    _record("resize")
    return F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)


def concat_channels(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_rank4(a, "concat input")
    _check_rank4(b, "concat input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ConfigurationError(f"concat needs equal batch and spatial dims, got {_shape(a)} and {_shape(b)}")
    _record("concat")
    return torch.cat([a, b], dim=1)


# --------------------------------------------------------------------------
# parameters and layers


def make_parameter(values: torch.Tensor, trainable: bool = True) -> nn.Parameter:
    return nn.Parameter(values, requires_grad=trainable)


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def he_normal(shape: Sequence[int], generator: torch.Generator, gain: float = math.sqrt(2.0)) -> torch.Tensor:
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    std = gain / math.sqrt(max(fan_in, 1))
    return torch.randn(tuple(shape), generator=generator, dtype=torch.float32) * std


class Conv(nn.Module):
    """Convolution with square kernel; parameters are named ``w`` and ``b`` (``b`` optional)."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        k: int = 1,
        stride: int = 1,
        pad: int = 0,
        *,
        generator: torch.Generator,
        trainable: bool = True,
        gain: float = math.sqrt(2.0),
        zero: bool = False,
        bias: bool = True,
    ):
        super().__init__()
        self.stride, self.pad = stride, pad
        if zero:
            w = torch.zeros(c_out, c_in, k, k)
        else:
            w = he_normal((c_out, c_in, k, k), generator, gain)
        self.w = make_parameter(w, trainable)
        self.b = make_parameter(torch.zeros(c_out), trainable) if bias else None

    @property
    def c_in(self) -> int:
        return self.w.shape[1]

    @property
    def c_out(self) -> int:
        return self.w.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.w, self.b, self.stride, self.pad)


class BatchNorm(nn.Module):
    def __init__(self, channels: int, trainable: bool = True):
        super().__init__()
        self.gamma = make_parameter(torch.ones(channels), trainable)
        self.beta = make_parameter(torch.zeros(channels), trainable)
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.momentum = BN_MOMENTUM

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum)


class ParamRegistry:
    """Ordered ``(path, Parameter)`` view of a module tree.

    Order follows module registration, so two models built from the same
    config list their parameters identically.
    """

    def __init__(self, module: nn.Module):
        self.module = module
        self.items: list[tuple[str, nn.Parameter]] = list(module.named_parameters())
        names = [n for n, _ in self.items]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate parameter paths in registry")

    def __iter__(self):
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def names(self) -> list[str]:
        return [n for n, _ in self.items]

    def trainable(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.items if p.requires_grad]

    def frozen(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.items if not p.requires_grad]

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.items}

    def zero_grad(self) -> None:
        for _, p in self.items:
            p.grad = None


def backward(loss: torch.Tensor, registry: ParamRegistry) -> None:
    """Backpropagate a scalar loss into the trainable parameters of ``registry``."""
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {_shape(loss)}")
    if loss.grad_fn is None:
        raise GraphStateError("backward called on a tensor with no recorded forward pass")
    if not torch.isfinite(loss.detach()).all():
        raise ValueError(f"loss is not finite: {loss.item()}")
    registry.zero_grad()
    loss.backward()
    for name, p in registry.frozen():
        if p.grad is not None:  # pragma: no cover - guarded by requires_grad
            raise GraphStateError(f"frozen parameter {name} received a gradient")


# --------------------------------------------------------------------------
# finite differences


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """Element-wise ``|a-b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_difference(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, index: tuple, step: float) -> float:
    """d fn / d tensor[index] by central differences; ``tensor`` is restored afterwards."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + step
        plus = float(fn())
        tensor[index] = orig - step
        minus = float(fn())
        tensor[index] = orig
    return (plus - minus) / (2.0 * step)


def numerical_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, step: float = 1e-3) -> torch.Tensor:
    grad = torch.zeros_like(tensor)
    for idx in np.ndindex(*tensor.shape):
        grad[idx] = central_difference(fn, tensor, idx, step)
    return grad
