"""End-to-end backprop vs. central finite differences, per parameter group.

ReLU kinks make a single finite-difference step unreliable: a step that
crosses a kink gives a wrong slope, while a very small step drowns tiny
gradients in float64 roundoff. Each checked entry therefore evaluates central
differences on a ladder of steps and trusts an estimate only when two
adjacent steps agree. Entries with no agreeing pair are skipped and replaced
by other entries of the same tensor. Trust is decided from forward
evaluations alone, so a wrong backward pass cannot hide behind a skip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import nn_core
from .model import ModelConfig, SAM2UNeXt, build_model
from .trainer import training_loss

STEPS = (1e-4, 1e-5, 1e-6)
AGREEMENT = 1e-6


@dataclass
class GroupResult:
    group: str
    n_params: int
    n_checked: int
    n_skipped: int
    max_rel_error: float
    worst: str

    def passed(self, tol: float) -> bool:
        return self.n_checked > 0 and self.max_rel_error <= tol


@dataclass
class GradcheckReport:
    tol: float
    steps: tuple[float, ...]
    groups: list[GroupResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.groups) and all(g.passed(self.tol) for g in self.groups)

    def failing(self) -> list[str]:
        return [g.group for g in self.groups if not g.passed(self.tol)]

    def table(self) -> str:
        lines = [f"{'group':<10} {'params':>8} {'checked':>8} {'skipped':>8} {'max_rel_err':>12}  status"]
        for g in self.groups:
            status = "ok" if g.passed(self.tol) else f"FAIL ({g.worst or 'no trusted entries'})"
            lines.append(f"{g.group:<10} {g.n_params:>8} {g.n_checked:>8} {g.n_skipped:>8} "
                         f"{g.max_rel_error:>12.3e}  {status}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "steps": list(self.steps),
            "passed": self.passed,
            "groups": [dict(g.__dict__) for g in self.groups],
        }


def _random_inputs(cfg: ModelConfig, gen: torch.Generator, batch: int = 1):
    hh, wh = cfg.high_res
    high = torch.randn(batch, 3, hh, wh, generator=gen, dtype=torch.float64)
    low = torch.randn(batch, 3, *cfg.low_res, generator=gen, dtype=torch.float64) if cfg.has_aux else None
    gt = torch.zeros(batch, 1, hh, wh, dtype=torch.float64)
    gt[:, :, hh // 4: 3 * hh // 4, wh // 3: 5 * wh // 6] = 1.0
    return high, low, gt


def _perturb_trainable(model: SAM2UNeXt, gen: torch.Generator, scale: float = 0.2) -> None:
    """Move trainable weights off their init so zero-initialized branches carry gradient."""
    with torch.no_grad():
        for _, p in model.named_parameters():
            if p.requires_grad:
                p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def trusted_difference(fn, tensor: torch.Tensor, index: tuple, steps=STEPS,
                       agreement: float = AGREEMENT) -> float | None:
    """Central-difference slope confirmed by two adjacent steps, or None.

    Returns the coarser estimate of the first adjacent pair whose relative
    disagreement is at most ``agreement``; the coarser one carries less
    roundoff.
    """
    prev = None
    for h in steps:
        d = nn_core.central_difference(fn, tensor, index, h)
        if prev is not None and float(nn_core.relative_error(prev, d)) <= agreement:
            return prev
        prev = d
    return None


def gradcheck_model(cfg: ModelConfig, seed: int = 0, per_tensor: int = 3, tol: float = 1e-4,
                    steps=STEPS, max_tries: int = 12, model: SAM2UNeXt | None = None) -> GradcheckReport:
    """Compare autograd and finite-difference gradients of the training loss.

    Runs in float64. For every trainable tensor, up to ``per_tensor`` seeded
    random entries with a trusted finite-difference slope are checked (at most
    ``max_tries`` candidates per tensor). Each group reports its largest
    element-wise relative error ``|a-b| / max(|a|, |b|, 1e-8)``.
    """
    gen = nn_core.seeded_generator(seed)
    if model is None:
        model = build_model(cfg, precision="float64")
        _perturb_trainable(model, gen)
    model.train()
    high, low, gt = _random_inputs(cfg, gen)

    def loss_value() -> float:
        with torch.no_grad():
            return float(training_loss(model, high, low, gt)[0])

    registry = nn_core.ParamRegistry(model)
    loss, _ = training_loss(model, high, low, gt)
    nn_core.backward(loss, registry)

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol=tol, steps=tuple(steps))
    for group, params in model.parameter_groups().items():
        worst, worst_where, checked, skipped = 0.0, "", 0, 0
        for name, p in params:
            analytic = p.grad.detach()
            done = 0
            for f in rng.permutation(p.numel())[:max_tries]:
                if done == per_tensor:
                    break
                idx = np.unravel_index(int(f), tuple(p.shape))
                numeric = trusted_difference(loss_value, p.data, idx, steps)
                if numeric is None:
                    skipped += 1
                    continue
                err = float(nn_core.relative_error(analytic[idx].item(), numeric))
                done += 1
                if err > worst or not worst_where:
                    worst, worst_where = err, f"{name}{list(map(int, idx))}"
            checked += done
        report.groups.append(
            GroupResult(group, sum(p.numel() for _, p in params), checked, skipped, worst, worst_where)
        )
    return report
