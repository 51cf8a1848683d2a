"""Dense glue layer fusing the semantic grid into every pyramid stage, plus a
PCA view of the semantic features."""

from __future__ import annotations

import math

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from . import nn_core
from .errors import ConfigurationError
from .nn_core import Conv, concat_channels, resize_bilinear


class GlueConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    aux_dim: int = Field(1024, ge=1)
    stage_channels: tuple[int, int, int, int] = (144, 288, 576, 1152)
    fused_channels: int = Field(128, ge=1)


class DenseGlue(nn.Module):
    """Per stage: 1x1 align of the semantic map, resize, concat, 1x1 compress.

    ``align{i}`` is only built when the auxiliary branch exists. ``trace``
    and ``trace_out`` hold the widths before and after compression of the
    last forward call.
    """

    def __init__(self, cfg: GlueConfig, with_aux: bool = True, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.with_aux = with_aux
        gen = nn_core.seeded_generator(seed + 15485863)
        for i, c in enumerate(cfg.stage_channels, start=1):
            if with_aux:
                self.add_module(f"align{i}", Conv(cfg.aux_dim, c, 1, generator=gen, gain=1.0))
            c_in = 2 * c if with_aux else c
            self.add_module(f"compress{i}", Conv(c_in, cfg.fused_channels, 1, generator=gen, gain=1.0))
        self.trace: list[int] = []
        self.trace_out: list[int] = []

    def _check_pyramid(self, pyramid):
        if len(pyramid) != 4:
            raise ConfigurationError(f"glue expects 4 pyramid stages, got {len(pyramid)}")
        for i, (f, c) in enumerate(zip(pyramid, self.cfg.stage_channels), start=1):
            if f.shape[1] != c:
                raise ConfigurationError(f"stage {i} has shape {tuple(f.shape)}, config expects {c} channels")

    def forward(self, pyramid: list[torch.Tensor], aux: torch.Tensor | None = None) -> list[torch.Tensor]:
        self._check_pyramid(pyramid)
        if self.with_aux and aux is None:
            raise ConfigurationError("glue was built with an auxiliary branch but no auxiliary features were given")
        if not self.with_aux and aux is not None:
            raise ConfigurationError("glue was built without an auxiliary branch")
        if aux is not None and aux.shape[1] != self.cfg.aux_dim:
            raise ConfigurationError(f"auxiliary features {tuple(aux.shape)} do not have aux_dim={self.cfg.aux_dim}")
        self.trace, self.trace_out = [], []
        out = []
        for i, f in enumerate(pyramid, start=1):
            if aux is not None:
                a = getattr(self, f"align{i}")(aux)
                a = resize_bilinear(a, f.shape[2], f.shape[3])
                f = concat_channels(f, a)
            self.trace.append(f.shape[1])
            out.append(getattr(self, f"compress{i}")(f))
            self.trace_out.append(out[-1].shape[1])
        return out


def glue_fuse(pyramid, aux, glue: DenseGlue):
    return glue(pyramid, aux)


def glue_without_aux(pyramid, glue: DenseGlue):
    return glue(pyramid, None)


# --------------------------------------------------------------------------
# PCA diagnostic


def power_iteration_eigs(cov: np.ndarray, k: int, iters: int = 100, tol: float = 1e-7, seed: int = 0):
    """Top-``k`` eigenpairs of a symmetric PSD matrix by block power iteration.

    A block of ``min(d, 2k)`` orthonormal vectors is repeatedly multiplied by
    ``cov`` and re-orthonormalized; a Rayleigh-Ritz step on the block orders
    and separates the vectors. Convergence then depends on the gap after the
    block rather than between neighbouring top eigenvalues, which single-vector
    deflation needs far more than 100 iterations to resolve when eigenvalues
    nearly tie. Stops once the top-``k`` Ritz values move less than ``tol``
    (relative to the largest). Returns ``(eigenvalues, vectors)`` with vectors
    as columns.
    """
    cov = np.asarray(cov, dtype=np.float64)
    d = cov.shape[0]
    if not 1 <= k <= d:
        raise ValueError(f"cannot take {k} eigenpairs of a {d}x{d} matrix")
    p = min(d, 2 * k)
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, p)))
    prev = None
    for _ in range(iters):
        q, _ = np.linalg.qr(cov @ q)
        ritz, rot = np.linalg.eigh(q.T @ cov @ q)
        order = np.argsort(ritz)[::-1]
        ritz, q = ritz[order], q @ rot[:, order]
        if prev is not None and np.max(np.abs(ritz[:k] - prev)) < tol * max(1.0, abs(ritz[0])):
            break
        prev = ritz[:k]
    vecs = q[:, :k]
    vals = np.einsum("ij,ik,kj->j", vecs, cov, vecs)
    return vals, vecs


def pca_components(aux: torch.Tensor, k: int = 3, iters: int = 100, tol: float = 1e-7):
    """Project each pixel's feature vector onto the top-``k`` principal axes.

    Returns ``(projections (h*w, k), eigenvalues (k,), total_variance)``;
    variances use the unbiased ``1/(n-1)`` normalization.
    """
    if aux.dim() != 4 or aux.shape[0] != 1:
        raise ConfigurationError(f"pca expects a single feature map (1, c, h, w), got {tuple(aux.shape)}")
    c = aux.shape[1]
    if k > c or k < 1:
        raise ValueError(f"cannot take {k} principal components of {c} channels")
    x = aux.detach().to(torch.float64).reshape(c, -1).T.cpu().numpy()
    if x.shape[0] < 2:
        raise ValueError("pca needs at least two spatial positions")
    x = x - x.mean(axis=0, keepdims=True)
    cov = x.T @ x / (x.shape[0] - 1)
    vals, vecs = power_iteration_eigs(cov, k, iters=iters, tol=tol)
    return x @ vecs, vals, float(np.trace(cov))


def pca_project(aux: torch.Tensor, k: int = 3) -> torch.Tensor:
    """(1, k, h, w) map of principal-component scores, each channel min-max scaled to [0, 1]."""
    h, w = aux.shape[2], aux.shape[3]
    proj, _, _ = pca_components(aux, k)
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    proj = (proj - lo) / span
    return torch.from_numpy(proj.T.reshape(1, k, h, w).copy()).to(torch.float32)


def explained_variance_ratio(aux: torch.Tensor, k: int = 1) -> float:
    _, vals, total = pca_components(aux, k)
    return float(vals.sum() / total) if total > 0 else math.nan
