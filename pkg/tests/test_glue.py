import numpy as np
import pytest
import torch
import torch.nn.functional as F

from sam2unext import nn_core
from sam2unext.errors import ConfigurationError
from sam2unext.glue import (
    DenseGlue,
    GlueConfig,
    explained_variance_ratio,
    glue_fuse,
    glue_without_aux,
    pca_components,
    pca_project,
    power_iteration_eigs,
)

TOY = GlueConfig(aux_dim=8, stage_channels=(4, 8, 16, 32), fused_channels=8)


def toy_pyramid(gen, size=6, dtype=torch.float64):
    return [torch.randn(1, c, size, size, generator=gen, dtype=dtype) for c in TOY.stage_channels]


def test_hiera_l_widths_and_shapes():
    cfg = GlueConfig()
    with torch.device("meta"):
        glue = DenseGlue(cfg)
        pyr = [torch.empty(1, c, s, s) for c, s in zip(cfg.stage_channels, (256, 128, 64, 32))]
        out = glue_fuse(pyr, torch.empty(1, 1024, 32, 32), glue)
    assert glue.trace == [288, 576, 1152, 2304]
    assert glue.trace_out == [128] * 4
    assert [tuple(o.shape) for o in out] == [
        (1, 128, 256, 256), (1, 128, 128, 128), (1, 128, 64, 64), (1, 128, 32, 32)
    ]


def test_matches_composition_oracle(gen):
    glue = DenseGlue(TOY, seed=3).double()
    pyr = [torch.randn(1, c, s, s, generator=gen, dtype=torch.float64)
           for c, s in zip(TOY.stage_channels, (6, 3, 2, 1))]
    aux = torch.randn(1, 8, 6, 6, generator=gen, dtype=torch.float64)
    out = glue(pyr, aux)
    for i, (f, o) in enumerate(zip(pyr, out), start=1):
        al, co = getattr(glue, f"align{i}"), getattr(glue, f"compress{i}")
        a = F.conv2d(aux, al.w, al.b)
        if a.shape[2:] != f.shape[2:]:
            a = F.interpolate(a, size=f.shape[2:], mode="bilinear", align_corners=False)
        expect = F.conv2d(torch.cat([f, a], 1), co.w, co.b)
        torch.testing.assert_close(o, expect, rtol=0, atol=1e-12)


def test_equal_grid_resize_is_identity(gen):
    glue = DenseGlue(TOY).double()
    with nn_core.count_ops() as ops:
        glue(toy_pyramid(gen, 6), torch.randn(1, 8, 6, 6, generator=gen, dtype=torch.float64))
    assert ops["resize"] == 0
    with nn_core.count_ops() as ops:
        glue(toy_pyramid(gen, 6), torch.randn(1, 8, 3, 3, generator=gen, dtype=torch.float64))
    assert ops["resize"] == 4


def test_without_aux_matches_direct_conv(gen):
    glue = DenseGlue(TOY, with_aux=False).double()
    pyr = toy_pyramid(gen)
    for i, (f, o) in enumerate(zip(pyr, glue_without_aux(pyr, glue)), start=1):
        co = getattr(glue, f"compress{i}")
        torch.testing.assert_close(o, F.conv2d(f, co.w, co.b), rtol=0, atol=1e-12)
    assert glue.trace == list(TOY.stage_channels)
    assert not any(n.startswith("align") for n, _ in glue.named_parameters())


def test_without_aux_identity_init(gen):
    cfg = GlueConfig(aux_dim=4, stage_channels=(4, 4, 4, 4), fused_channels=4)
    glue = DenseGlue(cfg, with_aux=False).double()
    with torch.no_grad():
        for i in range(1, 5):
            co = getattr(glue, f"compress{i}")
            co.w.copy_(torch.eye(4, dtype=torch.float64).view(4, 4, 1, 1))
            co.b.zero_()
    pyr = [torch.randn(1, 4, 5, 5, generator=gen, dtype=torch.float64) for _ in range(4)]
    for f, o in zip(pyr, glue(pyr)):
        assert torch.equal(f, o)


def test_hiera_l_without_aux_width():
    with torch.device("meta"):
        glue = DenseGlue(GlueConfig(), with_aux=False)
        out = glue([torch.empty(1, c, 4, 4) for c in (144, 288, 576, 1152)])
    assert all(o.shape[1] == 128 for o in out)


def test_channel_mismatch_errors(gen):
    glue = DenseGlue(TOY).double()
    pyr = toy_pyramid(gen)
    with pytest.raises(ConfigurationError):
        glue(pyr, torch.zeros(1, 7, 3, 3, dtype=torch.float64))
    with pytest.raises(ConfigurationError):
        glue(pyr[:3] + [torch.zeros(1, 31, 6, 6, dtype=torch.float64)], torch.zeros(1, 8, 3, 3))
    with pytest.raises(ConfigurationError):
        glue(pyr, None)


def test_gradients_reach_both_branches_and_all_params(gen):
    glue = DenseGlue(TOY).double()
    pyr = [p.requires_grad_(True) for p in toy_pyramid(gen)]
    aux = torch.randn(1, 8, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
    sum((o ** 2).sum() for o in glue(pyr, aux)).backward()
    assert aux.grad.abs().sum() > 0
    assert all(p.grad.abs().sum() > 0 for p in pyr)
    assert all(p.grad is not None and p.grad.abs().sum() > 0 for p in glue.parameters())


# -- PCA ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_power_iteration_matches_dense_eigensolver(seed):
    # isotropic samples: neighbouring eigenvalues are close, the hard case
    x = np.random.default_rng(seed).standard_normal((64, 8))
    x -= x.mean(axis=0)
    cov = x.T @ x / 63
    vals, vecs = power_iteration_eigs(cov, 3, iters=100, tol=1e-7)
    ref = np.linalg.eigh(cov)[0][::-1][:3]
    np.testing.assert_allclose(vals, ref, atol=1e-5)
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(3), atol=1e-10)
    np.testing.assert_allclose((x @ vecs).var(axis=0, ddof=1), ref, atol=1e-5)


def test_projection_variances_match_eigenvalues(rng):
    x = rng.standard_normal((64, 8))
    aux = torch.from_numpy(x.T.reshape(1, 8, 8, 8).copy())
    proj, vals, total = pca_components(aux, 3)
    centered = x - x.mean(axis=0)
    ref = np.linalg.eigh(centered.T @ centered / 63)[0][::-1]
    np.testing.assert_allclose(proj.var(axis=0, ddof=1), ref[:3], atol=1e-5)
    np.testing.assert_allclose(vals, ref[:3], atol=1e-5)
    assert total == pytest.approx(ref.sum(), abs=1e-10)


def test_full_basis_reconstructs_centered_data(rng):
    x = rng.standard_normal((64, 8))
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / 63
    _, vecs = power_iteration_eigs(cov, 8, iters=100, tol=1e-7)
    np.testing.assert_allclose((centered @ vecs) @ vecs.T, centered, atol=1e-5)
    proj, _, _ = pca_components(torch.from_numpy(x.T.reshape(1, 8, 8, 8).copy()), 8)
    np.testing.assert_allclose(np.sort(np.linalg.norm(proj, axis=0)), np.sort(np.linalg.norm(centered @ vecs, axis=0)),
                               atol=1e-8)


def test_rank_one_features(rng):
    v = rng.standard_normal(8)
    s = rng.standard_normal(36)
    aux = torch.from_numpy(np.outer(v, s).reshape(1, 8, 6, 6))
    assert explained_variance_ratio(aux, 1) >= 0.999


def test_pca_project_shape_and_range(rng):
    aux = torch.from_numpy(rng.standard_normal((1, 8, 5, 7)))
    out = pca_project(aux, 3)
    assert out.shape == (1, 3, 5, 7) and out.dtype == torch.float32
    assert out.min() == 0.0 and out.max() == 1.0


def test_pca_argument_errors():
    with pytest.raises(ValueError):
        pca_project(torch.zeros(1, 2, 4, 4), 3)
    with pytest.raises(ConfigurationError):
        pca_project(torch.zeros(2, 4, 4, 4), 3)
