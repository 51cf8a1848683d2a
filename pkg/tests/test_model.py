import numpy as np
import pytest
import torch

from sam2unext import nn_core
from sam2unext.errors import ConfigurationError
from sam2unext.model import (
    ModelConfig,
    build_model,
    conv_stand_in_aux,
    ConvAuxEncoder,
    decode,
    forward,
    full_resolution_logits,
    predict,
    prepare_inputs,
    shape_only_forward,
    toy_config,
)


def inputs(cfg, gen, batch=1, dtype=torch.float32):
    high = torch.randn(batch, 3, *cfg.high_res, generator=gen, dtype=dtype)
    low = torch.randn(batch, 3, *cfg.low_res, generator=gen, dtype=dtype)
    return high, low


@pytest.mark.parametrize("high,low", [(352, 350), (1024, 448)])
def test_half_resolution_logits(high, low):
    cfg = toy_config(high=high, low=low)
    assert shape_only_forward(cfg)["logits"] == (1, 1, high // 2, high // 2)


def test_default_config_shapes():
    cfg = ModelConfig()
    assert cfg.high_res == (1024, 1024) and cfg.low_res == (448, 448)
    shapes = shape_only_forward(cfg)
    assert shapes["logits"] == (1, 1, 512, 512)
    assert shapes["concat_widths"] == [288, 576, 1152, 2304]


def test_toy_forward_real_values(gen, tiny_cfg):
    model = build_model(tiny_cfg)
    high, low = inputs(tiny_cfg, gen)
    logits = forward(model, high, low)
    assert logits.shape == (1, 1, 32, 32)
    assert torch.isfinite(logits).all()
    assert torch.equal(logits, model(high, low))


def test_toy_shape_table(gen, tiny_cfg):
    # 64x64 input, channels [4, 8, 16, 32], fused 8; strides 32, 16, 8, 4 then 2
    expected = {
        "block4": ((1, 8, 2, 2), (1, 8, 2, 2)),
        "block3": ((1, 16, 4, 4), (1, 8, 4, 4)),
        "block2": ((1, 16, 8, 8), (1, 8, 8, 8)),
        "block1": ((1, 16, 16, 16), (1, 8, 16, 16)),
        "partial": ((1, 8, 32, 32), (1, 8, 32, 32)),
        "head": ((1, 8, 32, 32), (1, 1, 32, 32)),
    }
    model = build_model(tiny_cfg)
    seen = {}
    for name in expected:
        getattr(model.decoder, name).register_forward_hook(
            lambda m, i, o, name=name: seen.__setitem__(name, (tuple(i[0].shape), tuple(o.shape)))
        )
    model(*inputs(tiny_cfg, gen))
    assert seen == expected
    assert model.glue.trace == [8, 16, 32, 64]


def test_aux_none_keeps_output_shape(gen):
    with_aux = build_model(toy_config())
    without = build_model(toy_config(aux_mode="none"))
    high, low = inputs(with_aux.cfg, gen)
    assert with_aux(high, low).shape == without(high).shape
    assert not hasattr(without, "plain")
    assert without.glue.trace == [4, 8, 16, 32]


def test_conv_stand_in_shapes_and_grads(gen):
    enc = ConvAuxEncoder(64)
    with torch.device("meta"):
        assert ConvAuxEncoder(64)(torch.empty(1, 3, 448, 448)).shape == (1, 64, 28, 28)
    cfg = toy_config(low=32, aux_mode="conv-stand-in")
    model = build_model(cfg)
    high, low = inputs(cfg, gen)
    model(high, low).sum().backward()
    assert all(p.grad is not None for p in model.aux.parameters())
    assert all(p.requires_grad for p in model.aux.parameters())
    assert conv_stand_in_aux(torch.zeros(1, 3, 32, 32), enc).shape == (1, 64, 2, 2)


def test_plain_encoder_receives_no_grad(gen, tiny_cfg):
    model = build_model(tiny_cfg)
    model(*inputs(tiny_cfg, gen)).sum().backward()
    assert all(p.grad is None for p in model.plain.parameters())
    assert all(p.grad is not None for p in model.decoder.parameters())


# 352 is not a multiple of 14, so that pair uses a 16-pixel patch
RESOLUTION_GRID = [(352, 352, 16), (1024, 224, 14), (1024, 672, 14), (1024, 448, 14)]


def test_resolution_pairs_are_decoupled():
    for high, low, patch in RESOLUTION_GRID:
        cfg = toy_config(high=high, low=low, patch_size=patch, stage_channels=(8, 16, 32, 64),
                         aux_dim=16, fused_channels=8)
        shapes = shape_only_forward(cfg)
        assert shapes["logits"] == (1, 1, high // 2, high // 2)
        assert [p[2] for p in shapes["pyramid"]] == [high // s for s in (4, 8, 16, 32)]


def test_config_validation():
    with pytest.raises(ConfigurationError, match="32"):
        toy_config(high=100)
    with pytest.raises(ConfigurationError, match="14"):
        toy_config(low=30)
    with pytest.raises(ConfigurationError, match="16"):
        toy_config(low=56, aux_mode="conv-stand-in")
    with pytest.raises(ValueError, match="decoder_channels"):
        ModelConfig.model_validate({**toy_config().model_dump(), "decoder_channels": 9})
    with pytest.raises(ValueError):
        ModelConfig.model_validate({"bogus": 1})


def test_input_resolution_checked(gen, tiny_cfg):
    model = build_model(tiny_cfg)
    high, low = inputs(tiny_cfg, gen)
    with pytest.raises(ConfigurationError):
        model(high[:, :, :32, :32], low)
    with pytest.raises(ConfigurationError):
        model(high, None)


def test_decode_channel_mismatch(tiny_cfg):
    model = build_model(tiny_cfg)
    fused = [torch.zeros(1, 8, s, s) for s in (16, 8, 4, 2)]
    assert decode(model, fused).shape == (1, 1, 32, 32)
    with pytest.raises(ConfigurationError):
        decode(model, fused[:3] + [torch.zeros(1, 7, 2, 2)])


def test_full_resolution_logits(gen, tiny_cfg):
    model = build_model(tiny_cfg)
    assert full_resolution_logits(model, *inputs(tiny_cfg, gen)).shape == (1, 1, 64, 64)


def test_predict_keeps_input_size(rng, tiny_cfg):
    model = build_model(tiny_cfg)
    image = rng.integers(0, 256, size=(37, 53, 3), dtype=np.uint8)
    prob = predict(model, image)
    assert prob.shape == (37, 53)
    assert prob.min() >= 0.0 and prob.max() <= 1.0
    assert model.training


def test_predict_zero_logits_is_one_half(rng, tiny_cfg):
    model = build_model(tiny_cfg)
    with torch.no_grad():
        model.decoder.head.w.zero_()
        model.decoder.head.b.zero_()
    assert np.all(predict(model, rng.integers(0, 256, size=(20, 30, 3), dtype=np.uint8)) == 0.5)


def test_predict_on_model_sized_image_skips_one_resize(rng, tiny_cfg):
    model = build_model(tiny_cfg)
    counts = []
    for size in ((64, 64), (48, 80)):
        with nn_core.count_ops() as ops:
            predict(model, rng.integers(0, 256, size=(*size, 3), dtype=np.uint8))
        counts.append(ops["resize"])
    assert counts[1] - counts[0] == 1


def test_prepare_inputs_normalizes(tiny_cfg):
    image = np.full((10, 10, 3), 255, dtype=np.uint8)
    high, low = prepare_inputs(image, tiny_cfg)
    expect = (1.0 - 0.485) / 0.229
    assert high.shape == (1, 3, 64, 64) and low.shape == (1, 3, 28, 28)
    assert high[0, 0].sub(expect).abs().max() < 1e-6


def test_predict_reads_files(tmp_path, tiny_cfg, rng):
    from sam2unext.data import write_png

    path = tmp_path / "img.png"
    write_png(path, rng.integers(0, 256, size=(16, 24, 3), dtype=np.uint8))
    assert predict(build_model(tiny_cfg), path).shape == (16, 24)
    with pytest.raises(OSError):
        predict(build_model(tiny_cfg), tmp_path / "missing.png")


def test_parameter_groups(tiny_cfg):
    groups = build_model(tiny_cfg).parameter_groups()
    assert set(groups) == {"adapters", "glue", "decoder"}
    groups = build_model(toy_config(low=32, aux_mode="conv-stand-in")).parameter_groups()
    assert set(groups) == {"adapters", "aux", "glue", "decoder"}


def test_same_seed_same_weights(tiny_cfg):
    a, b = build_model(tiny_cfg), build_model(tiny_cfg)
    for (n, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(x, y), n
