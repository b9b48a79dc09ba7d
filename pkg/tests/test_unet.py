import numpy as np
import pytest

from atmrn.params import ModelParams
from atmrn.tensor import Tensor, precision
from atmrn.unet import UNetConfig, init_unet, pyramid_widths, unet_forward

from conftest import gradcheck

TOY = UNetConfig(channels=(2, 3, 3, 4, 4))


def build(cfg, seed=0, dtype=np.float32):
    with precision(dtype):
        p = ModelParams(seed)
        init_unet(p, cfg)
    return p


@pytest.mark.parametrize("dims", [(16, 16, 16), (32, 32, 32), (32, 48, 32)])
def test_shape_ladder(dims, rng):
    p = build(TOY)
    pyr, seg = unet_forward(rng.random(dims), p, TOY)
    assert len(pyr.maps) == 9 and seg is None
    d = np.array(dims)
    for k, m in enumerate(pyr.encoder):
        assert m.shape == (1, TOY.channels[k]) + tuple(d // 2 ** k)
    for j, m in enumerate(pyr.decoder, start=1):
        assert m.shape == (1, TOY.channels[4 - j]) + tuple(d // 2 ** (4 - j))
    assert pyr.widths() == pyramid_widths(TOY)


def test_default_32_cube_bottleneck_is_2(rng):
    cfg = UNetConfig()
    pyr, _ = unet_forward(rng.random((32, 32, 32)), build(cfg), cfg)
    assert pyr.encoder[0].shape[1] == 8 and pyr.encoder[4].shape[2:] == (2, 2, 2)


def test_no_image_decoder_has_five_maps_and_fewer_params(rng):
    cfg = UNetConfig(channels=TOY.channels, image_decoder=False)
    p = build(cfg)
    pyr, seg = unet_forward(rng.random((16, 16, 16)), p, cfg)
    assert len(pyr.maps) == 5 and seg is None
    full = build(TOY)
    assert set(p.names()) < set(full.names())
    assert not any(".up" in n for n in p.names())


def test_segmentation_head(rng):
    cfg = UNetConfig(channels=TOY.channels, seg_classes=2)
    pyr, seg = unet_forward(rng.random((16, 16, 32)), build(cfg), cfg)
    assert seg.shape == (1, 2, 16, 16, 32)


def test_dims_must_be_divisible_by_16(rng):
    with pytest.raises(ValueError, match="pad"):
        unet_forward(rng.random((16, 24, 16)), build(TOY), TOY)


def test_input_gradient_finite_differences(rng):
    p = build(TOY, dtype=np.float64)
    vol = rng.random((16, 16, 16))
    readout = rng.standard_normal((1, 2, 16, 16, 16))

    def f(v):
        pyr, _ = unet_forward(v, p, TOY)
        return (pyr.decoder[-1] * Tensor(readout)).sum()

    with precision(np.float64):
        x = Tensor(vol, requires_grad=True)
        f(x).backward()
    assert np.abs(x.grad).max() > 0
    gradcheck(f, [vol], rtol=1e-3, max_entries=20)


def test_forward_is_bit_deterministic(rng):
    vol = rng.random((16, 16, 16))
    a, _ = unet_forward(vol, build(TOY, seed=3), TOY)
    b, _ = unet_forward(vol, build(TOY, seed=3), TOY)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.maps, b.maps))


def test_eval_mode_leaves_running_stats(rng):
    p = build(TOY)
    before = {k: v.copy() for k, v in p.buffers.items()}
    unet_forward(rng.random((16, 16, 16)), p, TOY, training=False)
    assert all(np.array_equal(before[k], v) for k, v in p.buffers.items())
    unet_forward(rng.random((16, 16, 16)), p, TOY, training=True)
    assert any(not np.array_equal(before[k], v) for k, v in p.buffers.items())
