import numpy as np
import pytest

from atmrn.decimate import build_template_bundle
from atmrn.mesh import TriMesh, icosphere
from atmrn.params import ModelParams
from atmrn.tensor import Tensor, precision
from atmrn.template import (DecoderConfig, TemplateError, TemplateMode, compose_template, decode_displacement,
                            init_decoder, level_adjacencies)

from conftest import gradcheck

TOY_CFG = DecoderConfig(latent=6, hidden=10, gcn_width=4)


@pytest.fixture(scope="module")
def toy_bundle():
    return build_template_bundle(icosphere(1, 0.5), (1.5, 1.2, 1.1, 1.1))


def decoder_params(bundle, in_features=16, seed=0, dtype=np.float32, cfg=TOY_CFG):
    with precision(dtype):
        p = ModelParams(seed)
        init_decoder(p, cfg, in_features, bundle.level_sizes)
    return p


def test_zero_input_and_zero_final_layer_gives_zero(toy_bundle):
    p = decoder_params(toy_bundle)
    td = decode_displacement(Tensor(np.zeros((1, 2, 2, 2, 2))), toy_bundle, p)
    assert td.shape == (42, 3) and np.all(td.data == 0)


def test_zero_final_layer_gives_zero_for_any_input(toy_bundle, rng):
    p = decoder_params(toy_bundle)
    td = decode_displacement(Tensor(rng.standard_normal(16)), toy_bundle, p)
    assert np.all(td.data == 0)


def test_output_vertex_count(toy_bundle, rng):
    p = decoder_params(toy_bundle)
    for _, t in p:
        t.data[...] = rng.standard_normal(t.shape)
    td = decode_displacement(Tensor(rng.standard_normal(16)), toy_bundle, p)
    assert td.shape == (toy_bundle.level_sizes[0], 3) and np.abs(td.data).max() > 0


def test_level_size_mismatch(toy_bundle, rng):
    other = build_template_bundle(icosphere(3, 0.5))
    p = decoder_params(other)
    with pytest.raises(TemplateError):
        decode_displacement(Tensor(rng.standard_normal(16)), toy_bundle, p)
    with pytest.raises(TemplateError):
        decode_displacement(Tensor(rng.standard_normal(8)), other, p)


def test_gradient_wrt_bottleneck(toy_bundle, rng):
    p = decoder_params(toy_bundle, dtype=np.float64)
    for _, t in p:
        t.data[...] = rng.uniform(-0.5, 0.5, t.shape)
    adjs = level_adjacencies(toy_bundle)
    gradcheck(lambda x: decode_displacement(x, toy_bundle, p, adjs).sum(), [rng.standard_normal(16)])


def test_gradient_wrt_final_weights(toy_bundle, rng):
    p = decoder_params(toy_bundle, dtype=np.float64)
    x4 = Tensor(rng.standard_normal(16))
    with precision(np.float64):
        decode_displacement(x4, toy_bundle, p).sum().backward()
    # zero-initialised last layer still receives gradient so T_d can leave zero
    assert np.abs(p["decoder.gc3.b"].grad).max() > 0


def test_default_latent_size():
    b = build_template_bundle(icosphere(3, 0.5))
    p = decoder_params(b, 128 * 8, cfg=DecoderConfig())
    assert p["decoder.fc2.w"].shape == (128, 512)
    assert p["decoder.fc3.w"].shape == (b.level_sizes[4] * 3, 128)


def test_compose_modes(rng):
    ts, tspe, td = (rng.standard_normal((42, 3)) for _ in range(3))
    with precision(np.float64):
        assert np.array_equal(compose_template("Ts", ts).data, ts)
        assert np.array_equal(compose_template("Tspe", ts, tspe).data, tspe)
        assert np.array_equal(compose_template("Td", ts, t_d=Tensor(td)).data, td)
        assert np.array_equal(compose_template("TspePlusTd", ts, tspe, Tensor(td)).data, tspe + td)
        assert np.array_equal(compose_template("Ta", ts, None, Tensor(np.zeros((42, 3)))).data, ts)


def test_compose_accepts_meshes(rng):
    m = icosphere(1)
    with precision(np.float64):
        assert np.array_equal(compose_template(TemplateMode.Ts, m).data, m.vertices)


def test_ta_linear_in_displacement(rng):
    ts, td = rng.standard_normal((42, 3)), rng.standard_normal((42, 3))
    with precision(np.float64):
        for a in (0.0, 0.5, -2.0, 3.25):
            out = compose_template("Ta", ts, None, Tensor(a * td)).data
            assert np.array_equal(out, ts + a * td)


def test_compose_missing_inputs():
    ts = np.zeros((4, 3))
    for mode in ("Td", "Ta", "TspePlusTd"):
        with pytest.raises(TemplateError):
            compose_template(mode, ts, ts)
    with pytest.raises(TemplateError):
        compose_template("Tspe", ts)


def test_needs_decoder():
    assert [m.value for m in TemplateMode if m.needs_decoder] == ["Td", "TspePlusTd", "Ta"]


def test_output_topology_matches_baseline(toy_bundle, rng):
    p = decoder_params(toy_bundle)
    td = decode_displacement(Tensor(rng.standard_normal(16)), toy_bundle, p)
    m = TriMesh(toy_bundle.levels[0].vertices + td.data, toy_bundle.levels[0].faces)
    assert np.array_equal(m.faces, toy_bundle.levels[0].faces)
