import pytest

from atmrn.config import ConfigError, RunConfig, load_config


def test_defaults():
    c = RunConfig()
    assert c.lr_feature_extractor == 1e-4 and c.lr_rest == 5e-5 and c.batch_size == 1
    assert c.arch.latent == 128
    lw = c.loss_weights
    assert (lw.chamfer, lw.laplacian, lw.normal, lw.edge) == (5, 0.1, 0.001, 5)
    assert c.template_mode == "Ta" and c.image_decoder and not c.seg_loss and c.strict


def test_yaml_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("epochs: 7\narch:\n  channels: [4, 8, 8, 16, 16]\nloss_weights:\n  edge: 2.5\n")
    c = load_config(p, ["template_mode=Ts", "arch.latent=32", "seed=4"])
    assert c.epochs == 7 and c.arch.channels == (4, 8, 8, 16, 16) and c.loss_weights.edge == 2.5
    assert c.loss_weights.chamfer == 5.0
    assert c.template_mode == "Ts" and c.arch.latent == 32 and c.seed == 4


def test_hash_round_trip():
    c = load_config(None, ["epochs=3"])
    assert RunConfig(**c.to_dict()).hash() == c.hash()
    assert c.replace(seed=1).hash() != c.hash()
    assert c.replace(**{"arch.latent": 64}).arch.latent == 64


@pytest.mark.parametrize("ov", [["nope=1"], ["arch.nope=1"], ["template_mode=Tx"], ["batch_size=2"],
                                ["epochs"], ["arch.channels=[1,2]"]])
def test_config_errors(ov):
    with pytest.raises(ConfigError):
        load_config(None, ov)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1,\n")
    with pytest.raises(ConfigError):
        load_config(bad)
