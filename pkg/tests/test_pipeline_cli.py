import csv
import json

import numpy as np
import pytest

from atmrn.cli import main
from atmrn.config import load_config
from atmrn.mesh import load_obj
from atmrn.metrics import MetricsReport
from atmrn.params import read_checkpoint
from atmrn.pipeline import (TABLE2_CELLS, ReconstructionModel, cmd_ablate, cmd_baseline_mc, cmd_eval,
                            cmd_reconstruct, load_template, make_template, train)
from atmrn.synth import Dataset, build_dataset

SMALL = ["arch.channels=[2,4,4,8,8]", "arch.latent=8", "arch.decoder_hidden=16", "arch.decoder_gcn_width=4",
         "arch.deformer_hidden=8", "epochs=2", "val_every=1", "eval_samples=200"]


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    build_dataset(root / "ds", n=5, seed=0, split_fractions=(0.6, 0.2, 0.2), dims=(16, 16, 16), subdivisions=3)
    make_template(root / "ds", root / "tpl", source="mean")
    cfg = load_config(None, SMALL + [f"dataset={root / 'ds'}", f"template={root / 'tpl'}"])
    return root, cfg


@pytest.fixture(scope="module")
def trained(world):
    root, cfg = world
    return train(cfg, root / "run_ta")


def test_specific_template_is_bit_exact_copy(world, tmp_path):
    root, _ = world
    ds = Dataset(root / "ds")
    a = make_template(ds, tmp_path / "spe", source="specific", index=0)
    assert np.array_equal(a.baseline.vertices, ds.samples("train")[0].gt_mesh.vertices)
    assert a.bundle.level_sizes == [642, 160, 80, 40, 20]


def test_template_bundle_reloads(world):
    root, _ = world
    a = load_template(root / "tpl")
    assert a.info["source"] == "mean" and a.info["dataset_hash"] == Dataset(root / "ds").hash
    assert np.array_equal(a.specific.faces, a.baseline.faces)


def test_untrained_model_starts_at_baseline(world):
    root, cfg = world
    assets = load_template(root / "tpl")
    model = ReconstructionModel(cfg, assets, (16, 16, 16))
    vol = Dataset(root / "ds").samples("test")[0].volume
    out = model.predict(vol)
    assert np.all(out["t_d"].vertices == 0)
    assert np.array_equal(out["t_a"].vertices, assets.baseline.vertices)
    assert all(np.array_equal(s.vertices, assets.baseline.vertices) for s in out["stages"])


def test_train_outputs(trained, world):
    root, cfg = world
    hist = trained["history"]
    assert [h["epoch"] for h in hist] == [1, 2]
    assert all(np.isfinite(h["loss"]) and "val_assd" in h for h in hist)
    assert all(h["decoder_grad_norm"] > 0 for h in hist)
    manifest = json.loads((root / "run_ta" / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.hash() and manifest["dataset_hash"] == Dataset(root / "ds").hash
    ck, _ = read_checkpoint(trained["best"])
    assert ck["config"] == json.loads(json.dumps(cfg.to_dict()))


def test_ts_checkpoint_has_no_decoder(world):
    root, cfg = world
    res = train(cfg.replace(template_mode="Ts", epochs=1), root / "run_ts")
    ck, _ = read_checkpoint(res["last"])
    names = [e["name"] for e in ck["entries"]]
    assert not any(n.startswith("decoder.") for n in names)
    assert any(n.startswith("deformer.") for n in names)
    assert all("decoder_grad_norm" not in h for h in res["history"])


def test_training_is_deterministic(world, trained):
    root, cfg = world
    again = train(cfg, root / "run_ta_again")
    strip = [{k: v for k, v in h.items() if k != "elapsed_s"} for h in trained["history"]]
    assert strip == [{k: v for k, v in h.items() if k != "elapsed_s"} for h in again["history"]]
    for name in ("best.bin", "last.bin"):
        a = (root / "run_ta" / "checkpoints" / name).read_bytes()
        assert a == (root / "run_ta_again" / "checkpoints" / name).read_bytes()


def test_eval_report(trained, world, tmp_path):
    root, cfg = world
    rep = cmd_eval(trained["best"], "test", tmp_path / "m", samples_per_mesh=500)
    assert rep.template_mode == "Ta" and rep.config == cfg.to_dict()
    assert rep.dataset_hash == Dataset(root / "ds").hash
    assert all(r["hd"] >= r["assd"] for r in rep.rows) and len(rep.rows) == 1
    again = cmd_eval(trained["best"], "test", tmp_path / "m2", samples_per_mesh=500)
    assert (tmp_path / "m.json").read_text() == (tmp_path / "m2.json").read_text()
    with pytest.raises(ValueError):
        cmd_eval(trained["best"], "nosuchsplit")


def test_reconstruct_round_trip(trained, world, tmp_path):
    root, _ = world
    ds = Dataset(root / "ds")
    entry = [e for e in ds.manifest["samples"] if e["split"] == "test"][0]
    res = cmd_reconstruct(trained["best"], root / "ds" / entry["volume"], tmp_path / "rec")
    assert set(res["paths"]) == {"t_a", "s1", "s2", "s3", "s4"}
    assert set(res["vertex_counts"].values()) == {642}
    faces = load_obj(res["paths"]["t_a"]).faces
    assert all(np.array_equal(load_obj(p).faces, faces) for p in res["paths"].values())


def test_reconstruct_dims_mismatch(trained, tmp_path):
    from atmrn.volume import Volume, save_volume

    save_volume(Volume(np.zeros((32, 32, 32))), tmp_path / "big")
    with pytest.raises(ValueError, match="divisible"):
        cmd_reconstruct(trained["best"], tmp_path / "big", tmp_path / "x")


def test_baseline_mc(world, tmp_path):
    root, _ = world
    rep = cmd_baseline_mc(root / "ds", "train", 0.5, tmp_path / "mc", samples_per_mesh=2000)
    assert rep.skipped == 0 and len(rep.rows) == 3
    assert all(r["assd"] <= 1.5 * np.sqrt(3) * 2 / 15 for r in rep.rows)
    assert set(json.loads((tmp_path / "mc.json").read_text())) == set(MetricsReport().to_dict())
    empty = cmd_baseline_mc(root / "ds", "train", 1.5)
    assert empty.skipped == 3 and empty.rows == []


def test_ablate_table_shape(world, tmp_path):
    root, cfg = world
    cfg = cfg.replace(epochs=1)
    res = cmd_ablate(cfg, tmp_path / "abl", seeds=(0,), samples_per_mesh=200)
    rows = list(csv.DictReader(open(tmp_path / "abl" / "ablation.csv")))
    assert [r["Methods"] for r in rows] == [c[0] for c in TABLE2_CELLS]
    assert list(rows[0]) == ["Methods", "Template", "ImgDec", "Segloss", "Avg ASSD", "Avg HD", "status"]
    assert all(r["status"] == "ok" for r in rows)
    ck = [read_checkpoint(p)[0] for p in sorted((tmp_path / "abl").glob("*/checkpoints/last.json"))]
    assert len(ck) == 7 and len({c["extra"]["dataset_hash"] for c in ck}) == 1
    assert res["dataset_hash"] == Dataset(root / "ds").hash


def test_cli_exit_codes(world, tmp_path, capsys):
    root, cfg = world
    base = ["train", str(tmp_path / "r"), "--quiet"] + sum([["--set", s] for s in SMALL], [])
    base += ["--set", f"dataset={root / 'ds'}", "--set", f"template={root / 'tpl'}", "--set", "epochs=1"]
    assert main(base) == 0
    assert main(base + ["--set", "template_mode=Nope"]) == 2
    assert main(base + ["--set", "loss_weights.chamfer=.nan"]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_cli_dataset_template_eval(tmp_path, capsys):
    assert main(["make-dataset", str(tmp_path / "d"), "-n", "4", "--split", "0.5,0.25,0.25", "--dims", "16",
                 "--subdivisions", "3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["splits"] == {"train": 2, "val": 1, "test": 1}
    assert main(["make-template", str(tmp_path / "d"), str(tmp_path / "t"), "--factors", "4,2,2,2"]) == 0
    assert json.loads(capsys.readouterr().out)["level_sizes"][0] == 642
    assert main(["make-template", str(tmp_path / "d"), str(tmp_path / "t2"), "--factors", "3,2"]) == 2
    assert main(["baseline-mc", str(tmp_path / "d"), str(tmp_path / "mc"), "--samples", "500"]) == 0
    man = json.loads((tmp_path / "mc" / "manifest.json").read_text())
    assert man["commands"][0]["command"] == "baseline-mc"
