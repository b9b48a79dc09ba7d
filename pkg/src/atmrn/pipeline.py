"""End-to-end orchestration: templates, training, evaluation, reconstruction, ablations."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as M
from .config import RunConfig
from .decimate import DESK_FACTORS, TemplateBundle, build_template_bundle, load_bundle, save_bundle
from .deformer import deform, init_deformer
from .losses import MeshTopology, SurfaceTarget, chamfer, mesh_loss, seg_cross_entropy
from .mesh import TriMesh, connected_components, load_obj, mean_template, save_obj, split_components, taubin_smooth
from .params import Adam, ModelParams, config_hash, load_into, read_checkpoint, save_checkpoint
from .synth import Dataset
from .template import TemplateMode, compose_template, decode_displacement, init_decoder, level_adjacencies
from .unet import init_unet, pyramid_widths, unet_forward
from .volume import Volume, load_volume, marching_cubes

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when the training loss stops being finite."""


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Single-threaded BLAS so repeated runs are bit-identical."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _f32_exact(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TemplateAssets:
    bundle: TemplateBundle
    specific: TriMesh | None
    info: dict
    path: str = ""

    @property
    def baseline(self) -> TriMesh:
        return self.bundle.baseline

    def structure_labels(self) -> np.ndarray:
        return connected_components(self.baseline)


def _spherize(mesh: TriMesh) -> TriMesh:
    """Project each connected component radially onto its mean-radius sphere."""
    v = mesh.vertices.copy()
    labels = connected_components(mesh)
    for k in range(labels.max() + 1):
        m = labels == k
        c = v[m].mean(axis=0)
        d = v[m] - c
        r = np.linalg.norm(d, axis=1, keepdims=True)
        v[m] = c + d / r * r.mean()
    return TriMesh(v, mesh.faces)


def make_template(dataset, out_dir, source: str = "mean", index: int = 0, smooth_iters: int = 0,
                  factors=DESK_FACTORS) -> TemplateAssets:
    """Build the baseline from the training meshes, decimate it, and write a bundle."""
    ds = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    train = ds.samples("train")
    if not train:
        raise ValueError("dataset has no training samples")
    meshes = [s.gt_mesh for s in train]
    if source == "mean":
        base = mean_template(meshes)
        if np.allclose(base.vertices, 0.0):
            log.warning("mean template collapsed to the origin (symmetric training set)")
    elif source == "sphere":
        base = _spherize(mean_template(meshes))
    elif source in ("specific", "smoothed"):
        if not 0 <= index < len(meshes):
            raise ValueError(f"specific index {index} out of range (0..{len(meshes) - 1})")
        base = meshes[index].copy()
    else:
        raise ValueError(f"unknown template source {source!r}")
    if smooth_iters:
        base = taubin_smooth(base, smooth_iters)
    base = TriMesh(_f32_exact(base.vertices), base.faces)
    bundle = build_template_bundle(base, factors)
    specific = TriMesh(_f32_exact(meshes[index].vertices), meshes[index].faces)
    info = {"source": source, "index": index, "smooth_iters": smooth_iters, "dataset_hash": ds.hash,
            "level_sizes": bundle.level_sizes}
    d = save_bundle(bundle, out_dir, extra=info)
    save_obj(specific, Path(d) / "specific.obj")
    return TemplateAssets(bundle, specific, info, str(d))


def load_template(path) -> TemplateAssets:
    bundle, info = load_bundle(path)
    sp = Path(path) / "specific.obj"
    return TemplateAssets(bundle, load_obj(sp) if sp.exists() else None, info, str(path))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class ReconstructionModel:
    """Feature extractor, optional displacement decoder, and staged deformer."""

    def __init__(self, config: RunConfig, assets: TemplateAssets, in_dims):
        self.config = config
        self.assets = assets
        self.in_dims = tuple(int(d) for d in in_dims)
        self.mode = config.mode
        seg_classes = (assets_structures(assets) + 1) if config.seg_loss else 0
        if config.seg_loss and not config.image_decoder:
            raise ValueError("the segmentation head sits on X8 and needs the image decoder")
        self.unet_cfg = config.arch.unet(config.image_decoder, seg_classes)
        self.dec_cfg = config.arch.decoder()
        self.def_cfg = config.arch.deformer()
        self.params = ModelParams(config.seed, self.arch_hash())
        init_unet(self.params, self.unet_cfg)
        if self.mode.needs_decoder:
            bottleneck = self.unet_cfg.channels[4] * int(np.prod([d // 16 for d in self.in_dims]))
            init_decoder(self.params, self.dec_cfg, bottleneck, assets.bundle.level_sizes)
        init_deformer(self.params, self.def_cfg, sum(pyramid_widths(self.unet_cfg)))
        self.adjs = level_adjacencies(assets.bundle)
        self.topo = MeshTopology.of(assets.baseline)
        if self.mode in (TemplateMode.Tspe, TemplateMode.TspePlusTd):
            if assets.specific is None:
                raise ValueError("template bundle has no specific mesh")
            if not np.array_equal(assets.specific.faces, assets.baseline.faces):
                raise ValueError("specific template does not share the baseline topology")

    def arch_description(self) -> dict:
        c = self.config
        return {"arch": c.to_dict()["arch"], "mode": c.template_mode, "image_decoder": c.image_decoder,
                "seg_loss": c.seg_loss, "in_dims": list(self.in_dims),
                "level_sizes": self.assets.bundle.level_sizes}

    def arch_hash(self) -> str:
        return config_hash(self.arch_description())

    def forward(self, volume, training: bool = True) -> dict:
        vox = volume.voxels if isinstance(volume, Volume) else np.asarray(volume)
        if tuple(vox.shape) != self.in_dims:
            raise ValueError(f"volume dims {vox.shape} do not match the model's {self.in_dims} "
                             f"(each extent must be divisible by 16)")
        pyr, seg = unet_forward(vox, self.params, self.unet_cfg, training)
        t_d = None
        if self.mode.needs_decoder:
            t_d = decode_displacement(pyr.encoder[4], self.assets.bundle, self.params, self.adjs)
        t_a = compose_template(self.mode, self.assets.baseline, self.assets.specific, t_d)
        trace = deform(t_a, self.assets.baseline.faces, self.adjs[0], pyr.maps, self.params,
                       self.def_cfg, training)
        return {"pyramid": pyr, "seg": seg, "t_d": t_d, "t_a": t_a, "trace": trace}

    def predict(self, volume) -> dict:
        out = self.forward(volume, training=False)
        faces = self.assets.baseline.faces
        return {"t_a": TriMesh(out["t_a"].data, faces),
                "t_d": TriMesh(out["t_d"].data, faces) if out["t_d"] is not None else None,
                "stages": out["trace"].meshes()}


def assets_structures(assets: TemplateAssets) -> int:
    return int(assets.structure_labels().max()) + 1


def _optimizer(config: RunConfig, params: ModelParams) -> Adam:
    return Adam(params, lr=config.lr_rest, betas=config.betas, eps=config.adam_eps,
                groups={"unet.": config.lr_feature_extractor})


def load_model(checkpoint) -> tuple[ReconstructionModel, dict]:
    manifest, _ = read_checkpoint(checkpoint)
    cfg = RunConfig(**manifest["config"])
    extra = manifest["extra"]
    assets = load_template(extra["template_path"])
    model = ReconstructionModel(cfg, assets, extra["in_dims"])
    load_into(checkpoint, model.params)
    return model, manifest


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _targets(samples, n_points: int) -> dict:
    out = {}
    for s in samples:
        rng = np.random.default_rng(s.seed)
        out[s.id] = SurfaceTarget.sample(s.gt_mesh, n_points, rng)
    return out


def _seg_labels(sample) -> np.ndarray:
    return np.asarray(sample.gt_labels, dtype=np.int64)


def evaluate(model: ReconstructionModel, samples, samples_per_mesh: int = 10_000, seed: int = 0,
             report: M.MetricsReport | None = None) -> M.MetricsReport:
    """Surface metrics of the final-stage mesh against each ground-truth mesh."""
    report = report or M.MetricsReport(template_mode=model.config.template_mode,
                                       config_hash=model.config.hash(), config=model.config.to_dict())
    labels = model.assets.structure_labels()
    for s in samples:
        pred = model.predict(s.volume)["stages"][-1]
        preds = split_components(pred, labels)
        gts = s.structure_meshes()
        if len(preds) != len(gts):
            raise ValueError(f"{s.id}: template has {len(preds)} structures, ground truth {len(gts)}")
        for k, (p, g) in enumerate(zip(preds, gts)):
            report.add(s.id, f"structure{k}", M.surface_metrics(p, g, samples_per_mesh, seed))
    return report


def train(config: RunConfig, run_dir, dataset: Dataset | None = None, assets: TemplateAssets | None = None,
          log_fn=None) -> dict:
    """Train one model; returns the history and best checkpoint path."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ds = dataset or Dataset(config.dataset)
    assets = assets or load_template(config.template)
    train_s = ds.samples("train")
    val_s = ds.samples("val")
    if not train_s:
        raise ValueError("no training samples")
    with strict_mode(config.strict):
        model = ReconstructionModel(config, assets, train_s[0].volume.dims)
        opt = _optimizer(config, model.params)
        n_pts = config.gt_sample_factor * assets.baseline.n_vertices
        targets = _targets(train_s + val_s, n_pts)
        rng = np.random.default_rng(config.seed)
        history = []
        best = (math.inf, None)
        extra = {"dataset_hash": ds.hash, "template_path": str(Path(assets.path).resolve()) if assets.path else "",
                 "in_dims": list(model.in_dims)}
        log_path = run_dir / "train_log.jsonl"
        log_path.write_text("")
        t0 = time.perf_counter()
        for epoch in range(1, config.epochs + 1):
            sums = {"loss": 0.0, "chamfer": 0.0, "laplacian": 0.0, "normal": 0.0, "edge": 0.0,
                    "seg": 0.0, "chamfer_final": 0.0}
            for i in rng.permutation(len(train_s)):
                s = train_s[i]
                model.params.zero_grad()
                out = model.forward(s.volume, training=True)
                tgt = targets[s.id]
                loss, terms = mesh_loss(out["trace"].stages, model.topo, tgt, config.loss_weights)
                seg_val = 0.0
                if config.seg_loss:
                    ce = seg_cross_entropy(out["seg"], _seg_labels(s))
                    seg_val = float(ce.data)
                    loss = loss + ce * config.seg_weight
                lv = float(loss.data)
                if not math.isfinite(lv):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, sample {s.id}: terms {terms}, seg {seg_val}")
                loss.backward()
                opt.step()
                sums["loss"] += lv
                for k, v in terms.items():
                    sums[k] += v
                sums["seg"] += seg_val
                sums["chamfer_final"] += float(chamfer(out["trace"].stages[-1].detach(), tgt).data)
            rec = {"epoch": epoch, **{k: v / len(train_s) for k, v in sums.items()}}
            dec_norms = [v for k, v in model.params.grad_norms().items() if k.startswith("decoder.")]
            if dec_norms:
                rec["decoder_grad_norm"] = float(np.sqrt(np.sum(np.square(dec_norms))))
            if val_s and (epoch % config.val_every == 0 or epoch == config.epochs):
                vloss = 0.0
                for s in val_s:
                    o = model.forward(s.volume, training=False)
                    vloss += float(mesh_loss(o["trace"].stages, model.topo, targets[s.id], config.loss_weights)[0].data)
                rep = evaluate(model, val_s, config.eval_samples, seed=0)
                rec["val_loss"] = vloss / len(val_s)
                rec["val_assd"] = rep.summary()["average"]["assd"]
                if rec["val_assd"] < best[0]:
                    p, _ = save_checkpoint(run_dir / "checkpoints" / "best", model.params, opt,
                                           config.to_dict(), {**extra, "epoch": epoch})
                    best = (rec["val_assd"], p)
            rec["elapsed_s"] = round(time.perf_counter() - t0, 3)
            history.append(rec)
            with open(log_path, "a") as fh:
                fh.write(json.dumps({k: v for k, v in rec.items() if k != "elapsed_s"}, sort_keys=True) + "\n")
            if log_fn:
                log_fn(rec)
        last, _ = save_checkpoint(run_dir / "checkpoints" / "last", model.params, opt, config.to_dict(),
                                  {**extra, "epoch": config.epochs})
    best_path = best[1] or last
    manifest = {"config": config.to_dict(), "config_hash": config.hash(), "dataset_hash": ds.hash,
                "template": assets.info, "best_checkpoint": str(best_path), "last_checkpoint": str(last),
                "epochs": config.epochs}
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return {"history": history, "best": str(best_path), "last": str(last), "model": model}


# ---------------------------------------------------------------------------
# eval / reconstruct / baselines
# ---------------------------------------------------------------------------

def cmd_eval(checkpoint, split: str = "test", out_prefix=None, dataset=None, samples_per_mesh: int = 10_000):
    model, manifest = load_model(checkpoint)
    ds = Dataset(dataset or model.config.dataset)
    if manifest["extra"].get("dataset_hash") not in (None, ds.hash):
        log.warning("dataset hash differs from the one used for training")
    samples = ds.samples(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    with strict_mode(model.config.strict):
        rep = M.MetricsReport(template_mode=model.config.template_mode, config_hash=model.config.hash(),
                              config=model.config.to_dict(), dataset_hash=ds.hash)
        evaluate(model, samples, samples_per_mesh, seed=0, report=rep)
    if out_prefix:
        rep.save(out_prefix)
    return rep


def cmd_reconstruct(checkpoint, volume_path, out_prefix) -> dict:
    model, _ = load_model(checkpoint)
    vol = load_volume(volume_path)
    if tuple(vol.dims) != model.in_dims:
        raise ValueError(f"volume dims {vol.dims} do not match the model's {model.in_dims}; "
                         f"extents must be divisible by 16")
    with strict_mode(model.config.strict):
        pred = model.predict(vol)
    out_prefix = Path(out_prefix)
    paths = {"t_a": save_obj(pred["t_a"], f"{out_prefix}_template.obj")}
    for k, m in enumerate(pred["stages"], 1):
        paths[f"s{k}"] = save_obj(m, f"{out_prefix}_stage{k}.obj")
    counts = {k: load_obj(p).n_vertices for k, p in paths.items()}
    return {"paths": {k: str(p) for k, p in paths.items()}, "vertex_counts": counts}


def cmd_baseline_mc(dataset, split: str = "test", iso: float = 0.5, out_prefix=None,
                    samples_per_mesh: int = 10_000) -> M.MetricsReport:
    """Marching cubes on ground-truth label grids, scored against ground-truth meshes."""
    ds = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    rep = M.MetricsReport(template_mode="marching_cubes", config={"iso": iso, "split": split},
                          config_hash=config_hash({"iso": iso, "split": split}), dataset_hash=ds.hash)
    for s in ds.samples(split):
        gts = s.structure_meshes()
        preds = []
        for k in range(len(gts)):
            mask = (s.gt_labels == k + 1) if len(gts) > 1 else (s.gt_labels > 0)
            preds.append(marching_cubes(Volume(mask.astype(np.float32), s.volume.transform), iso))
        if any(p.n_faces == 0 for p in preds):
            rep.skipped += 1
            continue
        for k, (p, g) in enumerate(zip(preds, gts)):
            rep.add(s.id, f"structure{k}", M.surface_metrics(p, g, samples_per_mesh, 0))
    if rep.skipped:
        log.warning("baseline-mc: %d samples skipped (empty isosurface)", rep.skipped)
    if out_prefix:
        rep.save(out_prefix)
    return rep


# ---------------------------------------------------------------------------
# ablation matrix
# ---------------------------------------------------------------------------

TABLE2_CELLS = (
    ("#v1", "Ta", False, False),
    ("#v2", "Ta", True, True),
    ("#v3", "Tspe", True, False),
    ("#v4", "Ts", True, False),
    ("#v5", "Td", True, False),
    ("#v6", "TspePlusTd", True, False),
    ("our", "Ta", True, False),
)


def cmd_ablate(config: RunConfig, out_dir, seeds=(0, 1, 2), cells=TABLE2_CELLS, samples_per_mesh: int = 4000,
               log_fn=None) -> dict:
    """Train/evaluate every cell for every seed; writes ``ablation.csv`` and ``ablation.json``."""
    out_dir = Path(out_dir)
    ds = Dataset(config.dataset)
    assets = load_template(config.template)
    test = ds.samples("test")
    rows, details = [], []
    for name, mode, imgdec, segloss in cells:
        per_seed = []
        status = "ok"
        for seed in seeds:
            cfg = config.replace(template_mode=mode, image_decoder=imgdec, seg_loss=segloss, seed=seed)
            cell_dir = out_dir / f"{name.strip('#')}_{mode}_seed{seed}"
            try:
                t0 = time.perf_counter()
                res = train(cfg, cell_dir, ds, assets)
                model, _ = load_model(res["best"])
                with strict_mode(cfg.strict):
                    rep = evaluate(model, test, samples_per_mesh, seed=0)
                avg = rep.summary()["average"]
                per_seed.append({"seed": seed, "assd": avg["assd"], "hd": avg["hd"],
                                 "train_s": round(time.perf_counter() - t0, 1)})
            except Exception as e:  # recorded, table still emitted
                log.exception("ablation cell %s seed %d failed", name, seed)
                per_seed.append({"seed": seed, "error": repr(e)})
                status = "failed"
            if log_fn:
                log_fn(name, mode, per_seed[-1])
        ok = [r for r in per_seed if "assd" in r]
        rows.append({
            "Methods": name, "Template": mode, "ImgDec": "yes" if imgdec else "-",
            "Segloss": "yes" if segloss else "-",
            "Avg ASSD": float(np.median([r["assd"] for r in ok])) if ok else float("nan"),
            "Avg HD": float(np.median([r["hd"] for r in ok])) if ok else float("nan"),
            "status": status,
        })
        details.append({"cell": name, "mode": mode, "seeds": per_seed})
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    result = {"rows": rows, "details": details, "dataset_hash": ds.hash, "config": config.to_dict(),
              "seeds": list(seeds)}
    (out_dir / "ablation.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    return result
