"""Command-line entry point: ``atmrn <subcommand> ...``.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure (non-finite loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .decimate import DESK_FACTORS, FULL_FACTORS

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _factors(text: str):
    if text == "desk":
        return DESK_FACTORS
    if text == "full":
        return FULL_FACTORS
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"factors must be 'desk', 'full' or four comma-separated integers, got {text!r}")
    if len(vals) != 4 or min(vals) < 2:
        raise ConfigError(f"factors need four integers >= 2, got {text!r}")
    return vals


def _dims(text: str):
    vals = tuple(int(v) for v in text.lower().replace("x", ",").split(","))
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3:
        raise ConfigError(f"dims must be N or DxHxW, got {text!r}")
    return vals


def _write_manifest(run_dir: Path, command: str, payload: dict):
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "manifest.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data.setdefault("commands", []).append({"command": command, **payload})
    path.write_text(json.dumps(data, indent=1, sort_keys=True, default=str))


def _config(args):
    return load_config(args.config, args.set)


def cmd_make_dataset(args):
    from .synth import build_dataset

    fr = tuple(float(v) for v in args.split.split(","))
    if len(fr) != 3:
        raise ConfigError("--split needs three fractions")
    m = build_dataset(args.out, n=args.n, seed=args.seed, split_fractions=fr, dims=_dims(args.dims),
                      bumpiness=args.bumpiness, mode_count=args.modes, blur=args.blur,
                      subdivisions=args.subdivisions, structures=args.structures)
    counts = {}
    for s in m["samples"]:
        counts[s["split"]] = counts.get(s["split"], 0) + 1
    print(json.dumps({"hash": m["hash"], "splits": counts}))


def cmd_make_template(args):
    from .pipeline import make_template

    a = make_template(args.dataset, args.out, source=args.source, index=args.index,
                      smooth_iters=args.smooth_iters, factors=_factors(args.factors))
    print(json.dumps({"path": a.path, "level_sizes": a.bundle.level_sizes}))


def cmd_train(args):
    from .pipeline import train

    cfg = _config(args)
    if not cfg.dataset or not cfg.template:
        raise ConfigError("config needs both 'dataset' and 'template'")
    run_dir = Path(args.run_dir)

    def show(rec):
        parts = [f"epoch {rec['epoch']:4d}", f"loss {rec['loss']:.5f}", f"chamfer {rec['chamfer_final']:.6f}"]
        if "val_assd" in rec:
            parts.append(f"val_assd {rec['val_assd']:.5f}")
        print("  ".join(parts), flush=True)

    res = train(cfg, run_dir, log_fn=None if args.quiet else show)
    print(json.dumps({"best": res["best"], "last": res["last"]}))


def cmd_eval(args):
    from .pipeline import cmd_eval as run

    out = Path(args.out)
    rep = run(args.checkpoint, args.split, out / "metrics", dataset=args.dataset, samples_per_mesh=args.samples)
    _write_manifest(out, "eval", {"checkpoint": args.checkpoint, "split": args.split,
                                  "config_hash": rep.config_hash, "dataset_hash": rep.dataset_hash})
    print(json.dumps(rep.summary()["average"]))


def cmd_reconstruct(args):
    from .pipeline import cmd_reconstruct as run

    res = run(args.checkpoint, args.volume, args.out)
    for k, n in res["vertex_counts"].items():
        print(f"{k}: {n} vertices  {res['paths'][k]}")


def cmd_baseline_mc(args):
    from .pipeline import cmd_baseline_mc as run

    out = Path(args.out)
    rep = run(args.dataset, args.split, args.iso, out / "metrics", samples_per_mesh=args.samples)
    _write_manifest(out, "baseline-mc", {"dataset": args.dataset, "iso": args.iso, "skipped": rep.skipped,
                                         "dataset_hash": rep.dataset_hash})
    print(json.dumps({"skipped": rep.skipped, **(rep.summary().get("average") or {})}))


def cmd_ablate(args):
    from .pipeline import TABLE2_CELLS, cmd_ablate as run

    cfg = _config(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    cells = TABLE2_CELLS
    if args.cells:
        wanted = set(args.cells.split(","))
        cells = tuple(c for c in TABLE2_CELLS if c[0].strip("#") in wanted or c[0] in wanted)
        if not cells:
            raise ConfigError(f"no ablation cells match {args.cells!r}")
    res = run(cfg, args.out, seeds=seeds, cells=cells, samples_per_mesh=args.samples,
              log_fn=lambda n, m, r: print(n, m, json.dumps(r), flush=True))
    _write_manifest(Path(args.out), "ablate", {"config_hash": cfg.hash(), "dataset_hash": res["dataset_hash"],
                                               "seeds": list(seeds)})
    for r in res["rows"]:
        print(f"{r['Methods']:5s} {r['Template']:11s} {r['ImgDec']:4s} {r['Segloss']:4s} "
              f"{r['Avg ASSD']:.5f} {r['Avg HD']:.5f} {r['status']}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atmrn", description="Adaptive-template mesh reconstruction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-dataset", help="generate a synthetic shape dataset")
    s.add_argument("out")
    s.add_argument("-n", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="0.8,0.1,0.1")
    s.add_argument("--dims", default="32")
    s.add_argument("--bumpiness", type=float, default=0.25)
    s.add_argument("--modes", type=int, default=6)
    s.add_argument("--blur", type=float, default=0.0)
    s.add_argument("--subdivisions", type=int, default=4)
    s.add_argument("--structures", type=int, choices=(1, 4), default=1)
    s.set_defaults(fn=cmd_make_dataset)

    s = sub.add_parser("make-template", help="build the baseline template bundle")
    s.add_argument("dataset")
    s.add_argument("out")
    s.add_argument("--source", choices=("mean", "specific", "smoothed", "sphere"), default="mean")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--smooth-iters", type=int, default=0)
    s.add_argument("--factors", default="desk", help="'desk', 'full', or e.g. 4,2,2,2")
    s.set_defaults(fn=cmd_make_template)

    for name, fn, helptext in (("train", cmd_train, "train one model"),
                               ("ablate", cmd_ablate, "run the template/flag ablation matrix")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", "-c")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        if name == "train":
            s.add_argument("run_dir")
            s.add_argument("--quiet", action="store_true")
        else:
            s.add_argument("out")
            s.add_argument("--seeds", default="0,1,2")
            s.add_argument("--cells", default="", help="comma-separated subset, e.g. v4,v5,our")
            s.add_argument("--samples", type=int, default=4000)
        s.set_defaults(fn=fn)

    s = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    s.add_argument("checkpoint")
    s.add_argument("out")
    s.add_argument("--split", default="test")
    s.add_argument("--dataset")
    s.add_argument("--samples", type=int, default=10_000)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("reconstruct", help="reconstruct meshes from one volume")
    s.add_argument("checkpoint")
    s.add_argument("volume")
    s.add_argument("out", help="output prefix")
    s.set_defaults(fn=cmd_reconstruct)

    s = sub.add_parser("baseline-mc", help="marching cubes on ground-truth labels")
    s.add_argument("dataset")
    s.add_argument("out")
    s.add_argument("--split", default="test")
    s.add_argument("--iso", type=float, default=0.5)
    s.add_argument("--samples", type=int, default=10_000)
    s.set_defaults(fn=cmd_baseline_mc)
    return p


def main(argv=None) -> int:
    from .pipeline import NumericalError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
