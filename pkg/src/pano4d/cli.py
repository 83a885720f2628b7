"""Command-line entry point wiring all modules.

Subcommands: generate, train, train-tam, infer, eval, report. Every command
takes ``--set dot.path=value`` config overrides and writes a run manifest.
Exit codes: 0 ok, 2 config error, 3 I/O/format error, 4 training divergence,
5 data mismatch.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import config as cfgmod
from . import metrics as mx
from . import model as mdl
from . import report as rpt
from . import supervision as sup
from . import synthworld as sw
from . import tracking as trk
from .autodiff import Tensor, load_params, save_params
from .errors import ConfigError, DataMismatchError, FormatError, TrainingDiverged

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_MISMATCH = 5


def _load_config(args) -> cfgmod.RunConfig:
    if args.config:
        doc = cfgmod.config_to_dict(cfgmod.load_config(args.config))
    else:
        doc = cfgmod.config_to_dict(cfgmod.RunConfig())
    doc = cfgmod.apply_overrides(doc, args.set or [])
    return cfgmod.config_from_dict(doc)


def _write_manifest(out_dir: str, command: str, cfg: cfgmod.RunConfig,
                    seed: int, input_hash: str, outputs: list[str],
                    started: float) -> None:
    doc = cfgmod.config_to_dict(cfg)
    manifest = {
        "command": command,
        "version": __version__,
        "config_hash": cfgmod.config_hash(doc),
        "config": doc,
        "seed": seed,
        "input_hash": input_hash,
        "outputs": sorted(os.path.relpath(p, out_dir) for p in outputs),
        "elapsed_seconds": time.time() - started,
    }
    tmp = os.path.join(out_dir, "run_manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp, os.path.join(out_dir, "run_manifest.json"))


def _dataset_scene_dirs(dataset_dir: str) -> list[str]:
    index = os.path.join(dataset_dir, "dataset.json")
    if os.path.exists(index):
        with open(index, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return [os.path.join(dataset_dir, s) for s in doc["scenes"]]
    if os.path.exists(os.path.join(dataset_dir, "manifest.json")):
        return [dataset_dir]
    raise FormatError(f"{dataset_dir}: neither dataset.json nor manifest.json found")


def _dataset_hash(dataset_dir: str) -> str:
    files = sorted(glob.glob(os.path.join(dataset_dir, "**", "*"), recursive=True))
    return cfgmod.hash_tree([f for f in files if os.path.isfile(f)])


def _load_model_params(base: str) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in load_params(base).items()}


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    os.makedirs(args.out, exist_ok=True)
    scene_names = []
    outputs = []
    for i in range(cfg.data.num_scenes):
        scene = sw.generate_scene(cfg.data.scene, seed=seed + i)
        name = f"scene_{i:04d}"
        sw.write_dataset(scene, os.path.join(args.out, name))
        scene_names.append(name)
        outputs.append(os.path.join(args.out, name, "manifest.json"))
    index = {"format": "pano4d-dataset-v1", "seed": seed, "scenes": scene_names,
             "config_hash": cfgmod.config_hash(cfgmod.config_to_dict(cfg))}
    tmp = os.path.join(args.out, "dataset.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=1)
    os.replace(tmp, os.path.join(args.out, "dataset.json"))
    _write_manifest(args.out, "generate", cfg, seed, "", outputs, started)
    print(f"generated {len(scene_names)} scene(s) under {args.out}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    scenes = [sw.read_dataset(d) for d in _dataset_scene_dirs(args.dataset)]
    os.makedirs(args.out, exist_ok=True)
    cfg.training.seed = cfg.seed
    params, rows = sup.train_stage1(scenes, cfg.model, cfg.training)
    base = os.path.join(args.out, "stage1")
    save_params(params, base)
    log_path = os.path.join(args.out, "train_log.csv")
    rpt.write_train_log(log_path, rows)
    _write_manifest(args.out, "train", cfg, cfg.seed,
                    _dataset_hash(args.dataset),
                    [base + ".bin", base + ".idx", log_path], started)
    print(f"stage-1 checkpoint at {base}.bin ({len(rows)} steps)")
    return 0


def cmd_train_tam(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    if not os.path.exists(args.stage1 + ".idx"):
        raise ConfigError(f"stage-2 requires a stage-1 checkpoint: {args.stage1}.idx")
    params = _load_model_params(args.stage1)
    scenes = [sw.read_dataset(d) for d in _dataset_scene_dirs(args.dataset)]
    os.makedirs(args.out, exist_ok=True)

    per_scene_tracklets: dict[tuple[int, int], list] = {}

    def infer(si: int, t: int):
        key = (si, t)
        if key not in per_scene_tracklets:
            scene = scenes[si]
            assembled = mdl.infer_clip(params, scene.clip(t), scene.images[t],
                                       scene.cameras, cfg.model, scene.config)
            per_scene_tracklets[key] = assembled.tracklets
        return per_scene_tracklets[key]

    scenes_frames = [
        (f"scene{si}", scene.num_frames,
         {f: scene.frames[f].track_ids.astype(np.int64)
          for f in range(scene.num_frames)})
        for si, scene in enumerate(scenes)
    ]
    tam_params, losses = trk.train_stage2(
        infer, scenes_frames, cfg.model.d, gaps=cfg.tam.gaps, lr=cfg.tam.lr,
        epochs=cfg.tam.epochs, batch_size=cfg.tam.batch_size, seed=cfg.seed)
    base = os.path.join(args.out, "tam")
    save_params(tam_params, base)
    log_rows = [{"step": i, "l_ce": v, "l_dice": 0.0, "l_cls": 0.0,
                 "l_pf": 0.0, "total": v} for i, v in enumerate(losses)]
    log_path = os.path.join(args.out, "tam_log.csv")
    rpt.write_train_log(log_path, log_rows)
    _write_manifest(args.out, "train-tam", cfg, cfg.seed,
                    _dataset_hash(args.dataset),
                    [base + ".bin", base + ".idx", log_path], started)
    print(f"TAM checkpoint at {base}.bin ({len(losses)} steps)")
    return 0


def cmd_infer(args) -> int:
    started = time.time()
    cfg = _load_config(args)
    params = _load_model_params(args.stage1)
    tam_params = None
    if not args.baseline_iou:
        if args.tam is None:
            raise ConfigError("infer: --tam checkpoint required unless --baseline-iou")
        tam_params = _load_model_params(args.tam)
    scene = sw.read_dataset(args.scene)
    os.makedirs(args.out, exist_ok=True)

    clip_fn = mdl.scene_clip_inference(params, scene, cfg.model)
    frames = trk.run_sequence(
        clip_fn, scene.num_frames,
        [f.num_points for f in scene.frames],
        tau=cfg.tracking.tau, t_hist=cfg.tracking.t_hist,
        baseline_iou=args.baseline_iou, tam_params=tam_params)
    trk.write_predictions(args.out, frames, scene_ref=os.path.abspath(args.scene))
    outputs = [os.path.join(args.out, f"pred_{t}.bin") for t in range(len(frames))]
    _write_manifest(args.out, "infer", cfg, cfg.seed, _dataset_hash(args.scene),
                    outputs + [os.path.join(args.out, "pred_manifest.json")],
                    started)
    print(f"wrote {len(frames)} prediction frame(s) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred_frames = trk.read_predictions(args.pred)
    scene = sw.read_dataset(args.gt)
    if len(pred_frames) != scene.num_frames:
        raise DataMismatchError(
            f"{len(pred_frames)} prediction frames vs {scene.num_frames} in {args.gt}")
    table = mx.ClassTable.from_palette(scene.config.classes)
    pred = mx.Labeling([mx.FrameLabels(c, t) for c, t in pred_frames])
    gt = mx.Labeling([
        mx.FrameLabels(f.class_ids.astype(np.int64), f.track_ids.astype(np.int64))
        for f in scene.frames])
    report = mx.evaluate(pred, gt, table)

    out_dir = args.out or args.pred
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "report.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    header, row = report.csv_row()
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", encoding="ascii") as fh:
        fh.write(",".join(header) + "\n")
        fh.write(",".join(repr(v) for v in row) + "\n")
    if args.oracle:
        check = mx.oracle_check(pred, gt, table)
        print(f"oracle max discrepancy: {check['max']:.3e}")
        if check["max"] > 1e-9:
            print("oracle mismatch above 1e-9", file=sys.stderr)
            return EXIT_MISMATCH
    print(f"PQ {report.means['pq']:.4f}  LSTQ {report.means['lstq']:.4f}  "
          f"PAT {report.means['pat']:.4f} -> {json_path}")
    return 0


def cmd_report(args) -> int:
    written = rpt.write_report(args.out, args.train_log or [], args.metrics or [])
    print(f"wrote {', '.join(written)}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pano4d",
        description="Desk-scale multimodal 4D panoptic segmentation and tracking.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (defaults used if omitted)")
        p.add_argument("--set", action="append", metavar="PATH=VALUE",
                       help="override a config value by dot path")

    p = sub.add_parser("generate", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="stage-1 training (panoptic network)")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-tam", help="stage-2 training (association head)")
    common(p)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint base path")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train_tam)

    p = sub.add_parser("infer", help="sliding-window inference over a scene")
    common(p)
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint base path")
    p.add_argument("--tam", help="TAM checkpoint base path")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--out", required=True, help="prediction output directory")
    p.add_argument("--baseline-iou", action="store_true",
                   help="associate by overlap-frame mask IoU instead of the TAM")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred", required=True, help="prediction directory")
    p.add_argument("--gt", required=True, help="ground-truth scene directory")
    p.add_argument("--out", help="report output directory (default: pred dir)")
    p.add_argument("--oracle", action="store_true",
                   help="cross-check against the brute-force oracle")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="render figures and a markdown summary")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--train-log", action="append", help="training log CSV")
    p.add_argument("--metrics", action="append", help="metric report JSON")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataMismatchError as e:
        print(f"data mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
