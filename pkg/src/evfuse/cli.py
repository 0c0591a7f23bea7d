"""Command-line entry points for the full pipeline.

Subcommands: gen-data, pretrain, train-plug, evaluate, ablate, report.
Every run is fully determined by its config file plus flags; errors exit
nonzero with one machine-readable JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import dataset as ds
from . import evaluation as ev
from . import scenes as sc
from .encoders import EncoderConfig, PretrainConfig, pretrain_base
from .training import TrainConfig, train


def _log(record: dict) -> None:
    print(json.dumps(record), flush=True)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    profile = sc.SceneProfile.from_json(cfg.get("profile", {})) if cfg.get("profile") \
        else sc.SceneProfile()
    emodel = cfg.get("event_model", {})
    t0 = time.perf_counter()
    manifest = ds.generate_dataset(
        args.out, n_scenes=args.n_scenes, seed=args.seed, profile=profile,
        threshold=emodel.get("threshold", ds.DEFAULT_THRESHOLD),
        log_eps=emodel.get("log_eps", ds.DEFAULT_LOG_EPS), log_fn=_log)
    _log({"phase": "gen-data", "done": True, "n_scenes": manifest["n_scenes"],
          "seconds": round(time.perf_counter() - t0, 2), "out": str(args.out)})
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config)
    pre_cfg = PretrainConfig.from_json({**cfg.get("pretrain", {}),
                                        "seed": args.seed})
    enc_cfg = (EncoderConfig.from_json(cfg["encoder"]) if "encoder" in cfg
               else EncoderConfig())
    scenes = ds.load_split(args.data, "train")
    stride = args.frame_stride
    images, labels = [], []
    for scene in scenes:
        for i in range(0, len(scene.frames_rgb), stride):
            images.append(scene.frames_rgb[i].pixels)
            labels.append(scene.label_at_rgb(i))
    t0 = time.perf_counter()
    base, history = pretrain_base(np.stack(images), labels, args.task,
                                  enc_cfg, pre_cfg, log_fn=_log)
    ckpt.save_base_model(args.out, base)
    _log({"phase": "pretrain", "done": True, "digest": base.digest,
          "final_loss": history[-1], "n_samples": len(images),
          "seconds": round(time.perf_counter() - t0, 2), "out": str(args.out)})
    return 0


def _train_config(args, cfg: dict) -> TrainConfig:
    merged = dict(cfg.get("train", {}))
    merged["seed"] = args.seed
    if args.k is not None:
        merged["k_steps"] = args.k
    if args.epochs is not None:
        merged["epochs"] = args.epochs
    if getattr(args, "no_degrade", False):
        merged["schedule"] = {"p_none": 1.0}
    return TrainConfig.from_json(merged)


def cmd_train_plug(args) -> int:
    cfg = _load_config(args.config)
    train_cfg = _train_config(args, cfg)
    base = ckpt.load_base_model(args.base)
    scenes = ds.load_split(args.data, "train")
    scenes += ds.load_split(args.data, "val")
    t0 = time.perf_counter()
    log_path = Path(args.out).with_suffix(".log.jsonl")
    plug, log = train(base, scenes, train_cfg, log_path=log_path, log_fn=_log)
    base.verify_digest()
    ckpt.save_plug(args.out, plug, extra_meta={
        "base_digest": base.digest, "train_config": train_cfg.to_json()})
    _log({"phase": "train-plug", "done": True,
          "seconds": round(time.perf_counter() - t0, 2),
          "base_digest": base.digest, "out": str(args.out)})
    return 0


def cmd_evaluate(args) -> int:
    base = ckpt.load_base_model(args.base)
    plug = None
    if args.plug:
        plug, _ = ckpt.load_plug(args.plug)
    scenes = ds.load_split(args.data, args.split)
    modes = [args.mode] if args.mode else list(ev.EVAL_MODES)
    conditions = [args.condition] if args.condition else list(ev.CONDITIONS)
    if plug is None and any(m != "rgb_only" for m in modes) and args.mode:
        raise ev.EvaluationError(f"mode {args.mode!r} requires --plug")
    report = ev.evaluate_all_modes(base, plug, scenes, k=args.k,
                                   eval_seed=args.seed, modes=modes,
                                   conditions=conditions,
                                   anchors_per_scene=args.anchors)
    written = ev.emit_report(report, args.out)
    _log({"phase": "evaluate", "done": True,
          "files": [str(p) for p in written]})
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    base = ckpt.load_base_model(args.base)
    scenes = ds.load_split(args.data, "train") + ds.load_split(args.data, "val")
    test_scenes = ds.load_split(args.data, "test")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.plug:
        plug_full, _ = ckpt.load_plug(args.plug)
    else:
        full_cfg = _train_config(args, cfg)
        t0 = time.perf_counter()
        plug_full, _ = train(base, scenes, full_cfg,
                             log_path=out_dir / "train_full.log.jsonl", log_fn=_log)
        ckpt.save_plug(out_dir / "plug_full.ckpt", plug_full,
                       extra_meta={"base_digest": base.digest,
                                   "train_config": full_cfg.to_json()})
        _log({"phase": "ablate", "trained": "full",
              "seconds": round(time.perf_counter() - t0, 2)})

    args.no_degrade = True
    nodelta_cfg = _train_config(args, cfg)
    t0 = time.perf_counter()
    plug_nodelta, _ = train(base, scenes, nodelta_cfg,
                            log_path=out_dir / "train_wo_delta.log.jsonl",
                            log_fn=_log)
    ckpt.save_plug(out_dir / "plug_wo_delta.ckpt", plug_nodelta,
                   extra_meta={"base_digest": base.digest,
                               "train_config": nodelta_cfg.to_json()})
    _log({"phase": "ablate", "trained": "wo_delta",
          "seconds": round(time.perf_counter() - t0, 2)})

    table = ev.ablate(base, plug_full, plug_nodelta, test_scenes,
                      k=args.k, eval_seed=args.seed, anchors_per_scene=args.anchors)
    (out_dir / "ablation.json").write_text(json.dumps(table, indent=1, sort_keys=True))

    report = ev.evaluate_all_modes(base, plug_full, test_scenes, k=args.k,
                                   eval_seed=args.seed,
                                   anchors_per_scene=args.anchors)
    ev.emit_report(report, out_dir)
    _log({"phase": "ablate", "done": True, "table": table,
          "out": str(out_dir)})
    return 0


def cmd_report(args) -> int:
    report = ev.MetricsReport.from_json(json.loads(Path(args.metrics).read_text()))
    written = ev.emit_report(report, args.out)
    _log({"phase": "report", "done": True, "files": [str(p) for p in written]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evfuse",
        description="Event/image fusion plug: data generation, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render scenes and their event streams")
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train and freeze the base model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=("centroid", "segmentation"),
                   default="centroid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frame-stride", type=int, default=2)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train-plug", help="train the event fusion plug")
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--no-degrade", action="store_true",
                   help="disable anchor degradation (the w/o-delta ablation)")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_train_plug)

    p = sub.add_parser("evaluate", help="run evaluation modes on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--plug", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=ev.EVAL_MODES, default=None)
    p.add_argument("--condition", choices=ev.CONDITIONS, default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--anchors", type=int, default=3)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="train the w/o-delta plug and compare")
    p.add_argument("--data", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--plug", default=None,
                   help="reuse an already trained full plug")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--anchors", type=int, default=3)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="re-emit CSV and plots from metrics JSON")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
