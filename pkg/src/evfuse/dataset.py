"""Dataset generation and loading: scenes, event streams, splits.

A dataset directory holds one subdirectory per scene plus a manifest:

    manifest.json   seed, scene profile, event-model settings, splits
    scene_0000/     spec.json, frames_hi.npz, frames_rgb.npz,
                    labels.json, masks.npz, events.evpl
    scene_0001/     ...

Splits are assigned per scene (never per frame) so no temporal content
leaks across train/val/test.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import events as ev
from . import scenes as sc

DEFAULT_THRESHOLD = 0.2
DEFAULT_LOG_EPS = 1e-3
DEFAULT_VOXEL_BINS = 5


@dataclass
class SceneSample:
    """One scene as the trainer/evaluator consumes it."""

    name: str
    spec: sc.SceneSpec
    frames_rgb: list[sc.Frame]
    labels: list[sc.Label]
    stream: ev.EventStream
    frames_hi: list[sc.Frame] | None = None

    @property
    def rgb_step(self) -> int:
        return self.spec.fps_hi // self.spec.fps_rgb

    def label_at_rgb(self, rgb_index: int) -> sc.Label:
        return self.labels[rgb_index * self.rgb_step]


def generate_dataset(out_dir: Path | str, n_scenes: int, seed: int,
                     profile: sc.SceneProfile = sc.SceneProfile(),
                     threshold: float = DEFAULT_THRESHOLD,
                     log_eps: float = DEFAULT_LOG_EPS,
                     train_frac: float = 0.8, val_frac: float = 0.1,
                     log_fn=None) -> dict:
    """Render ``n_scenes`` scenes, generate their event streams, write all
    sample directories and the manifest. Deterministic in ``seed``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n_scenes):
        spec = sc.sample_scene_spec(seed * 100_003 + i, profile)
        frames_hi, frames_rgb, labels = sc.render_scene(spec)
        stream = ev.generate_events(frames_hi, threshold, log_eps)
        name = f"scene_{i:04d}"
        scene_dir = out_dir / name
        sc.save_scene_dir(scene_dir, spec, frames_hi, frames_rgb, labels)
        ev.write_events(scene_dir / "events.evpl", stream)
        names.append(name)
        if log_fn and (i + 1) % 25 == 0:
            log_fn({"phase": "gen-data", "scenes_done": i + 1, "events": len(stream)})

    n_train = int(round(n_scenes * train_frac))
    n_val = int(round(n_scenes * val_frac))
    splits = {
        "train": names[:n_train],
        "val": names[n_train:n_train + n_val],
        "test": names[n_train + n_val:],
    }
    manifest = {
        "seed": seed,
        "n_scenes": n_scenes,
        "profile": profile.to_json(),
        "event_model": {"threshold": threshold, "log_eps": log_eps},
        "splits": splits,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def read_manifest(data_dir: Path | str) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"not a dataset directory (no manifest): {data_dir}")
    return json.loads(path.read_text())


def load_split(data_dir: Path | str, split: str, *, load_hi: bool = False,
               load_masks: bool = True, limit: int | None = None) -> list[SceneSample]:
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    if split not in manifest["splits"]:
        raise KeyError(f"unknown split {split!r}; have {list(manifest['splits'])}")
    names = manifest["splits"][split]
    if limit is not None:
        names = names[:limit]
    samples = []
    for name in names:
        scene_dir = data_dir / name
        spec, frames_hi, frames_rgb, labels = sc.load_scene_dir(
            scene_dir, load_hi=load_hi, load_masks=load_masks)
        stream = ev.read_events(scene_dir / "events.evpl")
        samples.append(SceneSample(name=name, spec=spec, frames_rgb=frames_rgb,
                                   labels=labels, stream=stream, frames_hi=frames_hi))
    return samples
