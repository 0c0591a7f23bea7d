"""Versioned checkpoint container with per-section parameter digests.

A checkpoint is a compressed npz holding named sections ("base", "plug").
Each section stores its parameter arrays plus a JSON meta blob whose
digest is recomputed and verified on load, so silent corruption or
mutation of a frozen model is caught at the boundary. Sections are
independent: adding or loading one never touches another's arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .encoders import (BaseModel, ConvEncoder, EncoderConfig, build_head,
                       parameter_digest)
from .fusion import FusionConfig, PlugModule

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Section:
    meta: dict
    arrays: dict[str, np.ndarray]


def _state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy()
            for name, tensor in module.state_dict().items()}


def save_sections(path: Path | str, sections: dict[str, Section]) -> None:
    payload: dict[str, np.ndarray] = {
        "__format_version__": np.array(FORMAT_VERSION, dtype=np.int64)}
    for name, section in sections.items():
        payload[f"{name}/__meta__"] = np.frombuffer(
            json.dumps(section.meta, sort_keys=True).encode(), dtype=np.uint8)
        for key, arr in section.arrays.items():
            payload[f"{name}/param/{key}"] = arr
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # Write through a handle so numpy cannot append an .npz suffix.
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **payload)


def load_sections(path: Path | str) -> dict[str, Section]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    sections: dict[str, Section] = {}
    with np.load(path) as data:
        version = int(data["__format_version__"])
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint format version {version}")
        for key in data.files:
            if key.endswith("/__meta__"):
                name = key[: -len("/__meta__")]
                meta = json.loads(bytes(data[key]).decode())
                sections[name] = Section(meta=meta, arrays={})
        for key in data.files:
            if "/param/" in key:
                name, param = key.split("/param/", 1)
                sections[name].arrays[param] = data[key]
    return sections


def add_section(path: Path | str, name: str, section: Section) -> None:
    """Add or replace one section, preserving all others byte-for-byte."""
    path = Path(path)
    sections = load_sections(path) if path.exists() else {}
    sections[name] = section
    save_sections(path, sections)


def _load_module_state(module: torch.nn.Module, arrays: dict[str, np.ndarray],
                       prefix: str) -> None:
    state = {key[len(prefix):]: torch.from_numpy(arr.copy())
             for key, arr in arrays.items() if key.startswith(prefix)}
    module.load_state_dict(state)


# ---------------------------------------------------------------------------
# Base model section

def save_base_model(path: Path | str, base: BaseModel) -> None:
    holder = base.modules_()
    meta = {
        "kind": "base",
        "task": base.task,
        "n_shapes": base.n_shapes,
        "image_size": base.image_size,
        "encoder": base.encoder.config.to_json(),
        "digest": base.digest,
    }
    add_section(path, "base", Section(meta=meta, arrays=_state_arrays(holder)))


def load_base_model(path: Path | str) -> BaseModel:
    sections = load_sections(path)
    if "base" not in sections:
        raise CheckpointError(f"{path}: no base-model section")
    section = sections["base"]
    meta = section.meta
    config = EncoderConfig.from_json(meta["encoder"])
    encoder = ConvEncoder(config)
    head = build_head(meta["task"], config, meta["image_size"], meta["n_shapes"])
    _load_module_state(encoder, section.arrays, "encoder.")
    _load_module_state(head, section.arrays, "head.")
    base = BaseModel(encoder=encoder, head=head, task=meta["task"],
                     n_shapes=meta["n_shapes"], image_size=meta["image_size"],
                     digest=meta["digest"])
    for p in encoder.parameters():
        p.requires_grad_(False)
    for p in head.parameters():
        p.requires_grad_(False)
    encoder.eval()
    head.eval()
    base.verify_digest()
    return base


# ---------------------------------------------------------------------------
# Plug section

def save_plug(path: Path | str, plug: PlugModule, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "plug",
        "encoder": plug.encoder_config.to_json(),
        "fusion": plug.fusion_config.to_json(),
        "digest": parameter_digest(plug),
    }
    if extra_meta:
        meta.update(extra_meta)
    add_section(path, "plug", Section(meta=meta, arrays=_state_arrays(plug)))


def load_plug(path: Path | str) -> tuple[PlugModule, dict]:
    sections = load_sections(path)
    if "plug" not in sections:
        raise CheckpointError(f"{path}: no plug section")
    section = sections["plug"]
    meta = section.meta
    plug = PlugModule(EncoderConfig.from_json(meta["encoder"]),
                      FusionConfig.from_json(meta["fusion"]))
    _load_module_state(plug, section.arrays, "")
    digest = parameter_digest(plug)
    if digest != meta["digest"]:
        raise CheckpointError(
            f"{path}: plug digest mismatch ({digest[:12]}... != "
            f"{meta['digest'][:12]}...)")
    plug.eval()
    return plug, meta
