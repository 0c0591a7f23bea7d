import numpy as np
import pytest
import torch

from evfuse import events as ev
from evfuse import scenes as sc
from evfuse.dataset import SceneSample
from evfuse.degrade import DegradeSchedule, DegradeSpec
from evfuse.encoders import (EncoderConfig, PretrainConfig, parameter_digest,
                             pretrain_base)
from evfuse.losses import LossWeights
from evfuse.training import (TrainConfig, _collate, build_sample,
                             make_epoch_samples, train, train_step, untrained_plug)

from conftest import C_DEFAULT, EPS_DEFAULT


def make_scene_sample(seed=0) -> SceneSample:
    spec = sc.sample_scene_spec(seed)
    frames_hi, frames_rgb, labels = sc.render_scene(spec)
    stream = ev.generate_events(frames_hi, C_DEFAULT, EPS_DEFAULT)
    return SceneSample(name=f"s{seed}", spec=spec, frames_rgb=frames_rgb,
                       labels=labels, stream=stream)


@pytest.fixture(scope="module")
def scene():
    return make_scene_sample(31)


@pytest.fixture(scope="module")
def trained_tiny_base():
    images, labels = [], []
    for s in range(10):
        spec = sc.sample_scene_spec(7000 + s)
        _, frames_rgb, lbls = sc.render_scene(spec)
        step = spec.fps_hi // spec.fps_rgb
        for i in range(0, len(frames_rgb), 3):
            images.append(frames_rgb[i].pixels)
            labels.append(lbls[i * step])
    base, _ = pretrain_base(np.stack(images), labels, "centroid",
                            EncoderConfig(in_channels=1),
                            PretrainConfig(epochs=6, seed=2))
    return base


def test_build_sample_k1_window(scene):
    s = build_sample(scene, i=3, k=1, rng=np.random.default_rng(0))
    assert s.future_voxels.shape[0] == 1
    assert s.target_frames.shape == (1, 1, 64, 64)
    assert np.array_equal(s.target_frames[0, 0], scene.frames_rgb[4].pixels)


def test_build_sample_k2_slice_boundaries(scene):
    s = build_sample(scene, i=5, k=2, rng=np.random.default_rng(0),
                     voxel_bins=5)
    assert s.future_voxels.shape == (2, 5, 64, 64)
    t5, t6, t7 = (scene.frames_rgb[j].t for j in (5, 6, 7))
    parts = ev.split_equal(scene.stream, t5, t7, 2)
    assert parts[0].t_begin == t5
    # equal split of [t5, t7); the RGB timestamps are uniform to 1 us
    assert abs(parts[0].t_end - t6) <= 1
    assert parts[1].t_end == t7


def test_build_sample_future_union_matches_whole_window(scene):
    i, k = 4, 2
    t_i, t_end = scene.frames_rgb[i].t, scene.frames_rgb[i + k].t
    parts = ev.split_equal(scene.stream, t_i, t_end, k)
    merged = np.concatenate([p.events for p in parts])
    whole = ev.slice_stream(scene.stream, t_i, t_end)
    assert np.array_equal(merged, whole.events)


def test_build_sample_rejects_out_of_range(scene):
    rng = np.random.default_rng(0)
    with pytest.raises(IndexError):
        build_sample(scene, i=0, k=2, rng=rng)
    with pytest.raises(IndexError):
        build_sample(scene, i=len(scene.frames_rgb) - 2, k=2, rng=rng)


def test_build_sample_pure_given_rng_state(scene):
    schedule = DegradeSchedule()
    a = build_sample(scene, 6, 2, np.random.default_rng(9), schedule=schedule)
    b = build_sample(scene, 6, 2, np.random.default_rng(9), schedule=schedule)
    assert a.degrade_mode == b.degrade_mode
    assert np.array_equal(a.anchor_degraded, b.anchor_degraded)
    assert np.array_equal(a.future_voxels, b.future_voxels)


def test_build_sample_degrades_only_anchor(scene):
    spec = DegradeSpec(mode="exposure", alpha=4.0, beta=0.4)
    s = build_sample(scene, 6, 2, np.random.default_rng(0), degrade_spec=spec)
    assert not np.array_equal(s.anchor_degraded, s.anchor_clean)
    for j in (1, 2):
        assert np.array_equal(s.target_frames[j - 1, 0],
                              scene.frames_rgb[6 + j].pixels)


def test_train_step_leaves_base_untouched(scene, trained_tiny_base):
    base = trained_tiny_base
    digest_before = base.compute_digest()
    plug = untrained_plug(base, TrainConfig(seed=0))
    plug.train()
    opt = torch.optim.Adam(plug.parameters(), lr=1e-3)
    batch = _collate([build_sample(scene, i, 2, np.random.default_rng(i))
                      for i in (2, 5)])
    report = train_step(base, plug, batch, LossWeights(), opt)
    report.check()
    assert base.compute_digest() == digest_before
    for p in base.encoder.parameters():
        assert p.grad is None
    for p in base.head.parameters():
        assert p.grad is None
    # the plug did receive gradients
    assert any(p.grad is not None and p.grad.abs().sum() > 0
               for p in plug.parameters())


def test_overfit_single_batch_reduces_loss(scene, trained_tiny_base):
    base = trained_tiny_base
    plug = untrained_plug(base, TrainConfig(seed=1))
    plug.train()
    opt = torch.optim.Adam(plug.parameters(), lr=1e-3)
    batch = _collate([build_sample(scene, 5, 2, np.random.default_rng(0))])
    first = train_step(base, plug, batch, LossWeights(), opt).total
    last = None
    for _ in range(49):
        last = train_step(base, plug, batch, LossWeights(), opt).total
    assert last < first * 0.5


def test_task_only_configuration_runs(scene, trained_tiny_base):
    base = trained_tiny_base
    plug = untrained_plug(base, TrainConfig(seed=2))
    plug.train()
    opt = torch.optim.Adam(plug.parameters(), lr=1e-3)
    weights = LossWeights(1.0, 0.0, 0.0)
    batch = _collate([build_sample(scene, 4, 2, np.random.default_rng(1))])
    report = train_step(base, plug, batch, weights, opt)
    report.check()
    assert report.total == pytest.approx(
        sum(s["task"] for s in report.steps), rel=1e-6)


def test_train_deterministic_same_seed_same_digest(trained_tiny_base):
    base = trained_tiny_base
    scenes = [make_scene_sample(600 + s) for s in range(4)]
    config = TrainConfig(epochs=2, samples_per_scene=2, batch_size=4, seed=11)
    plug_a, log_a = train(base, scenes, config)
    plug_b, log_b = train(base, scenes, config)
    assert parameter_digest(plug_a) == parameter_digest(plug_b)
    assert log_a[-1]["total"] == log_b[-1]["total"]


def test_train_writes_jsonl_log_and_verifies_base(tmp_path, trained_tiny_base):
    import json
    base = trained_tiny_base
    scenes = [make_scene_sample(700 + s) for s in range(3)]
    config = TrainConfig(epochs=1, samples_per_scene=2, batch_size=4, seed=3)
    log_path = tmp_path / "train.log.jsonl"
    _, log = train(base, scenes, config, log_path=log_path)
    lines = [json.loads(l) for l in log_path.read_text().splitlines()]
    assert len(lines) == len(log)
    step_lines = [l for l in lines if l["phase"] == "train"]
    assert step_lines and all("total" in l and "steps" in l for l in step_lines)
    assert any(l["phase"] == "val" for l in lines)


def test_train_config_round_trip():
    config = TrainConfig(k_steps=3, epochs=7, seed=5,
                         weights=LossWeights(1.0, 5.0, 2.0),
                         schedule=DegradeSchedule(p_none=0.25))
    again = TrainConfig.from_json(config.to_json())
    assert again == config
    with pytest.raises(ValueError):
        TrainConfig(k_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)


def test_epoch_samples_cover_valid_anchor_range(scene):
    config = TrainConfig(samples_per_scene=30, epochs=1, seed=0)
    samples = make_epoch_samples([scene], config, np.random.default_rng(0))
    anchors = {s.anchor_index for s in samples}
    assert min(anchors) >= 1
    assert max(anchors) <= len(scene.frames_rgb) - 1 - config.k_steps
    assert len(anchors) == len(scene.frames_rgb) - 1 - config.k_steps
