"""Evaluation modes, metrics, ablation comparisons, and report emission.

Modes:
    rgb_only        frozen model on the (possibly degraded) anchor image
    fused_anchor    anchor features fused with prior-interval event features
    high_rate_iter  fused anchor iteratively updated through K future event
                    slices (predictions at t_{i+1}..t_{i+K})
    high_rate_no_iter   the ablation: every step re-fuses the anchor feature
    events_missing  fused_anchor with an empty event stream (zero voxel)

All modes run on identical anchor draws and identical degradation draws
(shared evaluation seed), so comparisons between modes are paired.
Metrics are computed against exact synthetic ground truth; evaluation
never mutates a checkpoint (digests re-verified).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import DEFAULT_VOXEL_BINS, SceneSample
from .degrade import DegradeSpec, apply_degrade
from .encoders import BaseModel, im_encode, parameter_digest, task_head
from .events import slice_stream, split_equal, voxelize
from .fusion import PlugModule, ev_encode, fuse, fuse_no_iter, iterate_sequence
from .scenes import ground_truth_flow

EVAL_MODES = ("rgb_only", "fused_anchor", "high_rate_iter", "high_rate_no_iter",
              "events_missing")
CONDITIONS = ("clean", "exposure", "blur")

EXPOSURE_ALPHA = 4.0
EXPOSURE_BETA = 0.4
BLUR_N_INTERP = 8


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)


class MetricRow:
    mode: str
    condition: str
    offset: int       # timestep relative to the anchor (0 = t_i)
    metric: str       # "centroid_px" | "seg_iou"
    value: float
    count: int

    def to_json(self) -> dict:
        return {"mode": self.mode, "condition": self.condition,
                "offset": self.offset, "metric": self.metric,
                "value": self.value, "count": self.count}


@dataclass


class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)

    def value(self, mode: str, condition: str, offset: int,
              metric: str) -> float:
        for r in self.rows:
            if (r.mode, r.condition, r.offset, r.metric) == (mode, condition,
                                                             offset, metric):
                return r.value
        raise KeyError(f"no row for {(mode, condition, offset, metric)}")

    def to_json(self) -> dict:
        return {"rows": [r.to_json() for r in sorted(
            self.rows, key=lambda r: (r.mode, r.condition, r.offset, r.metric))]}

    @staticmethod
    def from_json(obj: dict) -> "MetricsReport":
        return MetricsReport(rows=[MetricRow(**r) for r in obj["rows"]])

    def merged(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport(rows=self.rows + other.rows)


def _condition_spec(condition: str, scene: SceneSample, i: int) -> DegradeSpec:
    if condition == "clean":
        return DegradeSpec()
    if condition == "exposure":
        return DegradeSpec(mode="exposure", alpha=EXPOSURE_ALPHA, beta=EXPOSURE_BETA)
    if condition == "blur":
        t_prev = scene.frames_rgb[i - 1].t
        t_i = scene.frames_rgb[i].t
        flow = ground_truth_flow(scene.spec, t_prev, t_i)
        return DegradeSpec(mode="blur", n_interp=BLUR_N_INTERP, flow=flow)
    raise EvaluationError(f"unknown condition {condition!r}; have {CONDITIONS}")


def _metric(base: BaseModel, pred: torch.Tensor, label) -> tuple[str, float]:
    if base.task == "centroid":
        gt = np.array(label.centroids, dtype=np.float64)
        est = pred.detach().numpy().reshape(-1, 2) * base.image_size
        err = float(np.mean(np.linalg.norm(est - gt, axis=1)))
        return "centroid_px", err
    mask = torch.sigmoid(pred)[0, 0].detach().numpy() > 0.5
    gt = label.mask
    union = np.logical_or(mask, gt).sum()
    inter = np.logical_and(mask, gt).sum()
    iou = float(inter / union) if union else 1.0
    return "seg_iou", iou


def _eval_anchor_indices(scene: SceneSample, k: int, n_anchors: int,
                         rng: np.random.Generator) -> list[int]:
    valid = np.arange(1, len(scene.frames_rgb) - k)
    picks = rng.choice(valid, size=min(n_anchors, len(valid)), replace=False)
    return sorted(int(p) for p in picks)


def evaluate(base: BaseModel, plug: PlugModule | None, scenes: list[SceneSample],
             mode: str, condition: str, k: int = 2, eval_seed: int = 0,
             anchors_per_scene: int = 3,
             voxel_bins: int = DEFAULT_VOXEL_BINS) -> MetricsReport:
    """Run one mode x condition over the scene list; aggregate per timestep."""
    if mode not in EVAL_MODES:
        raise EvaluationError(f"unknown mode {mode!r}; have {EVAL_MODES}")
    if condition not in CONDITIONS:
        raise EvaluationError(f"unknown condition {condition!r}; have {CONDITIONS}")
    if mode != "rgb_only" and plug is None:
        raise EvaluationError(f"mode {mode!r} requires a plug module")
    if mode.startswith("high_rate") and k < 1:
        raise EvaluationError(f"high-rate modes need k >= 1, got {k}")
    base.verify_digest()
    plug_digest = parameter_digest(plug) if plug is not None else None

    per_offset: dict[int, list[float]] = {}
    metric_name = "centroid_px" if base.task == "centroid" else "seg_iou"
    with torch.no_grad():
        for scene in scenes:
            # Anchor and degradation draws depend only on (eval_seed, scene),
            # never on the mode, so modes are compared on paired inputs.
            rng = np.random.default_rng((eval_seed, scene.spec.seed))
            for i in _eval_anchor_indices(scene, k, anchors_per_scene, rng):
                spec = _condition_spec(condition, scene, i)
                anchor = apply_degrade(scene.frames_rgb[i], spec)
                feat = im_encode(base, anchor)
                if mode == "rgb_only":
                    preds = {0: task_head(base, feat)}
                else:
                    t_prev = scene.frames_rgb[i - 1].t
                    t_i = scene.frames_rgb[i].t
                    if mode == "events_missing":
                        prior = np.zeros(
                            (voxel_bins, *scene.spec.resolution), dtype=np.float32)
                        prior_t = torch.from_numpy(prior).unsqueeze(0)
                    else:
                        grid = voxelize(slice_stream(scene.stream, t_prev, t_i),
                                        t_prev, t_i, voxel_bins)
                        prior_t = torch.from_numpy(grid.data).unsqueeze(0)
                    fused = fuse(plug, feat, ev_encode(plug, prior_t))
                    preds = {0: task_head(base, fused)}
                    if mode.startswith("high_rate"):
                        t_end = scene.frames_rgb[i + k].t
                        slices = split_equal(scene.stream, t_i, t_end, k)
                        ev_feats = [
                            ev_encode(plug, torch.from_numpy(
                                voxelize(s, s.t_begin, s.t_end, voxel_bins).data
                            ).unsqueeze(0))
                            for s in slices]
                        chain = (iterate_sequence if mode == "high_rate_iter"
                                 else fuse_no_iter)(plug, fused, ev_feats)
                        for j, f in enumerate(chain, start=1):
                            preds[j] = task_head(base, f)
                for offset, pred in preds.items():
                    label = scene.label_at_rgb(i + offset)
                    name, value = _metric(base, pred, label)
                    per_offset.setdefault(offset, []).append(value)
    base.verify_digest()
    if plug is not None and parameter_digest(plug) != plug_digest:
        raise EvaluationError("plug parameters changed during evaluation")

    rows = [MetricRow(mode=mode, condition=condition, offset=offset,
                      metric=metric_name,
                      value=float(np.mean(vals)), count=len(vals))
            for offset, vals in sorted(per_offset.items())]
    return MetricsReport(rows=rows)


def evaluate_all_modes(base: BaseModel, plug: PlugModule | None,
                       scenes: list[SceneSample], k: int = 2, eval_seed: int = 0,
                       modes=EVAL_MODES, conditions=CONDITIONS,
                       anchors_per_scene: int = 3) -> MetricsReport:
    report = MetricsReport()
    for mode in modes:
        if mode != "rgb_only" and plug is None:
            continue
        for condition in conditions:
            report = report.merged(evaluate(
                base, plug, scenes, mode, condition, k=k, eval_seed=eval_seed,
                anchors_per_scene=anchors_per_scene))
    return report

# ---------------------------------------------------------------------------
# Ablation comparison


def ablate(base: BaseModel, plug_full: PlugModule, plug_no_delta: PlugModule,
           scenes: list[SceneSample], k: int = 2, eval_seed: int = 0,
           anchors_per_scene: int = 3) -> dict:
    """Four-row comparison per condition: the full plug, the plug trained
    without anchor degradation, and the iterative vs anchored high-rate
    chains (final-step error at t_{i+k})."""
    out: dict[str, dict[str, float]] = {}
    metric = "centroid_px" if base.task == "centroid" else "seg_iou"
    for condition in CONDITIONS:
        full = evaluate(base, plug_full, scenes, "fused_anchor", condition,
                        k=k, eval_seed=eval_seed, anchors_per_scene=anchors_per_scene)
        wo_delta = evaluate(base, plug_no_delta, scenes, "fused_anchor", condition,
                            k=k, eval_seed=eval_seed,
                            anchors_per_scene=anchors_per_scene)
        hi_iter = evaluate(base, plug_full, scenes, "high_rate_iter", condition,
                           k=k, eval_seed=eval_seed,
                           anchors_per_scene=anchors_per_scene)
        hi_no = evaluate(base, plug_full, scenes, "high_rate_no_iter", condition,
                         k=k, eval_seed=eval_seed,
                         anchors_per_scene=anchors_per_scene)
        rgb = evaluate(base, None, scenes, "rgb_only", condition,
                       k=k, eval_seed=eval_seed, anchors_per_scene=anchors_per_scene)
        out[condition] = {
            "rgb_only": rgb.value("rgb_only", condition, 0, metric),
            "full": full.value("fused_anchor", condition, 0, metric),
            "wo_delta": wo_delta.value("fused_anchor", condition, 0, metric),
            "high_rate_iter": hi_iter.value("high_rate_iter", condition, k, metric),
            "high_rate_no_iter": hi_no.value("high_rate_no_iter", condition, k, metric),
        }
    return {"metric": metric, "k": k, "conditions": out}

# ---------------------------------------------------------------------------
# Report emission


def emit_report(report: MetricsReport, out_dir: Path | str,
                plots: bool = True) -> list[Path]:
    """Write metrics.csv, metrics.json and per-metric error-vs-timestep plots.

    An empty report produces a headers-only CSV and no plots.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out_dir / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "condition", "offset", "metric", "value", "count"])
        for r in sorted(report.rows,
                        key=lambda r: (r.mode, r.condition, r.offset, r.metric)):
            writer.writerow([r.mode, r.condition, r.offset, r.metric,
                             repr(r.value), r.count])
    written.append(csv_path)

    json_path = out_dir / "metrics.json"
    json_path.write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    written.append(json_path)

    if plots and report.rows:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for metric in sorted({r.metric for r in report.rows}):
            fig, ax = plt.subplots(figsize=(6, 4))
            series: dict[tuple[str, str], list[MetricRow]] = {}
            for r in report.rows:
                if r.metric == metric:
                    series.setdefault((r.mode, r.condition), []).append(r)
            for (mode, condition), rows in sorted(series.items()):
                rows = sorted(rows, key=lambda r: r.offset)
                ax.plot([r.offset for r in rows], [r.value for r in rows],
                        marker="o", label=f"{mode}/{condition}")
            ax.set_xlabel("timestep offset from anchor")
            ax.set_ylabel(metric)
            ax.legend(fontsize=6)
            fig.tight_layout()
            path = out_dir / f"{metric}.png"
            fig.savefig(path, dpi=110)
            plt.close(fig)
            written.append(path)
    return written


def load_report_csv(path: Path | str) -> MetricsReport:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(MetricRow(
                mode=rec["mode"], condition=rec["condition"],
                offset=int(rec["offset"]), metric=rec["metric"],
                value=float(rec["value"]), count=int(rec["count"])))
    return MetricsReport(rows=rows)
