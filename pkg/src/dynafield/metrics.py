"""Evaluation metrics and the benchmark harness."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def frame_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two binary masks; both empty -> 1.0."""
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return float((pred & gt).sum()) / union


def viou(
    pred_masks: dict[int, np.ndarray],
    pred_frames: set[int],
    gt_masks: dict[int, np.ndarray],
    gt_frames: set[int],
) -> float:
    """Per-frame IoU summed over the frame intersection, normalized by the union."""
    union = set(pred_frames) | set(gt_frames)
    if not union:
        raise ValueError("no active frames in prediction or ground truth")
    inter = set(pred_frames) & set(gt_frames)
    total = sum(frame_iou(pred_masks[t], gt_masks[t]) for t in inter)
    return total / len(union)


def accuracy(pred_frames: set[int], gt_frames: set[int], n_all: int) -> float:
    """Fraction of frames whose selected/not-selected membership matches."""
    if n_all < 1:
        raise ValueError("n_all must be >= 1")
    pred_frames = set(pred_frames)
    gt_frames = set(gt_frames)
    correct = sum(1 for t in range(n_all) if (t in pred_frames) == (t in gt_frames))
    return correct / n_all


def pixel_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    return float((pred.astype(bool) == gt.astype(bool)).mean())


def miou(per_frame_ious: list[float]) -> float:
    if not per_frame_ious:
        raise ValueError("no frames to average")
    return float(np.mean(per_frame_ious))


@dataclass
class QueryMetrics:
    text: str
    mode: str
    acc: float | None = None
    viou: float | None = None
    miou: float | None = None
    macc: float | None = None


@dataclass
class MetricReport:
    per_query: list[QueryMetrics] = field(default_factory=list)

    def mean(self, attr: str) -> float | None:
        vals = [getattr(q, attr) for q in self.per_query if getattr(q, attr) is not None]
        return float(np.mean(vals)) if vals else None

    def rows(self) -> list[dict]:
        rows = [
            {
                "query": q.text,
                "mode": q.mode,
                "acc": q.acc,
                "viou": q.viou,
                "miou": q.miou,
                "macc": q.macc,
            }
            for q in self.per_query
        ]
        rows.append(
            {
                "query": "(mean)",
                "mode": "",
                "acc": self.mean("acc"),
                "viou": self.mean("viou"),
                "miou": self.mean("miou"),
                "macc": self.mean("macc"),
            }
        )
        return rows


def evaluate_queries(engine, bundle) -> MetricReport:
    """Run every ground-truth query through the engine and score it."""
    if bundle.ground_truth is None:
        raise ValueError("bundle has no ground truth annotations")
    report = MetricReport()
    for gt_query in bundle.ground_truth.queries:
        track = bundle.track_for(gt_query.object_id)
        gt_masks = {f: track.masks[f] for f in range(bundle.num_frames)}
        request = engine.build_request(gt_query.text, gt_query.mode)
        metrics = QueryMetrics(text=gt_query.text, mode=gt_query.mode)
        if gt_query.mode == "timeSensitive":
            result = engine.time_sensitive_query(request)
            pred_frames = set(result.selected_frames)
            metrics.acc = accuracy(pred_frames, gt_query.active_frames, bundle.num_frames)
            metrics.viou = viou(result.masks, pred_frames, gt_masks, gt_query.active_frames)
        else:
            result = engine.time_agnostic_query(request)
            ious = [
                frame_iou(result.masks[f], gt_masks[f]) for f in range(bundle.num_frames)
            ]
            accs = [
                pixel_accuracy(result.masks[f], gt_masks[f])
                for f in range(bundle.num_frames)
            ]
            metrics.miou = miou(ious)
            metrics.macc = float(np.mean(accs))
        report.per_query.append(metrics)
    return report


def run_benchmark(
    synth_result,
    config,
    k_values: list[int] | None = None,
    compressor_steps: int | None = None,
) -> dict[int, MetricReport]:
    """Train and evaluate the field for each K; returns a report per K."""
    from dataclasses import replace

    from .query import QueryEngine
    from .synth import make_text_embedders
    from .trainer import FieldTrainer

    k_values = k_values or [config.num_states]
    reports: dict[int, MetricReport] = {}
    static_embedder, caption_embedder = make_text_embedders(synth_result)
    for k in k_values:
        cfg = replace(config, num_states=k)
        trainer = FieldTrainer(
            synth_result.bundle,
            cfg,
            synth_result.init_positions,
            synth_result.init_colors,
            synth_result.aabb_min,
            synth_result.aabb_max,
            compressor_steps=compressor_steps,
        )
        trainer.run_all()
        engine = QueryEngine(
            trainer.engine_state(),
            synth_result.bundle.cameras,
            static_embedder,
            caption_embedder,
        )
        reports[k] = evaluate_queries(engine, synth_result.bundle)
    return reports


def write_report_csv(report: MetricReport, path: str | Path) -> None:
    rows = report.rows()
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def format_report(report: MetricReport) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else (v or "-")

    lines = [f"{'query':<45} {'mode':<14} {'acc':>8} {'viou':>8} {'miou':>8} {'macc':>8}"]
    for row in report.rows():
        lines.append(
            f"{row['query']:<45} {row['mode']:<14} "
            f"{fmt(row['acc']):>8} {fmt(row['viou']):>8} "
            f"{fmt(row['miou']):>8} {fmt(row['macc']):>8}"
        )
    return "\n".join(lines)
