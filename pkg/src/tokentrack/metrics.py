"""Overlap metrics for single-object tracking runs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AUC_THRESHOLDS = np.arange(0.0, 1.0001, 0.05)  # 21 points


@dataclass
class MetricReport:
    ao: float          # mean IoU over frames
    sr50: float        # fraction of frames with IoU > 0.5
    sr75: float        # fraction with IoU > 0.75
    auc: float         # mean success rate over the 21 thresholds
    fps: float = 0.0

    def as_dict(self):
        return {"ao": self.ao, "sr50": self.sr50, "sr75": self.sr75,
                "auc": self.auc, "fps": self.fps}


def iou(a, b):
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def compute_metrics(pred_boxes, gt_boxes, timings=None):
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"{len(pred_boxes)} predictions vs {len(gt_boxes)} ground truths")
    ious = np.array([iou(p, g) for p, g in zip(pred_boxes, gt_boxes)], dtype=np.float64)
    sr = np.array([(ious > t).mean() for t in AUC_THRESHOLDS])
    fps = 0.0
    if timings:
        total = float(np.sum(timings))
        fps = len(timings) / total if total > 0 else 0.0
    return MetricReport(
        ao=float(ious.mean()) if ious.size else 0.0,
        sr50=float((ious > 0.5).mean()) if ious.size else 0.0,
        sr75=float((ious > 0.75).mean()) if ious.size else 0.0,
        auc=float(sr.mean()) if ious.size else 0.0,
        fps=fps,
    )
