"""Aggregate tracking metrics."""
from __future__ import annotations

import numpy as np

SUCCESS_IOU = 0.5


def evaluate(results: list) -> dict:
    """Mean IoU and success rate (IoU >= 0.5) over all frames, plus a per-scene breakdown."""
    if not results:
        raise ValueError("evaluate needs at least one result")
    ordered = sorted(results, key=lambda r: r.scene)
    all_ious = np.concatenate([np.asarray(r.ious, dtype=float) for r in ordered])
    per_scene = [{"scene": r.scene, "frames": len(r.ious), "mean_iou": float(np.mean(r.ious)),
                  "success": float(np.mean(np.asarray(r.ious) >= SUCCESS_IOU))} for r in ordered]
    return {
        "frames": int(all_ious.size),
        "mean_iou": float(all_ious.mean()),
        "success": float(np.mean(all_ious >= SUCCESS_IOU)),
        "per_scene": per_scene,
    }
