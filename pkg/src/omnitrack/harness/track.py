"""Frame-by-frame tracking and first-frame grounding."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from ..boxhead import ContextMemory, decode_box, update_context
from ..encoder import ReferenceModality, VideoModality
from ..losses import box_patch_targets, iou
from ..model import Tracker
from ..numerics import DTYPE
from .data import SEARCH_FACTOR, box_side, crop, language_ids, search_window, template_window
from .scenes import SyntheticScene

MODALITY_SETS = {"rgb": None, "rgbd": "depth", "rgbt": "thermal", "rgbe": "event"}
MIN_SIDE = 2.0


@dataclass
class TrackResult:
    scene: int
    boxes: np.ndarray            # (T, 4) predicted cx, cy, w, h
    confidence: np.ndarray       # (T,)
    ious: np.ndarray             # (T,)
    reference: str = "bbox"
    modality: str = "rgb"

    def __post_init__(self):
        if np.any(self.ious < 0) or np.any(self.ious > 1):
            raise ValueError("IoU outside [0, 1]")

    @property
    def mean_iou(self) -> float:
        return float(np.mean(self.ious))

    @property
    def success(self) -> float:
        return float(np.mean(self.ious >= 0.5))

    def records(self) -> list:
        return [{"scene": self.scene, "frame": t, "box": [float(v) for v in self.boxes[t]],
                 "confidence": float(self.confidence[t]), "iou": float(self.ious[t])}
                for t in range(len(self.ious))]


def aux_modality(modality: str) -> Optional[str]:
    """Map a CLI modality set (rgb / rgbd / rgbt / rgbe) or a channel name to the aux channel, if any."""
    if modality in MODALITY_SETS:
        return MODALITY_SETS[modality]
    if VideoModality(modality) is VideoModality.RGB:
        return None
    return VideoModality(modality).value


def _clip_box(box: np.ndarray, world: int) -> np.ndarray:
    w = float(np.clip(box[2], MIN_SIDE, world))
    h = float(np.clip(box[3], MIN_SIDE, world))
    cx = float(np.clip(box[0], 0, world))
    cy = float(np.clip(box[1], 0, world))
    return np.array([cx, cy, w, h])


class _Frames:
    def __init__(self, scene: SyntheticScene, aux: Optional[str]):
        self.rgb = scene.rgb
        self.aux = scene.aux(aux) if aux else None
        self.world = scene.rgb.shape[1]

    def crop(self, t: int, win):
        rgb = torch.as_tensor(crop(self.rgb[t], win), dtype=DTYPE).unsqueeze(0)
        aux = None if self.aux is None else torch.as_tensor(crop(self.aux[t], win), dtype=DTYPE).unsqueeze(0)
        return rgb, aux


@torch.no_grad()
def track(model: Tracker, scene: SyntheticScene, reference="bbox", modality: str = "rgb",
          scene_index: int = 0, update_interval: float = 20, threshold: float = 0.5,
          use_adapters: bool = True) -> TrackResult:
    """Track the target through ``scene``.

    BBOX and NL+BBOX start from the ground-truth first box. NL grounds the
    first frame on the full frame with no template, then crops a template
    from the grounded box and continues as NL+BBOX.
    """
    reference = ReferenceModality(reference)
    cfg = model.cfg
    aux = aux_modality(modality)
    frames = _Frames(scene, aux)
    n = scene.num_frames
    lang = torch.as_tensor(language_ids(scene, cfg.max_text), dtype=torch.long).unsqueeze(0)
    mem = ContextMemory(cfg.patch, cfg.grid, cfg.beta, threshold, update_interval, inclusive=cfg.inclusive_split)
    zeros_t = torch.zeros(1, cfg.template_size, cfg.template_size, 3, dtype=DTYPE)

    boxes = np.zeros((n, 4))
    conf = np.zeros(n)

    def run(t, ref, win, tmpl, aux_tmpl, tmpl_box):
        search, aux_search = frames.crop(t, win)
        emb = model.encode(ref, lang, tmpl, search, aux_tmpl if aux else None, aux_search, aux,
                           use_adapters=use_adapters)
        T = model.semantic(emb, [ref])
        E_x = emb.search()[0]
        if not mem.entries and ref.has_template:
            in_z, _ = box_patch_targets(tmpl_box, cfg.patch, cfg.template_size // cfg.patch)
            mem.add(emb.template()[0], in_z)
            mem.refresh(T[0])
        if mem.tokens is None:
            mem.refresh(T[0])
        tokens = tuple(tok.unsqueeze(0) for tok in mem.tokens)
        L_hat, C_hat, O_hat, S_hat = model.score(E_x.unsqueeze(0), T, tokens)
        box, c = decode_box(C_hat[0], L_hat[0], O_hat[0], S_hat[0], cfg.patch, cfg.search_size, cfg.search_size)
        update_context(mem, E_x, box, c, T[0])
        return _clip_box(win.to_frame((box.cx, box.cy, box.w, box.h)), frames.world), c

    def make_template(t, box):
        win = template_window(box, cfg.template_size)
        tmpl, aux_tmpl = frames.crop(t, win)
        return tmpl, aux_tmpl, win.to_crop(box)

    if reference is ReferenceModality.NL:
        world = frames.world
        full = search_window((world / 2, world / 2), world, cfg.search_size)
        boxes[0], conf[0] = run(0, ReferenceModality.NL, full, zeros_t, torch.zeros_like(zeros_t), None)
        mem = ContextMemory(cfg.patch, cfg.grid, cfg.beta, threshold, update_interval, inclusive=cfg.inclusive_split)
        ref = ReferenceModality.NL_BBOX
    else:
        boxes[0], conf[0] = scene.boxes[0], 1.0
        ref = reference
    tmpl, aux_tmpl, tmpl_box = make_template(0, boxes[0])

    for t in range(1, n):
        last = boxes[t - 1]
        win = search_window(last[:2], SEARCH_FACTOR * box_side(last), cfg.search_size)
        boxes[t], conf[t] = run(t, ref, win, tmpl, aux_tmpl, tmpl_box)

    ious = iou(torch.as_tensor(boxes, dtype=DTYPE), torch.as_tensor(scene.boxes, dtype=DTYPE)).numpy()
    return TrackResult(scene_index, boxes, conf, np.clip(ious, 0.0, 1.0), reference.value, modality)


def write_results(results, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for res in results:
            for rec in res.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_results(path) -> list:
    """Records grouped back into TrackResults, ordered by scene index."""
    by_scene = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                by_scene.setdefault(int(rec.get("scene", 0)), []).append(rec)
    out = []
    for scene in sorted(by_scene):
        recs = sorted(by_scene[scene], key=lambda r: r["frame"])
        out.append(TrackResult(scene, np.array([r["box"] for r in recs], dtype=float),
                               np.array([r["confidence"] for r in recs], dtype=float),
                               np.array([r["iou"] for r in recs], dtype=float)))
    return out
