"""Cropping and training-unit sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from ..encoder import ReferenceModality
from .scenes import SyntheticScene

TEMPLATE_FACTOR = 2.0
SEARCH_FACTOR = 4.0
MAX_LANG = 8


@dataclass
class CropWindow:
    """Square window of side ``side`` (frame px) centred at (cx, cy), resampled to ``out`` px."""

    cx: float
    cy: float
    side: float
    out: int

    @property
    def scale(self) -> float:
        return self.out / self.side

    def to_crop(self, box) -> np.ndarray:
        cx, cy, w, h = box
        s = self.scale
        return np.array([(cx - self.cx + self.side / 2) * s, (cy - self.cy + self.side / 2) * s, w * s, h * s])

    def to_frame(self, box) -> np.ndarray:
        cx, cy, w, h = box
        s = self.scale
        return np.array([cx / s + self.cx - self.side / 2, cy / s + self.cy - self.side / 2, w / s, h / s])


def crop(image: np.ndarray, win: CropWindow) -> np.ndarray:
    """Bilinear crop-and-resize of an (H, W[, ch]) image; outside pixels are zero."""
    step = win.side / win.out
    coords = win.cx - win.side / 2 + (np.arange(win.out) + 0.5) * step - 0.5
    rows = win.cy - win.side / 2 + (np.arange(win.out) + 0.5) * step - 0.5
    yy, xx = np.meshgrid(rows, coords, indexing="ij")
    if image.ndim == 2:
        return ndimage.map_coordinates(image, [yy, xx], order=1, mode="constant", cval=0.0)
    return np.stack([ndimage.map_coordinates(image[..., c], [yy, xx], order=1, mode="constant", cval=0.0)
                     for c in range(image.shape[-1])], axis=-1)


def box_side(box) -> float:
    return float(np.sqrt(max(box[2], 1e-6) * max(box[3], 1e-6)))


def template_window(box, size: int) -> CropWindow:
    return CropWindow(float(box[0]), float(box[1]), TEMPLATE_FACTOR * box_side(box), size)


def search_window(center, side: float, size: int) -> CropWindow:
    return CropWindow(float(center[0]), float(center[1]), float(side), size)


def language_ids(scene: SyntheticScene, max_len: int = MAX_LANG) -> np.ndarray:
    ids = np.zeros(max_len, dtype=np.int64)
    ids[:len(scene.language)] = scene.language
    return ids


@dataclass
class TrainingUnit:
    reference: ReferenceModality
    language: np.ndarray        # (N_l,) zero when unavailable
    template: np.ndarray        # (Hz, Wz, 3) zero when unavailable
    template_box: np.ndarray    # box in template px
    search: np.ndarray          # (2, Hx, Wx, 3)
    boxes: np.ndarray           # (2, 4) in search px
    aux_template: Optional[np.ndarray] = None
    aux_search: Optional[np.ndarray] = None
    modality: Optional[str] = None


def sample_reference(rng: np.random.Generator, ratio) -> ReferenceModality:
    r = np.asarray(ratio, dtype=float)
    if np.any(r < 0) or r.sum() <= 0:
        raise ValueError("reference ratio must be non-negative and not all zero")
    choice = rng.choice(3, p=r / r.sum())
    return (ReferenceModality.BBOX, ReferenceModality.NL, ReferenceModality.NL_BBOX)[choice]


def sample_training_unit(scene: SyntheticScene, reference: ReferenceModality, rng: np.random.Generator,
                         template_size: int = 16, search_size: int = 32, max_interval: int = 200,
                         jitter: float = 0.2, scale_jitter: float = 0.15,
                         modality: Optional[str] = None, search_frames: Optional[tuple] = None) -> TrainingUnit:
    """One template, two search regions and the language of a scene.

    Templates are cropped at twice the box side, search regions at four
    times (with centre/scale jitter). NL units search the whole frame, as in
    first-frame grounding, and carry no template; BBOX units carry no language.
    ``search_frames`` optionally narrows the search frames to an inclusive range.
    """
    reference = ReferenceModality(reference)
    n = scene.num_frames
    ti = int(rng.integers(n))
    lo, hi = max(0, ti - max_interval), min(n - 1, ti + max_interval)
    if search_frames is not None:
        f_lo, f_hi = max(lo, search_frames[0]), min(hi, search_frames[1])
        if f_lo <= f_hi:
            lo, hi = f_lo, f_hi
    si = rng.integers(lo, hi + 1, size=2)

    tbox = scene.boxes[ti]
    twin = template_window(tbox, template_size)
    if reference.has_template:
        template = crop(scene.rgb[ti], twin)
    else:
        template = np.zeros((template_size, template_size, 3))
    template_box = twin.to_crop(tbox)

    searches, boxes, windows = [], [], []
    world = scene.rgb.shape[1]
    for j in si:
        box = scene.boxes[j]
        if reference is ReferenceModality.NL:
            win = search_window((world / 2, world / 2), world, search_size)
        else:
            side = SEARCH_FACTOR * box_side(box) * float(np.exp(rng.uniform(-scale_jitter, scale_jitter)))
            shift = rng.uniform(-jitter, jitter, 2) * side
            win = search_window(box[:2] + shift, side, search_size)
        searches.append(crop(scene.rgb[j], win))
        boxes.append(win.to_crop(box))
        windows.append(win)

    lang = language_ids(scene) if reference.has_language else np.zeros(MAX_LANG, dtype=np.int64)
    unit = TrainingUnit(reference, lang, template, template_box, np.stack(searches), np.stack(boxes))
    if modality is not None:
        aux = scene.aux(modality)
        unit.aux_template = crop(aux[ti], twin) if reference.has_template else np.zeros_like(template)
        unit.aux_search = np.stack([crop(aux[j], w) for j, w in zip(si, windows)])
        unit.modality = modality
    return unit
