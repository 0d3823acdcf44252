"""Synthetic multi-modal tracking scenes.

Each scene is a short clip of coloured shapes drifting over a textured
background, rendered as an RGB-like image plus three auxiliary channels:

* depth   -- distance-to-camera ramp with per-object depth,
* thermal -- per-object temperature level on a cold background,
* event   -- frame-difference magnitude of a latent luminance (a per-object
             level times a checker texture attached to the object),
             accumulated over the last ``EVENT_WINDOW`` frame pairs.

In a *hard* scene the target has a decoy twin that is pixel-identical in RGB
and matches it in every auxiliary channel except ``hard_modality``, where the
decoy blends into the background (a flat print on the back wall for depth,
ambient temperature for thermal, no luminance contrast and hence no events).
The twin moves as the point reflection of the target about the target's
position at ``crossing_frame``, so the two meet there and then separate
symmetrically: after the crossing only the auxiliary channel tells them apart.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

PALETTE = np.array([
    [0.95, 0.15, 0.15],  # red
    [0.15, 0.85, 0.20],  # green
    [0.20, 0.35, 0.95],  # blue
    [0.95, 0.90, 0.15],  # yellow
    [0.90, 0.20, 0.90],  # magenta
    [0.15, 0.90, 0.90],  # cyan
    [0.95, 0.55, 0.10],  # orange
    [0.95, 0.95, 0.95],  # white
])
SHAPES = ("square", "disk", "diamond")
AUX_CHANNELS = ("depth", "thermal", "event")
EVENT_WINDOW = 2
# side of the checker cells of an object's surface luminance
LUM_CELL = 2.0

# language vocabulary: 0 = pad, then colours, shapes, coarse positions
COLOR_BASE = 1
SHAPE_BASE = COLOR_BASE + len(PALETTE)
POS_BASE = SHAPE_BASE + len(SHAPES)
POSITIONS = ("left", "right", "top", "bottom")


class SceneError(ValueError):
    pass


@dataclass
class SceneConfig:
    world: int = 32
    frames: int = 24
    min_size: float = 6.0
    max_size: float = 10.0
    min_distractors: int = 1
    max_distractors: int = 2
    min_speed: float = 0.8
    max_speed: float = 2.5
    noise: float = 0.02
    hard: bool = False
    hard_modality: Optional[str] = None
    # hard scenes: frame at which the twin crosses the target
    crossing_frame: int = 4


@dataclass
class ObjectSpec:
    shape: int
    color: int
    w: float
    h: float
    depth: float
    thermal: float
    luminance: float
    path: np.ndarray = field(repr=False)   # (frames + 1, 2) centres; row 0 is the pre-roll frame
    # auxiliary channel in which the object shows only background
    hidden_in: Optional[str] = None


@dataclass
class SyntheticScene:
    seed: int
    config: SceneConfig
    target: ObjectSpec
    distractors: list
    rgb: np.ndarray          # (T, H, W, 3)
    depth: np.ndarray        # (T, H, W)
    thermal: np.ndarray
    event: np.ndarray
    boxes: np.ndarray        # (T, 4) cx, cy, w, h
    language: np.ndarray     # (3,) token ids

    @property
    def num_frames(self) -> int:
        return len(self.boxes)

    @property
    def hard(self) -> bool:
        return self.config.hard

    def aux(self, modality: str) -> np.ndarray:
        """(T, H, W, 3) three-channel version of an auxiliary channel."""
        chan = getattr(self, modality)
        return np.repeat(chan[..., None], 3, axis=-1)

    # --- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        meta = {"seed": self.seed, "config": asdict(self.config),
                "target": _spec_meta(self.target), "distractors": [_spec_meta(d) for d in self.distractors]}
        arrays = {"rgb": self.rgb, "depth": self.depth, "thermal": self.thermal, "event": self.event,
                  "boxes": self.boxes, "language": self.language, "target_path": self.target.path}
        for i, d in enumerate(self.distractors):
            arrays[f"distractor_path_{i}"] = d.path
        np.savez_compressed(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            target = ObjectSpec(**meta["target"], path=z["target_path"])
            distractors = [ObjectSpec(**m, path=z[f"distractor_path_{i}"]) for i, m in enumerate(meta["distractors"])]
            return cls(meta["seed"], SceneConfig(**meta["config"]), target, distractors,
                       z["rgb"], z["depth"], z["thermal"], z["event"], z["boxes"], z["language"])


def _spec_meta(spec: ObjectSpec) -> dict:
    d = asdict(spec)
    d.pop("path")
    return {k: (v.item() if isinstance(v, np.generic) else v) for k, v in d.items()}


def _walk(rng, cfg: SceneConfig, w: float, h: float, start: Optional[np.ndarray] = None) -> np.ndarray:
    """Bounded random walk with momentum; centres keep the whole box inside the frame."""
    lo = np.array([w / 2, h / 2])
    hi = cfg.world - lo
    if np.any(hi < lo):
        raise SceneError(f"object {w}x{h} does not fit a {cfg.world}px world")
    pos = rng.uniform(lo, hi) if start is None else np.clip(start, lo, hi)
    ang = rng.uniform(0, 2 * np.pi)
    vel = rng.uniform(cfg.min_speed, cfg.max_speed) * np.array([np.cos(ang), np.sin(ang)])
    path = [pos.copy()]
    for _ in range(cfg.frames):
        vel = vel + rng.normal(0, 0.3, 2)
        speed = np.linalg.norm(vel)
        if speed > cfg.max_speed:
            vel *= cfg.max_speed / speed
        elif speed < cfg.min_speed:
            vel *= cfg.min_speed / max(speed, 1e-9)
        pos = pos + vel
        for d in range(2):
            if pos[d] < lo[d]:
                pos[d], vel[d] = 2 * lo[d] - pos[d], -vel[d]
            if pos[d] > hi[d]:
                pos[d], vel[d] = 2 * hi[d] - pos[d], -vel[d]
        pos = np.clip(pos, lo, hi)
        path.append(pos.copy())
    return np.array(path)


def _shape_mask(shape: int, cx: float, cy: float, w: float, h: float, world: int) -> np.ndarray:
    ys, xs = np.mgrid[0:world, 0:world] + 0.5
    dx = (xs - cx) / (w / 2)
    dy = (ys - cy) / (h / 2)
    if SHAPES[shape] == "square":
        return (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
    if SHAPES[shape] == "disk":
        return dx ** 2 + dy ** 2 <= 1
    return np.abs(dx) + np.abs(dy) <= 1


def event_frames(lum: np.ndarray, window: int = EVENT_WINDOW) -> np.ndarray:
    """Per-pixel |change| of ``lum`` (T+1 frames) summed over the last ``window`` pairs, clipped to 1."""
    acc = np.cumsum(np.abs(np.diff(lum, axis=0)), axis=0)
    acc[window:] -= acc[:-window].copy()
    return np.minimum(acc, 1.0)


def _surface_pattern(cx: float, cy: float, w: float, h: float, world: int, cell: float = LUM_CELL) -> np.ndarray:
    """Checkerboard in object coordinates (values 0.5 / 1.0) that moves with the object."""
    ys, xs = np.mgrid[0:world, 0:world] + 0.5
    u = np.floor((xs - cx + w / 2) / cell)
    v = np.floor((ys - cy + h / 2) / cell)
    return 0.5 + 0.5 * ((u + v) % 2)


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> SyntheticScene:
    """Deterministic scene for ``seed``."""
    if cfg.min_size > cfg.world:
        raise SceneError("target larger than the world")
    if cfg.hard and cfg.hard_modality not in AUX_CHANNELS:
        raise SceneError(f"hard scene needs hard_modality in {AUX_CHANNELS}")
    rng = np.random.default_rng(seed)
    depth_levels = np.linspace(0.1, 0.5, 5)
    heat_levels = np.linspace(0.35, 1.0, 5)
    lum_levels = np.linspace(0.4, 1.0, 4)

    def new_object(color, shape=None, start=None):
        s = int(rng.integers(len(SHAPES))) if shape is None else shape
        w, h = rng.uniform(cfg.min_size, cfg.max_size, 2)
        return ObjectSpec(s, int(color), float(w), float(h), float(rng.choice(depth_levels)),
                          float(rng.choice(heat_levels)), float(rng.choice(lum_levels)),
                          _walk(rng, cfg, w, h, start))

    t_color = int(rng.integers(len(PALETTE)))
    target = new_object(t_color)
    distractors = []
    if cfg.hard:
        c = target.path[min(max(cfg.crossing_frame, 0), cfg.frames - 1) + 1]
        lo = np.array([target.w / 2, target.h / 2])
        mirror = np.clip(2 * c - target.path, lo, cfg.world - lo)
        twin = ObjectSpec(target.shape, t_color, target.w, target.h, target.depth, target.thermal,
                          target.luminance, mirror, hidden_in=cfg.hard_modality)
        distractors.append(twin)
    n_extra = int(rng.integers(cfg.min_distractors, cfg.max_distractors + 1))
    if cfg.hard:
        n_extra = max(n_extra - 1, 0)
    others = [c for c in range(len(PALETTE)) if c != t_color]
    for c in rng.choice(others, size=n_extra, replace=False):
        distractors.append(new_object(c))

    texture = ndimage.gaussian_filter(rng.normal(0, 1, (cfg.world, cfg.world)), 2.0)
    texture = 0.15 + 0.05 * texture / (np.abs(texture).max() + 1e-9)
    ys = (np.arange(cfg.world) + 0.5) / cfg.world
    depth_bg = np.repeat((0.6 + 0.4 * ys)[:, None], cfg.world, axis=1)

    T = cfg.frames
    rgb = np.empty((T, cfg.world, cfg.world, 3))
    depth = np.empty((T, cfg.world, cfg.world))
    thermal = np.empty_like(depth)
    lum = np.zeros((T + 1, cfg.world, cfg.world))
    objects = distractors + [target]    # target painted last, never occluded
    for t in range(T + 1):
        masks = [_shape_mask(o.shape, *o.path[t], o.w, o.h, cfg.world) for o in objects]
        for o, m in zip(objects, masks):
            if o.hidden_in != "event":
                lum[t][m] = (o.luminance * _surface_pattern(*o.path[t], o.w, o.h, cfg.world))[m]
        if t == 0:
            continue
        f = t - 1
        img = np.repeat(texture[..., None], 3, axis=-1) + rng.normal(0, cfg.noise, (cfg.world, cfg.world, 3))
        dep = depth_bg.copy()
        heat = 0.1 + rng.normal(0, cfg.noise, (cfg.world, cfg.world))
        for o, m in zip(objects, masks):
            img[m] = PALETTE[o.color]
            if o.hidden_in != "depth":
                dep[m] = o.depth
            if o.hidden_in != "thermal":
                heat[m] = o.thermal
        rgb[f], depth[f], thermal[f] = img, dep, heat
    event = event_frames(lum)

    boxes = np.array([[*target.path[t + 1], target.w, target.h] for t in range(T)])
    cx, cy = target.path[1]
    rel = np.array([cx, cy]) / cfg.world - 0.5
    if abs(rel[0]) >= abs(rel[1]):
        pos = 0 if rel[0] < 0 else 1
    else:
        pos = 2 if rel[1] < 0 else 3
    language = np.array([COLOR_BASE + target.color, SHAPE_BASE + target.shape, POS_BASE + pos])
    return SyntheticScene(seed, cfg, target, distractors, rgb, depth, thermal, event, boxes, language)


def scene_config_for(index: int, base: SceneConfig, hard_fraction: float, count: int) -> SceneConfig:
    """Config of the ``index``-th scene of a set: the first round(hard_fraction*count) are hard,
    cycling through the auxiliary channels."""
    n_hard = int(round(hard_fraction * count))
    if index < n_hard:
        return SceneConfig(**{**asdict(base), "hard": True, "hard_modality": AUX_CHANNELS[index % 3]})
    return SceneConfig(**{**asdict(base), "hard": False, "hard_modality": None})


def generate_scenes(seed: int, count: int, hard_fraction: float = 0.0, base: SceneConfig = SceneConfig()) -> list:
    return [generate_scene(seed * 100003 + i, scene_config_for(i, base, hard_fraction, count)) for i in range(count)]


def save_scenes(scenes, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(scenes):
        p = out / f"scene_{i:04d}.npz"
        s.save(p)
        paths.append(p)
    return paths


def load_scenes(directory) -> list:
    return [SyntheticScene.load(p) for p in sorted(Path(directory).glob("scene_*.npz"))]
