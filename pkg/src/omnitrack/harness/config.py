"""Training configuration and its ``key = value`` text format."""
from __future__ import annotations

import ast
import configparser
from dataclasses import asdict, dataclass, fields
from typing import Optional

from ..losses import LossWeights
from ..model import ModelConfig
from .scenes import SceneConfig


@dataclass
class TrainConfig:
    stage: int = 1
    seed: int = 0
    # data
    num_scenes: int = 32
    frames: int = 24
    world: int = 32
    hard_fraction: float = 0.0
    data_dir: Optional[str] = None
    reference_ratio: tuple = (4.0, 1.0, 4.0)     # BBOX : NL : NL+BBOX
    max_interval: int = 200
    jitter: float = 0.2
    scale_jitter: float = 0.15
    # hard scenes: draw search frames from this many frames after the crossing (0 = anywhere)
    hard_focus: int = 0
    # optimisation
    steps: int = 1500
    batch_size: int = 8
    lr_encoder: float = 2e-3
    lr_head: float = 4e-3
    lr_stage2: float = 8e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    # losses
    lambda_1: float = 5.0
    lambda_giou: float = 2.0
    lambda_mmc: float = 0.1
    lambda_orth: float = 0.1
    tau: float = 0.07
    n_neg: int = 9
    # model
    dim: int = 16
    heads: int = 2
    shallow_layers: int = 2
    deep_layers: int = 2
    patch: int = 4
    template_size: int = 16
    search_size: int = 32
    rank: int = 8
    adapter_layers: str = "all"
    beta: float = 0.75
    # rank allocation (block averages; toy-scaled from 16 / 32 at rank 32)
    n_hat: int = 4
    m_hat: int = 8
    warmup_steps: int = 200
    alloc_interval: int = 100
    beta1: float = 0.85
    beta2: float = 0.85
    # tracking
    update_interval: float = 20
    confidence_threshold: float = 0.5

    def __post_init__(self):
        self.reference_ratio = tuple(float(r) for r in self.reference_ratio)
        if len(self.reference_ratio) != 3 or min(self.reference_ratio) < 0 or sum(self.reference_ratio) <= 0:
            raise ValueError("reference_ratio needs three non-negative entries, not all zero")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_1, self.lambda_giou, self.lambda_mmc, self.lambda_orth, self.tau, self.n_neg)

    def model_config(self) -> ModelConfig:
        return ModelConfig(dim=self.dim, heads=self.heads, shallow_layers=self.shallow_layers,
                           deep_layers=self.deep_layers, patch=self.patch, template_size=self.template_size,
                           search_size=self.search_size, rank=self.rank, adapter_layers=self.adapter_layers,
                           beta=self.beta, tau=self.tau)

    def scene_config(self) -> SceneConfig:
        return SceneConfig(world=self.world, frames=self.frames)

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})


def _parse_value(text: str):
    text = text.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if text.lower() in ("inf", "infinity"):
        return float("inf")
    if ":" in text and all(p.strip().replace(".", "", 1).isdigit() for p in text.split(":")):
        return tuple(float(p) for p in text.split(":"))
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config(text: str) -> tuple[TrainConfig, list]:
    """Parse ``key = value`` lines (``#`` comments). Returns the config and unknown keys."""
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None, delimiters=("=",))
    parser.optionxform = str
    parser.read_string("[config]\n" + text)
    known = {f.name for f in fields(TrainConfig)}
    values, unknown = {}, []
    for key, raw in parser.items("config"):
        if key in known:
            values[key] = _parse_value(raw)
        else:
            unknown.append(key)
    return TrainConfig(**values), unknown


def load_config(path) -> tuple[TrainConfig, list]:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, tuple):
            value = ":".join(f"{v:g}" for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
