"""Two-stage training loops.

Stage 1 fits the encoder, box head and prototypes on RGB units with mixed
reference modalities. Stage 2 freezes all of that, enables the auxiliary
patch embedding plus adapter blocks, and trains them on RGB+aux units.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from ..losses import (LossWeights, box_loss, box_patch_targets, center_loss, iou, mmc_loss, stage1_total, stage2_total,
                      target_map_loss)
from ..boxhead import box_at_cells, decode_box
from ..model import ModelConfig, Tracker
from ..numerics import DTYPE
from ..rama import ImportanceState, RankBudget, allocate, allocation_schedule, block_sensitivities, rank_report, \
    update_importance
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import TrainingUnit, sample_reference, sample_training_unit
from .scenes import AUX_CHANNELS, generate_scenes, load_scenes

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class FreezeViolation(TrainingError):
    pass


# --- batches -----------------------------------------------------------------

@dataclass
class Batch:
    """2B sequences: rows [0, B) use each unit's first search region, [B, 2B) the second."""

    refs: list
    language: torch.Tensor
    template: torch.Tensor
    template_on: torch.Tensor
    template_box: torch.Tensor
    search: torch.Tensor
    boxes: torch.Tensor
    partner: torch.Tensor
    aux_template: Optional[torch.Tensor] = None
    aux_search: Optional[torch.Tensor] = None
    modality: Optional[list] = None

    def __len__(self):
        return len(self.refs)


def collate(units: list) -> Batch:
    b = len(units)
    t = lambda a: torch.as_tensor(np.asarray(a), dtype=DTYPE)
    twice = lambda xs: xs + xs
    refs = twice([u.reference for u in units])
    search = torch.cat([t([u.search[0] for u in units]), t([u.search[1] for u in units])])
    boxes = torch.cat([t([u.boxes[0] for u in units]), t([u.boxes[1] for u in units])])
    batch = Batch(
        refs=refs,
        language=torch.as_tensor(np.stack(twice([u.language for u in units])), dtype=torch.long),
        template=t(twice([u.template for u in units])),
        template_on=torch.tensor([r.has_template for r in refs]),
        template_box=t(twice([u.template_box for u in units])),
        search=search,
        boxes=boxes,
        partner=(torch.arange(2 * b) + b) % (2 * b),
    )
    if units[0].aux_search is not None:
        batch.aux_template = t(twice([u.aux_template for u in units]))
        batch.aux_search = torch.cat([t([u.aux_search[0] for u in units]), t([u.aux_search[1] for u in units])])
        batch.modality = twice([u.modality for u in units])
    return batch


def forward_batch(model: Tracker, batch: Batch, weights, with_mmc: bool = True) -> dict:
    """All stage-1 loss terms for a batch, plus the raw prediction maps."""
    cfg = model.cfg
    emb = model.encode(batch.refs, batch.language, batch.template, batch.search,
                       batch.aux_template, batch.aux_search, batch.modality)
    E_x, E_z = emb.search(), emb.template()
    T = model.semantic(emb, batch.refs)

    in_x, ctr = box_patch_targets(batch.boxes, cfg.patch, cfg.grid)
    in_z, _ = box_patch_targets(batch.template_box, cfg.patch, cfg.template_size // cfg.patch)
    context = torch.cat([E_z, E_x[batch.partner]], dim=1)
    in_ctx = torch.cat([in_z, in_x[batch.partner]], dim=1)
    valid = torch.cat([batch.template_on.unsqueeze(-1).expand_as(in_z), torch.ones_like(in_x)], dim=1)
    tokens = model.mine_tokens(T, context, in_ctx, valid)

    L_hat, C_hat, O_hat, S_hat = model.score(E_x, T, tokens)
    pred = box_at_cells(O_hat, S_hat, ctr, cfg.patch, cfg.search_size)
    out = {
        "tgt": target_map_loss(L_hat, in_x),
        "cls": center_loss(C_hat, batch.boxes, cfg.patch),
        "box": box_loss(pred, batch.boxes, weights, cfg.search_size),
        "L_hat": L_hat, "C_hat": C_hat, "O_hat": O_hat, "S_hat": S_hat, "emb": emb,
    }
    mmc = []
    if with_mmc and weights.lambda_mmc > 0:
        for layer in range(len(emb.hidden)):
            mmc.append(mmc_loss(model.semantic(emb, batch.refs, layer), emb.search(layer), batch.boxes,
                                weights, cfg.patch))
    out["mmc"] = sum(mmc) if mmc else torch.zeros((), dtype=DTYPE)
    out["total"] = stage1_total(out["tgt"], out["cls"], out["box"], out["mmc"], weights)
    return out


def decode_batch(out: dict, cfg: ModelConfig) -> list:
    boxes = []
    for i in range(out["C_hat"].shape[0]):
        box, conf = decode_box(out["C_hat"][i], out["L_hat"][i], out["O_hat"][i], out["S_hat"][i],
                               cfg.patch, cfg.search_size, cfg.search_size)
        boxes.append((box, conf))
    return boxes


# --- data ----------------------------------------------------------------------

def training_scenes(cfg: TrainConfig) -> list:
    if cfg.data_dir:
        scenes = load_scenes(cfg.data_dir)
        if not scenes:
            raise TrainingError(f"no scenes found in {cfg.data_dir}")
        return scenes
    return generate_scenes(cfg.seed, cfg.num_scenes, cfg.hard_fraction, cfg.scene_config())


def _unit(cfg: TrainConfig, scene, reference, rng, modality=None) -> TrainingUnit:
    frames = None
    if scene.hard and cfg.hard_focus > 0:
        cross = scene.config.crossing_frame
        frames = (cross, cross + cfg.hard_focus)
    return sample_training_unit(scene, reference, rng, cfg.template_size, cfg.search_size, cfg.max_interval,
                                cfg.jitter, cfg.scale_jitter, modality, frames)


def sample_batch(cfg: TrainConfig, scenes: list, rng: np.random.Generator) -> Batch:
    units = []
    for _ in range(cfg.batch_size):
        scene = scenes[int(rng.integers(len(scenes)))]
        units.append(_unit(cfg, scene, sample_reference(rng, cfg.reference_ratio), rng))
    return collate(units)


def sample_aux_batch(cfg: TrainConfig, scenes: list, rng: np.random.Generator, step: int) -> Batch:
    """RGB+aux batch cycling depth / thermal / event; hard scenes only pair with their own channel."""
    units = []
    for i in range(cfg.batch_size):
        modality = AUX_CHANNELS[(step * cfg.batch_size + i) % len(AUX_CHANNELS)]
        pool = [s for s in scenes if not s.hard or s.config.hard_modality == modality]
        scene = pool[int(rng.integers(len(pool)))]
        units.append(_unit(cfg, scene, sample_reference(rng, cfg.reference_ratio), rng, modality))
    return collate(units)


def validation_units(cfg: TrainConfig, scenes: list, reference, count: int, seed: int = 12345,
                     modality=None) -> list:
    rng = np.random.default_rng(seed)
    return [_unit(cfg, scenes[i % len(scenes)], reference, rng, modality) for i in range(count)]


# --- checkpoints ---------------------------------------------------------------

def model_tensors(model: Tracker) -> dict:
    out = {"meta.config": model.cfg.meta_vector()}
    out.update({k: v for k, v in model.state_dict().items()})
    return out


def save_model(model: Tracker, path) -> None:
    save_checkpoint(model_tensors(model), path)


def model_from_tensors(tensors: dict, **cfg_extra) -> tuple[Tracker, list]:
    """Rebuild a tracker; returns it with the list of unrecognised entry names."""
    if "meta.config" not in tensors:
        raise TrainingError("checkpoint lacks meta.config")
    if any(k.startswith("adapters.shallow_") for k in tensors):
        cfg_extra.setdefault("adapter_layers", "all")
    cfg = ModelConfig.from_meta(tensors["meta.config"], **cfg_extra)
    model = Tracker(cfg)
    if any(k.startswith("adapters.") for k in tensors):
        model.attach_adapters()
    elif any(k.startswith("encoder.aux_patch_embed.") for k in tensors):
        model.encoder.enable_aux()
    state = model.state_dict()
    unknown = [k for k in tensors if k != "meta.config" and k not in state]
    missing = [k for k in state if k not in tensors]
    if missing:
        raise TrainingError(f"checkpoint is missing {len(missing)} entries, e.g. {missing[0]}")
    for k in state:
        if tuple(tensors[k].shape) != tuple(state[k].shape):
            raise TrainingError(f"shape mismatch for {k}: {tuple(tensors[k].shape)} vs {tuple(state[k].shape)}")
    model.load_state_dict({k: tensors[k] for k in state})
    if model.adapters is not None:
        # refresh the frozen base copies held by the adapter blocks
        for i, kind, layer in model.encoder.layers():
            group = model.adapters[f"{kind}_{i}"] if f"{kind}_{i}" in model.adapters else None
            if group is None:
                continue
            for site, blk in group.items():
                lin = getattr(layer, site)
                blk.W = lin.weight.detach().T.clone()
                blk.bias = lin.bias.detach().clone()
    return model, unknown


def load_model(path, **cfg_extra) -> tuple[Tracker, list]:
    return model_from_tensors(load_checkpoint(path), **cfg_extra)


def parameter_hash(model: Tracker) -> str:
    h = hashlib.sha256()
    for name, p in model.stage1_parameters():
        h.update(name.encode())
        h.update(p.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- loops ---------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Tracker
    losses: list = field(default_factory=list)
    seconds: float = 0.0
    report: Optional[dict] = None
    frozen_hash: Optional[str] = None


def _check_finite(out: dict, step: int):
    if not math.isfinite(float(out["total"].detach())):
        parts = {k: float(out[k].detach()) for k in ("tgt", "cls", "box", "mmc")}
        raise TrainingError(f"non-finite loss at step {step}: {parts}")


def _optimizer(groups, cfg: TrainConfig, lr_default: float):
    opt = torch.optim.AdamW(groups, lr=lr_default, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.steps, 1), eta_min=0.0)
    return opt, sched


def build_model(cfg: TrainConfig) -> Tracker:
    torch.manual_seed(cfg.seed)
    return Tracker(cfg.model_config())


def train_stage1(cfg: TrainConfig, scenes: Optional[list] = None, model: Optional[Tracker] = None,
                 log_every: int = 100) -> TrainResult:
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs a stage-1 config")
    scenes = scenes if scenes is not None else training_scenes(cfg)
    model = model if model is not None else build_model(cfg)
    weights = cfg.loss_weights()
    rng = np.random.default_rng(cfg.seed)
    enc = [p for n, p in model.stage1_parameters() if n.startswith("encoder.")]
    rest = [p for n, p in model.stage1_parameters() if not n.startswith("encoder.")]
    opt, sched = _optimizer([{"params": enc, "lr": cfg.lr_encoder}, {"params": rest, "lr": cfg.lr_head}],
                            cfg, cfg.lr_encoder)
    result = TrainResult(model)
    start = time.perf_counter()
    model.train()
    for step in range(cfg.steps):
        batch = sample_batch(cfg, scenes, rng)
        out = forward_batch(model, batch, weights)
        _check_finite(out, step)
        opt.zero_grad()
        out["total"].backward()
        torch.nn.utils.clip_grad_norm_(enc + rest, cfg.grad_clip)
        opt.step()
        sched.step()
        result.losses.append(float(out["total"].detach()))
        if log_every and step % log_every == 0:
            log.info("stage1 step %d loss %.4f (tgt %.3f cls %.3f box %.3f mmc %.3f)", step, float(out["total"].detach()),
                     *(float(out[k].detach()) for k in ("tgt", "cls", "box", "mmc")))
    result.seconds = time.perf_counter() - start
    model.eval()
    return result


def freeze_stage1(model: Tracker) -> str:
    for _, p in model.stage1_parameters():
        p.requires_grad_(False)
    return parameter_hash(model)


def train_stage2(cfg: TrainConfig, model: Tracker, scenes: Optional[list] = None,
                 log_every: int = 100) -> TrainResult:
    """Adapter fine-tuning on top of a stage-1 model (mutated in place)."""
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs a stage-2 config")
    scenes = scenes if scenes is not None else training_scenes(cfg)
    if model.adapters is None:
        model.cfg = dataclasses.replace(model.cfg, adapter_layers=cfg.adapter_layers)
    blocks = model.attach_adapters(cfg.seed)
    frozen = freeze_stage1(model)
    budget = RankBudget(cfg.n_hat, cfg.m_hat, len(blocks))
    budget.check(model.cfg.rank)
    params = list(model.encoder.aux_patch_embed.parameters()) + list(model.adapters.parameters())
    opt, sched = _optimizer([{"params": params, "lr": cfg.lr_stage2}], cfg, cfg.lr_stage2)
    weights = cfg.loss_weights()
    state = ImportanceState(cfg.beta1, cfg.beta2)
    rng = np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    result = TrainResult(model, frozen_hash=frozen)
    start = time.perf_counter()
    model.train()
    for step in range(cfg.steps):
        batch = sample_aux_batch(cfg, scenes, rng, step)
        out = forward_batch(model, batch, weights)
        factors = [(blk.P, blk.Q) for blk in blocks]
        out["total"] = stage2_total(out["total"], factors, weights)
        _check_finite(out, step)
        opt.zero_grad()
        out["total"].backward()
        state = update_importance(state, block_sensitivities(blocks))
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        sched.step()
        if allocation_schedule(step + 1, cfg.warmup_steps, cfg.alloc_interval) == "allocate":
            allocate(blocks, state, budget)
        result.losses.append(float(out["total"].detach()))
        if log_every and step % log_every == 0:
            log.info("stage2 step %d loss %.4f", step, float(out["total"].detach()))
    keep, _ = allocate(blocks, state, budget)
    result.report = rank_report(blocks, keep)
    result.report["budget"] = {"n": budget.n, "m": budget.m}
    result.seconds = time.perf_counter() - start
    if parameter_hash(model) != frozen:
        raise FreezeViolation("stage-1 parameters changed during stage 2")
    model.eval()
    return result


# --- unit-level evaluation -----------------------------------------------------

@torch.no_grad()
def unit_iou(model: Tracker, units: list, batch_size: int = 16) -> np.ndarray:
    """IoU of the decoded box against the ground truth for every search region of ``units``."""
    ious = []
    for i in range(0, len(units), batch_size):
        batch = collate(units[i:i + batch_size])
        out = forward_batch(model, batch, LossWeights(), with_mmc=False)
        for (box, _), gt in zip(decode_batch(out, model.cfg), batch.boxes):
            ious.append(float(iou(box.tensor(), gt)))
    return np.array(ious)


@torch.no_grad()
def semantic_alignment(model: Tracker, units: list, batch_size: int = 16) -> float:
    """Mean cosine between T_v and T_l over all layers on NL+BBOX units."""
    vals = []
    for i in range(0, len(units), batch_size):
        batch = collate(units[i:i + batch_size])
        emb = model.encode(batch.refs, batch.language, batch.template, batch.search)
        for layer in range(len(emb.hidden)):
            vals.append(torch.nn.functional.cosine_similarity(emb.semantic_v(layer), emb.semantic_l(layer), dim=-1))
    return float(torch.cat(vals).mean())

