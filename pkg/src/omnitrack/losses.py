"""Training objectives.

Every loss is a differentiable torch function of float64 tensors; gradients
come from autograd (see ``numerics.value_and_grad``) and are validated against
central differences in the test-suite.

Boxes are ``(cx, cy, w, h)`` in pixels of the image they live in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import torch

from .numerics import DTYPE, DegenerateInputError, safe_cosine

PROB_EPS = 1e-7


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box extent {self}")

    @classmethod
    def from_xyxy(cls, x0, y0, x1, y1) -> "Box":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def xyxy(self) -> tuple:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def tensor(self) -> torch.Tensor:
        return torch.tensor([self.cx, self.cy, self.w, self.h], dtype=DTYPE)

    def scaled(self, s: float) -> "Box":
        return Box(self.cx * s, self.cy * s, self.w * s, self.h * s)


@dataclass
class LossWeights:
    lambda_1: float = 5.0
    lambda_giou: float = 2.0
    lambda_mmc: float = 0.1
    lambda_orth: float = 0.1
    tau: float = 0.07
    n_neg: int = 9

    def __post_init__(self):
        if min(self.lambda_1, self.lambda_giou, self.lambda_mmc, self.lambda_orth) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


BoxLike = Union[Box, torch.Tensor, Sequence[float]]


def box_tensor(box: BoxLike) -> torch.Tensor:
    if isinstance(box, Box):
        return box.tensor()
    return torch.as_tensor(box, dtype=DTYPE)


def box_patch_targets(box: BoxLike, patch: int, grid: int) -> tuple[torch.Tensor, torch.Tensor]:
    """In-box patch indicator (..., grid*grid) and the flat index of the centre patch.

    A patch is in-box when its centre lies inside the box; the patch holding
    the box centre always counts, so the set is never empty.
    """
    b = box_tensor(box).detach()
    centers = (torch.arange(grid, dtype=DTYPE) + 0.5) * patch
    x0 = (b[..., 0] - b[..., 2] / 2).unsqueeze(-1)
    x1 = (b[..., 0] + b[..., 2] / 2).unsqueeze(-1)
    y0 = (b[..., 1] - b[..., 3] / 2).unsqueeze(-1)
    y1 = (b[..., 1] + b[..., 3] / 2).unsqueeze(-1)
    in_x = (centers >= x0) & (centers <= x1)
    in_y = (centers >= y0) & (centers <= y1)
    inside = (in_y.unsqueeze(-1) & in_x.unsqueeze(-2)).flatten(-2)
    col = (b[..., 0] / patch).floor().clamp(0, grid - 1).long()
    row = (b[..., 1] / patch).floor().clamp(0, grid - 1).long()
    center = row * grid + col
    inside = inside.scatter(-1, center.unsqueeze(-1), True)
    return inside, center


def mmc_loss(T: torch.Tensor, E_x: torch.Tensor, gt_box: BoxLike, weights: LossWeights = LossWeights(),
             patch: int = 4) -> torch.Tensor:
    """Target-wise contrastive loss for one layer, averaged over the batch.

    ``T``: (..., C) semantic token; ``E_x``: (..., N_x, C) search embeddings.
    The positive is the patch at the box centre; negatives are the top
    ``n_neg`` scores among strictly out-of-box patches (selection is not
    differentiated; ties go to the lowest patch index).
    """
    grid = math.isqrt(E_x.shape[-2])
    inside, center = box_patch_targets(gt_box, patch, grid)
    scores = safe_cosine(E_x, T.unsqueeze(-2)) / weights.tau
    if bool(((~inside).sum(-1) < 1).any()):
        raise DegenerateInputError("no out-of-box patch available for negatives")
    return contrastive_from_scores(scores, inside, center, weights.n_neg)


def contrastive_from_scores(scores: torch.Tensor, inside: torch.Tensor, center: torch.Tensor,
                            n_neg: int) -> torch.Tensor:
    """InfoNCE over precomputed (..., N) scores: positive at ``center``, top-``n_neg`` out-box negatives."""
    k = min(n_neg, int((~inside).sum(-1).min()))
    ranked = scores.detach().masked_fill(inside, float("-inf"))
    order = torch.sort(ranked, dim=-1, descending=True, stable=True).indices[..., :k]
    neg = scores.gather(-1, order)
    pos = scores.gather(-1, center.unsqueeze(-1))
    all_scores = torch.cat([pos, neg], dim=-1)
    return (torch.logsumexp(all_scores, dim=-1) - pos.squeeze(-1)).mean()


def _check_prob(p: torch.Tensor, name: str):
    if bool(torch.isnan(p).any()) or bool((p < 0).any()) or bool((p > 1).any()):
        raise ValueError(f"{name} must hold probabilities in [0, 1]")


def target_map_loss(L_hat: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of the target-similarity map against an in-box indicator."""
    _check_prob(L_hat, "L_hat")
    p = L_hat.clamp(PROB_EPS, 1 - PROB_EPS)
    y = target.to(DTYPE)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def gaussian_center_target(box: BoxLike, patch: int, grid: int) -> torch.Tensor:
    """(..., grid, grid) Gaussian heat-map peaking at exactly 1 on the box-centre cell."""
    b = box_tensor(box).detach()
    col = (b[..., 0] / patch).floor().clamp(0, grid - 1)
    row = (b[..., 1] / patch).floor().clamp(0, grid - 1)
    sx = (b[..., 2] / patch / 6).clamp_min(1e-3)
    sy = (b[..., 3] / patch / 6).clamp_min(1e-3)
    idx = torch.arange(grid, dtype=DTYPE)
    gx = torch.exp(-((idx - col.unsqueeze(-1)) ** 2) / (2 * sx.unsqueeze(-1) ** 2))
    gy = torch.exp(-((idx - row.unsqueeze(-1)) ** 2) / (2 * sy.unsqueeze(-1) ** 2))
    return gy.unsqueeze(-1) * gx.unsqueeze(-2)


def focal_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """Gaussian-weighted focal loss, normalized by the number of positive cells."""
    _check_prob(pred, "C_hat")
    p = pred.clamp(PROB_EPS, 1 - PROB_EPS)
    pos = target.eq(1).to(DTYPE)
    neg = 1 - pos
    pos_loss = torch.log(p) * (1 - p) ** alpha * pos
    neg_loss = torch.log(1 - p) * p ** alpha * (1 - target) ** beta * neg
    num_pos = pos.sum().clamp_min(1)
    return -(pos_loss.sum() + neg_loss.sum()) / num_pos


def center_loss(C_hat: torch.Tensor, gt_box: BoxLike, patch: int = 4) -> torch.Tensor:
    grid = C_hat.shape[-1]
    return focal_loss(C_hat, gaussian_center_target(gt_box, patch, grid))


def _xyxy(b: torch.Tensor):
    return (b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
            b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2)


def giou(a: BoxLike, b: BoxLike) -> torch.Tensor:
    """Generalized IoU of (cx, cy, w, h) boxes, elementwise over leading dims."""
    a, b = box_tensor(a), box_tensor(b)
    if bool((a[..., 2:] < 0).any()) or bool((b[..., 2:] < 0).any()):
        raise ValueError("negative box extent")
    ax0, ay0, ax1, ay1 = _xyxy(a)
    bx0, by0, bx1, by1 = _xyxy(b)
    iw = (torch.minimum(ax1, bx1) - torch.maximum(ax0, bx0)).clamp_min(0)
    ih = (torch.minimum(ay1, by1) - torch.maximum(ay0, by0)).clamp_min(0)
    inter = iw * ih
    # areas from the same corners as the overlap keeps inter <= union under rounding
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (torch.maximum(ax1, bx1) - torch.minimum(ax0, bx0)) * (torch.maximum(ay1, by1) - torch.minimum(ay0, by0))
    if bool((hull <= 0).any()) or bool((union <= 0).any()):
        raise DegenerateInputError("GIoU of degenerate (zero-area) boxes")
    return inter / union - (hull - union) / hull


def iou(a: BoxLike, b: BoxLike) -> torch.Tensor:
    a, b = box_tensor(a), box_tensor(b)
    ax0, ay0, ax1, ay1 = _xyxy(a)
    bx0, by0, bx1, by1 = _xyxy(b)
    iw = (torch.minimum(ax1, bx1) - torch.maximum(ax0, bx0)).clamp_min(0)
    ih = (torch.minimum(ay1, by1) - torch.maximum(ay0, by0)).clamp_min(0)
    inter = iw * ih
    # areas from the same corners as the overlap keeps inter <= union under rounding
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return torch.where(union > 0, inter / union.clamp_min(1e-12), torch.zeros_like(union))


def box_loss(pred: BoxLike, gt: BoxLike, weights: LossWeights = LossWeights(), image_size: float = 1.0) -> torch.Tensor:
    """lambda_1 * mean L1 over normalized (cx, cy, w, h) + lambda_giou * (1 - GIoU), batch-averaged."""
    p, g = box_tensor(pred), box_tensor(gt)
    l1 = ((p - g).abs() / image_size).mean(-1)
    return (weights.lambda_1 * l1 + weights.lambda_giou * (1 - giou(p, g))).mean()


def stage1_total(tgt, cls, box, mmc: Union[torch.Tensor, float, Iterable], weights: LossWeights = LossWeights()):
    """L_tgt + L_cls + L_box + lambda_mmc * sum over layers of L_mmc."""
    if isinstance(mmc, (list, tuple)):
        mmc = sum(mmc) if mmc else 0.0
    return tgt + cls + box + weights.lambda_mmc * mmc


def orthogonality_penalty(P: torch.Tensor, Q: torch.Tensor) -> torch.Tensor:
    """||P^T P - I||_F^2 + ||Q Q^T - I||_F^2 for P: (d_in, r), Q: (r, d_out)."""
    r = P.shape[-1]
    eye = torch.eye(r, dtype=DTYPE)
    return ((P.T @ P - eye) ** 2).sum() + ((Q @ Q.T - eye) ** 2).sum()


def stage2_total(stage1, factors: Iterable[tuple], weights: LossWeights = LossWeights()):
    """Stage-1 objective plus lambda_orth times the summed orthogonality penalties."""
    penalty = sum((orthogonality_penalty(P, Q) for P, Q in factors), torch.zeros((), dtype=DTYPE))
    return stage1 + weights.lambda_orth * penalty
