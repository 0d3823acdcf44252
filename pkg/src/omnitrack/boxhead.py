"""Reference-adaptive box head.

Context tokens ``E_t`` (template plus stored search embeddings) are split by
attention with the semantic token into target, distractor and background
aggregates; together with two learned prototypes these score every search
patch contrastively. A small three-branch conv head regresses centre,
offset and size maps.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from .losses import Box, box_patch_targets
from .numerics import DTYPE, DegenerateInputError, keep_mask_to_additive, masked_softmax, safe_cosine

log = logging.getLogger(__name__)


def _logits(T: torch.Tensor, E_t: torch.Tensor) -> torch.Tensor:
    return (E_t @ T.unsqueeze(-1)).squeeze(-1) / math.sqrt(T.shape[-1])


def in_out_attention(T: torch.Tensor, E_t: torch.Tensor, in_box: torch.Tensor, valid: Optional[torch.Tensor] = None):
    """In-box / out-box attention of the semantic token over context tokens.

    Returns ``(A_in, A_out, T_t)`` with ``T_t = A_in @ E_t``. ``valid`` marks
    which context rows exist at all (e.g. an absent template).
    """
    in_box = torch.as_tensor(in_box, dtype=torch.bool)
    if valid is None:
        valid = torch.ones_like(in_box)
    if bool(((in_box & valid).sum(-1) == 0).any()):
        raise DegenerateInputError("no in-box context token")
    logits = _logits(T, E_t)
    A_in = masked_softmax(logits, keep_mask_to_additive(in_box & valid))
    A_out = masked_softmax(logits, keep_mask_to_additive(~in_box & valid))
    T_t = (A_in.unsqueeze(-2) @ E_t).squeeze(-2)
    return A_in, A_out, T_t


def distractor_split(A_out: torch.Tensor, beta: float, out_box: Optional[torch.Tensor] = None,
                     inclusive: bool = False) -> torch.Tensor:
    """Boolean distractor indicator over context tokens.

    Out-box probabilities are ranked in descending order (ties: lower index
    first). A token is a distractor when the cumulative mass of the tokens
    ranked strictly above it is below ``beta``; ``inclusive`` counts the
    token's own mass too.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    A = A_out.detach()
    if out_box is None:
        out_box = A > 0
    order = torch.sort(A.masked_fill(~out_box, -1.0), dim=-1, descending=True, stable=True).indices
    ranked = A.gather(-1, order)
    cum = torch.cumsum(ranked, dim=-1)
    prefix = cum if inclusive else cum - ranked
    is_d_ranked = prefix < beta
    is_d = torch.zeros_like(out_box).scatter(-1, order, is_d_ranked)
    return is_d & out_box


def split_distractor_mask(A_out: torch.Tensor, beta: float, out_box: Optional[torch.Tensor] = None,
                          inclusive: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Additive masks (M_d, M~_d): distractors vs background within the out-box set."""
    if out_box is None:
        out_box = A_out.detach() > 0
    is_d = distractor_split(A_out, beta, out_box, inclusive)
    return keep_mask_to_additive(is_d), keep_mask_to_additive(out_box & ~is_d)


def scenario_tokens(T: torch.Tensor, E_t: torch.Tensor, in_box: torch.Tensor, beta: float = 0.75,
                    valid: Optional[torch.Tensor] = None, inclusive: bool = False):
    """Target, distractor and background tokens mined from the context.

    An empty distractor (or background) set yields a zero token.
    """
    in_box = torch.as_tensor(in_box, dtype=torch.bool)
    if valid is None:
        valid = torch.ones_like(in_box)
    _, A_out, T_t = in_out_attention(T, E_t, in_box, valid)
    out_box = ~in_box & valid
    is_d = distractor_split(A_out, beta, out_box, inclusive)
    logits = _logits(T, E_t)
    A_d = masked_softmax(logits, keep_mask_to_additive(is_d))
    A_b = masked_softmax(logits, keep_mask_to_additive(out_box & ~is_d))
    T_d = (A_d.unsqueeze(-2) @ E_t).squeeze(-2)
    T_b = (A_b.unsqueeze(-2) @ E_t).squeeze(-2)
    return T_t, T_d, T_b


class Prototypes(nn.Module):
    """Learned distractor and background prototypes shared by all references."""

    def __init__(self, dim: int):
        super().__init__()
        self.distractor = nn.Parameter(torch.randn(dim, dtype=DTYPE) * 0.1)
        self.background = nn.Parameter(torch.randn(dim, dtype=DTYPE) * 0.1)


def target_score_map(E_x: torch.Tensor, T_semantic: torch.Tensor, prototypes: Prototypes, tokens, tau: float = 0.07):
    """Per-patch probability of being the target, in (0, 1).

    The background score is the max over the distractor score, the background
    score and a constant zero. Zero-norm patches score similarity 0.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    T_t, T_d, T_b = tokens
    P_t = (T_semantic + T_t).unsqueeze(-2)
    P_d = (prototypes.distractor + T_d).unsqueeze(-2)
    P_b = (prototypes.background + T_b).unsqueeze(-2)
    if bool((torch.linalg.vector_norm(E_x, dim=-1) == 0).any()):
        log.debug("zero-norm search embedding scored with similarity 0")
    a_t = safe_cosine(E_x, P_t) / tau
    a_b = torch.maximum(torch.maximum(safe_cosine(E_x, P_d), safe_cosine(E_x, P_b)) / tau, torch.zeros_like(a_t))
    return torch.sigmoid(a_t - a_b)


class _Branch(nn.Sequential):
    def __init__(self, dim: int, out: int):
        hid = max(dim // 2, 1)
        super().__init__(
            nn.Conv2d(dim, hid, 3, padding=1, dtype=DTYPE),
            nn.ReLU(),
            nn.Conv2d(hid, out, 3, padding=1, dtype=DTYPE),
        )


class RegressionHead(nn.Module):
    """Centre / offset / size branches over the g x g search feature map."""

    def __init__(self, dim: int):
        super().__init__()
        self.center = _Branch(dim, 1)
        self.offset = _Branch(dim, 2)
        self.size = _Branch(dim, 2)

    def forward(self, E_x: torch.Tensor):
        squeeze = E_x.dim() == 2
        if squeeze:
            E_x = E_x.unsqueeze(0)
        b, n, c = E_x.shape
        g = math.isqrt(n)
        if g * g != n:
            raise ValueError(f"{n} search tokens do not form a square grid")
        fmap = E_x.transpose(1, 2).reshape(b, c, g, g)
        C_hat = torch.sigmoid(self.center(fmap))[:, 0]
        O_hat = torch.sigmoid(self.offset(fmap))
        S_hat = torch.sigmoid(self.size(fmap))
        if squeeze:
            return C_hat[0], O_hat[0], S_hat[0]
        return C_hat, O_hat, S_hat


regression_head = RegressionHead


def decode_box(C_hat, L_hat, O_hat, S_hat, patch: int, H_x: int, W_x: int) -> tuple[Box, float]:
    """Box at the argmax of C_hat * L_hat (ties to the first row-major cell).

    Width uses S_hat[0] * H_x and height S_hat[1] * W_x, as written in the
    method; identical for square search regions.
    """
    g = C_hat.shape[-1]
    prod = (C_hat * L_hat.reshape(C_hat.shape)).detach().reshape(-1)
    idx = int(torch.argmax(prod))
    # torch.argmax returns the first maximal index on CPU; enforce it anyway
    idx = int(torch.nonzero(prod == prod[idx])[0])
    yc, xc = divmod(idx, g)
    cx = (xc + float(O_hat[0, yc, xc])) * patch
    cy = (yc + float(O_hat[1, yc, xc])) * patch
    w = float(S_hat[0, yc, xc]) * H_x
    h = float(S_hat[1, yc, xc]) * W_x
    return Box(cx, cy, w, h), float(prod[idx])


def box_at_cells(O_hat: torch.Tensor, S_hat: torch.Tensor, cells: torch.Tensor, patch: int, size: int) -> torch.Tensor:
    """Differentiable (B, 4) boxes read out of batched maps at flat cell indices."""
    b, _, g, _ = O_hat.shape
    yc = torch.div(cells, g, rounding_mode="floor")
    xc = cells % g
    ar = torch.arange(b)
    cx = (xc.to(DTYPE) + O_hat[ar, 0, yc, xc]) * patch
    cy = (yc.to(DTYPE) + O_hat[ar, 1, yc, xc]) * patch
    w = S_hat[ar, 0, yc, xc] * size
    h = S_hat[ar, 1, yc, xc] * size
    return torch.stack([cx, cy, w, h], dim=-1)


@dataclass
class ContextMemory:
    """Template plus the most recent confident search embeddings, with cached scenario tokens."""

    patch: int
    grid: int
    beta: float = 0.75
    threshold: float = 0.5
    interval: float = 20
    capacity: int = 2
    entries: list = field(default_factory=list)
    tokens: Optional[tuple] = None
    frames_since_update: int = 0
    inclusive: bool = False

    def context(self):
        if not self.entries:
            return None, None
        E = torch.cat([e for e, _ in self.entries], dim=0)
        m = torch.cat([m for _, m in self.entries], dim=0)
        return E, m

    def refresh(self, semantic: torch.Tensor):
        E, m = self.context()
        if E is None or not bool(m.any()):
            zero = torch.zeros_like(semantic)
            self.tokens = (zero, zero, zero)
        else:
            with torch.no_grad():
                self.tokens = scenario_tokens(semantic, E, m, self.beta, inclusive=self.inclusive)
        self.frames_since_update = 0
        return self.tokens

    def add(self, embeddings: torch.Tensor, in_box: torch.Tensor):
        self.entries.append((embeddings.detach(), torch.as_tensor(in_box, dtype=torch.bool)))
        if len(self.entries) > self.capacity:
            # slot 0 is the template and is never evicted
            del self.entries[1]


def update_context(mem: ContextMemory, E_x: torch.Tensor, box: Box, confidence: float,
                   semantic: Optional[torch.Tensor] = None) -> ContextMemory:
    """Advance the memory by one tracked frame (mutates and returns ``mem``)."""
    if confidence > mem.threshold:
        in_box, _ = box_patch_targets(box, mem.patch, mem.grid)
        mem.add(E_x, in_box)
    mem.frames_since_update += 1
    if mem.frames_since_update >= mem.interval and semantic is not None:
        mem.refresh(semantic)
    return mem
