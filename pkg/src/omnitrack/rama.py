"""Rank-adaptive modality adaptation.

An adapter block adds ``E_R P diag(lam_R) Q + ReLU(E_a P diag(lam_a) Q)`` to
a frozen projection. ``P`` and ``Q`` are shared by all video modalities; each
modality owns its own singular-value vector, stored as one row of ``lam``
in the order RGB, depth, thermal, event.

Rank allocation zeroes singular values in place (masking), so later rounds
can revive them; ``prune_block`` deletes them for inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from .encoder import MODALITY_ORDER, VideoModality
from .numerics import DTYPE, ShapeError

N_MODALITIES = len(MODALITY_ORDER)
# auxiliary singular values start off zero: ReLU has no gradient at 0, so a
# zero start would leave the auxiliary rows untrainable
AUX_LAMBDA_INIT = 1e-2


def _orthonormal(rows: int, cols: int, gen: torch.Generator) -> torch.Tensor:
    a = torch.randn(max(rows, cols), min(rows, cols), generator=gen, dtype=DTYPE)
    q, _ = torch.linalg.qr(a)
    return q if rows >= cols else q.T


class AdapterBlock(nn.Module):
    """One auxiliary modality tuning block attached to a frozen projection."""

    def __init__(self, d_in: int, d_out: int, rank: int, index: int = 0, site: str = "",
                 W: Optional[torch.Tensor] = None, bias: Optional[torch.Tensor] = None,
                 gen: Optional[torch.Generator] = None):
        super().__init__()
        gen = gen if gen is not None else torch.Generator().manual_seed(index)
        self.index, self.site, self.rank = index, site, rank
        self.P = nn.Parameter(_orthonormal(d_in, rank, gen))
        self.Q = nn.Parameter(_orthonormal(rank, d_out, gen))
        lam = torch.full((N_MODALITIES, rank), AUX_LAMBDA_INIT, dtype=DTYPE)
        lam[0] = 0.0
        self.lam = nn.Parameter(lam)
        # frozen base weight, kept here for standalone use; not checkpointed
        self.register_buffer("W", W if W is not None else torch.zeros(d_in, d_out, dtype=DTYPE), persistent=False)
        self.register_buffer("bias", bias, persistent=False)

    def _lowrank(self, h: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
        return ((h @ self.P) * lam) @ self.Q

    def delta(self, h: torch.Tensor, fusion) -> torch.Tensor:
        """Adapter contribution for a (B, n, d_in) sequence, given the encoder's row bookkeeping."""
        out = self._lowrank(h, self.lam[0]) * fusion.main_rows
        if len(fusion.src):
            lam_a = self.lam[fusion.mod_idx].unsqueeze(1)
            aux = torch.relu(self._lowrank(h[:, fusion.src], lam_a))
            out = out.index_add(1, fusion.dst, aux)
        return out


def amtb_forward(E_R: torch.Tensor, E_a: Optional[torch.Tensor], block: AdapterBlock,
                 a: VideoModality = VideoModality.RGB) -> torch.Tensor:
    """E_R W + E_R P diag(lam_R) Q + ReLU(E_a P diag(lam_a) Q)."""
    if E_R.shape[-1] != block.P.shape[0]:
        raise ShapeError(f"input width {E_R.shape[-1]} does not match P {tuple(block.P.shape)}")
    out = E_R @ block.W + block._lowrank(E_R, block.lam[0])
    if block.bias is not None:
        out = out + block.bias
    if E_a is not None:
        a = VideoModality(a)
        if a is VideoModality.RGB:
            raise ValueError("aux modality must not be RGB")
        if E_a.shape != E_R.shape:
            raise ShapeError("aux and RGB inputs differ in shape")
        out = out + torch.relu(block._lowrank(E_a, block.lam[a.index]))
    return out


def sensitivity(w, grad):
    """|w * dL/dw|: first-order loss change when w is zeroed."""
    if isinstance(w, torch.Tensor) or isinstance(grad, torch.Tensor):
        return (torch.as_tensor(w, dtype=DTYPE) * torch.as_tensor(grad, dtype=DTYPE)).abs()
    return abs(w * grad)


@dataclass
class ImportanceState:
    """EMA-smoothed sensitivity and uncertainty for every adapter parameter."""

    beta1: float = 0.85
    beta2: float = 0.85
    step: int = 0
    ibar: dict = field(default_factory=dict)
    ubar: dict = field(default_factory=dict)


def update_importance(state: ImportanceState, sens: dict) -> ImportanceState:
    """One EMA step; ``sens`` maps parameter name -> current sensitivity tensor."""
    ibar, ubar = dict(state.ibar), dict(state.ubar)
    for name, I in sens.items():
        I = torch.as_tensor(I, dtype=DTYPE)
        prev_i = ibar.get(name, torch.zeros_like(I))
        prev_u = ubar.get(name, torch.zeros_like(I))
        new_i = state.beta1 * prev_i + (1 - state.beta1) * I
        ibar[name] = new_i
        ubar[name] = state.beta2 * prev_u + (1 - state.beta2) * (new_i - I).abs()
    return ImportanceState(state.beta1, state.beta2, state.step + 1, ibar, ubar)


def importance_score(state: ImportanceState) -> dict:
    return {name: state.ibar[name] * state.ubar[name] for name in state.ibar}


def block_sensitivities(blocks: list) -> dict:
    """Current |w * grad| for P, Q and lam of every block (zeros where no grad)."""
    out = {}
    for k, blk in enumerate(blocks):
        for pname in ("P", "Q", "lam"):
            p = getattr(blk, pname)
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            out[f"{k}.{pname}"] = sensitivity(p.detach(), g.detach())
    return out


def _score_parts(blocks, scores):
    lam = torch.stack([scores[f"{k}.lam"] for k in range(len(blocks))])            # (K, 4, r)
    p_mean = torch.stack([scores[f"{k}.P"].mean(0) for k in range(len(blocks))])   # (K, r)
    q_mean = torch.stack([scores[f"{k}.Q"].mean(1) for k in range(len(blocks))])   # (K, r)
    return lam, p_mean, q_mean


def shared_importance(blocks: list, scores: dict) -> torch.Tensor:
    """(K, r) modality-shared importance of every tuple (k, i)."""
    lam, p_mean, q_mean = _score_parts(blocks, scores)
    return lam.sum(1) + p_mean + q_mean


def _top_keep(flat_scores: torch.Tensor, budget: int, eligible: torch.Tensor) -> torch.Tensor:
    """Boolean keep over a flat score vector: top ``budget`` eligible entries, ties to lower index."""
    s = flat_scores.masked_fill(~eligible, float("-inf"))
    order = torch.sort(s, descending=True, stable=True).indices
    keep = torch.zeros_like(eligible)
    n_elig = int(eligible.sum())
    keep[order[:min(budget, n_elig)]] = True
    return keep


def allocate_shared(blocks: list, S: torch.Tensor, n: int) -> torch.Tensor:
    """Zero every modality's singular value outside the global top-n tuples.

    Returns the (K, r) boolean mask of kept tuples.
    """
    keep = _top_keep(S.reshape(-1), n, torch.ones(S.numel(), dtype=torch.bool)).reshape(S.shape)
    with torch.no_grad():
        for k, blk in enumerate(blocks):
            blk.lam.masked_fill_(~keep[k].unsqueeze(0), 0.0)
    return keep


def specific_importance(blocks: list, scores: dict, shared_keep: Optional[torch.Tensor] = None) -> torch.Tensor:
    """(K, r, 4) modality-specific importance; -inf marks tuples dropped by shared allocation."""
    lam, p_mean, q_mean = _score_parts(blocks, scores)
    S = lam.transpose(1, 2) + (p_mean + q_mean).unsqueeze(-1)
    if shared_keep is None:
        shared_keep = torch.stack([(blk.lam.detach() != 0).any(0) for blk in blocks])
    return S.masked_fill(~shared_keep.unsqueeze(-1), float("-inf"))


def allocate_specific(blocks: list, S_specific: torch.Tensor, m: int) -> torch.Tensor:
    """Keep the global top-m (tuple, modality) singular values; ties by (k, i, modality).

    Returns the (K, r, 4) boolean mask of kept values.
    """
    eligible = torch.isfinite(S_specific).reshape(-1)
    keep = _top_keep(S_specific.reshape(-1), m, eligible).reshape(S_specific.shape)
    with torch.no_grad():
        for k, blk in enumerate(blocks):
            blk.lam.masked_fill_(~keep[k].T, 0.0)
    return keep


def prune_block(block: AdapterBlock, a: VideoModality) -> AdapterBlock:
    """Compact copy that keeps only ranks where lam_R or lam_a is non-zero.

    The compact block stores the RGB values in row 0 and ``a``'s values in
    their usual row; other modalities' rows are zeroed.
    """
    a = VideoModality(a)
    lam = block.lam.detach()
    live = (lam[0] != 0) | (lam[a.index] != 0)
    idx = torch.nonzero(live).flatten()
    out = AdapterBlock(block.P.shape[0], block.Q.shape[1], len(idx), block.index, block.site,
                       block.W.clone(), None if block.bias is None else block.bias.clone())
    with torch.no_grad():
        out.P = nn.Parameter(block.P.detach()[:, idx].clone())
        out.Q = nn.Parameter(block.Q.detach()[idx].clone())
        new_lam = torch.zeros(N_MODALITIES, len(idx), dtype=DTYPE)
        new_lam[0] = lam[0, idx]
        new_lam[a.index] = lam[a.index, idx]
        out.lam = nn.Parameter(new_lam)
    return out


@dataclass
class RankBudget:
    n_hat: int
    m_hat: int
    n_blocks: int

    @property
    def n(self) -> int:
        return self.n_hat * self.n_blocks

    @property
    def m(self) -> int:
        return self.m_hat * self.n_blocks

    def check(self, rank: int):
        if self.n > rank * self.n_blocks:
            raise ValueError(f"shared budget {self.n} exceeds {rank * self.n_blocks} tuples")
        if self.m > 4 * self.n:
            raise ValueError(f"specific budget {self.m} exceeds 4n = {4 * self.n}")


def allocation_schedule(step: int, warmup_steps: int, alloc_interval: int) -> str:
    if step >= warmup_steps and step % alloc_interval == 0:
        return "allocate"
    return "none"


def allocate(blocks: list, state: ImportanceState, budget: RankBudget):
    """Shared then specific allocation from the current importance state."""
    scores = importance_score(state)
    keep = allocate_shared(blocks, shared_importance(blocks, scores), budget.n)
    spec = allocate_specific(blocks, specific_importance(blocks, scores, keep), budget.m)
    return keep, spec


def rank_report(blocks: list, shared_keep: Optional[torch.Tensor] = None) -> dict:
    """Non-zero rank count per modality and block, plus budget totals."""
    lam = torch.stack([blk.lam.detach() for blk in blocks])  # (K, 4, r)
    nz = lam != 0
    per_mod = {m.value: [int(x) for x in nz[:, i].sum(-1)] for i, m in enumerate(MODALITY_ORDER)}
    tuples = shared_keep if shared_keep is not None else nz.any(1)
    return {
        "per_modality": per_mod,
        "shared_tuples": int(tuples.sum()),
        "nonzero_values": int(nz.sum()),
    }
