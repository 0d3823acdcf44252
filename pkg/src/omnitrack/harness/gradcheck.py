"""Random instances of every differentiable op, checked against central differences."""
from __future__ import annotations

from typing import Callable

import torch

from ..encoder import VideoModality
from ..losses import LossWeights, box_loss, center_loss, mmc_loss, orthogonality_penalty, target_map_loss
from ..numerics import DTYPE, GradReport, check_function
from ..rama import AdapterBlock, amtb_forward


def _randn(gen, *shape):
    return torch.randn(*shape, generator=gen, dtype=DTYPE)


def _box(gen, size: float, lo: float = 0.2, hi: float = 0.5):
    wh = (lo + (hi - lo) * torch.rand(2, generator=gen, dtype=DTYPE)) * size
    c = wh / 2 + torch.rand(2, generator=gen, dtype=DTYPE) * (size - wh)
    return torch.cat([c, wh])


def _mmc(gen):
    grid, patch = 6, 4
    T = _randn(gen, 8)
    E = _randn(gen, grid * grid, 8)
    box = _box(gen, grid * patch).tolist()
    w = LossWeights(tau=0.5)
    return (lambda T_, E_: mmc_loss(T_, E_, box, w, patch)), [T, E]


def _target_map(gen):
    grid = 5
    logits = _randn(gen, grid * grid)
    target = torch.rand(grid * grid, generator=gen, dtype=DTYPE) > 0.6
    return (lambda z: target_map_loss(torch.sigmoid(z), target)), [logits]


def _center(gen):
    grid, patch = 6, 4
    logits = _randn(gen, grid, grid)
    box = _box(gen, grid * patch).tolist()
    return (lambda z: center_loss(torch.sigmoid(z), box, patch)), [logits]


def _box_loss(gen):
    size = 32.0
    gt = _box(gen, size)
    pred = gt + _randn(gen, 4) * 2.0
    pred[2:] = pred[2:].abs() + 1.0
    return (lambda p: box_loss(p, gt, LossWeights(), size)), [pred]


def _orth(gen):
    P = _randn(gen, 8, 3)
    Q = _randn(gen, 3, 8)
    return (lambda P_, Q_: orthogonality_penalty(P_, Q_) * 0.1), [P, Q]


def _amtb(gen):
    d, r, n = 6, 3, 5
    blk = AdapterBlock(d, d, r, W=_randn(gen, d, d), bias=_randn(gen, d), gen=gen)
    E_R, E_a = _randn(gen, n, d), _randn(gen, n, d)
    P, Q, lam = blk.P.detach().clone(), blk.Q.detach().clone(), _randn(gen, 4, r)
    probe = _randn(gen, n, d)

    # turn the factors into plain attributes so each call can bind its own tensors
    for name in ("P", "Q", "lam"):
        delattr(blk, name)

    def fn(E_R_, E_a_, P_, Q_, lam_):
        blk.P, blk.Q, blk.lam = P_, Q_, lam_
        return (amtb_forward(E_R_, E_a_, blk, VideoModality.THERMAL) * probe).sum()

    return fn, [E_R, E_a, P, Q, lam]


GRAD_OPS: dict[str, Callable] = {
    "mmc_loss": _mmc,
    "target_map_loss": _target_map,
    "center_loss": _center,
    "box_loss": _box_loss,
    "orthogonality": _orth,
    "amtb_forward": _amtb,
}


def check_op(name: str, seed: int, h: float = 1e-6, rtol: float = 1e-5, atol: float = 1e-8) -> GradReport:
    gen = torch.Generator().manual_seed(seed)
    fn, inputs = GRAD_OPS[name](gen)
    return check_function(fn, inputs, h=h, rtol=rtol, atol=atol)


def run_suite(names=None, seeds=range(20), **kw) -> dict:
    names = list(GRAD_OPS) if names is None else list(names)
    return {name: [check_op(name, s, **kw) for s in seeds] for name in names}
