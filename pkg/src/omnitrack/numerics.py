"""Dense float64 helpers shared by every other module.

Analytic gradients come from torch autograd; ``finite_difference_gradient``
is the independent oracle used to check them.
"""
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

DTYPE = torch.float64

# Additive-mask sentinel. Inside exponentiation it is swapped for MASK_FILL
# and the masked outputs are then forced to exact zero.
NEG_INF = float("-inf")
MASK_FILL = -1e30


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last dim with an additive {0, NEG_INF} mask.

    Rows that are fully masked come back as zeros instead of NaN.
    """
    try:
        fits = torch.broadcast_shapes(logits.shape, mask.shape) == logits.shape
    except RuntimeError:
        fits = False
    if not fits:
        raise ShapeError(f"mask {tuple(mask.shape)} does not fit logits {tuple(logits.shape)}")
    keep = mask == 0
    z = torch.where(keep, logits, torch.full_like(logits, MASK_FILL))
    z = z - z.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(z) * keep
    denom = e.sum(dim=-1, keepdim=True)
    return e / torch.where(denom > 0, denom, torch.ones_like(denom))


def keep_mask_to_additive(keep: torch.Tensor) -> torch.Tensor:
    """Boolean keep-mask -> additive mask with 0 / NEG_INF entries."""
    out = torch.zeros(keep.shape, dtype=DTYPE)
    return out.masked_fill(~keep, NEG_INF)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(f"channel mismatch: x has {x.shape[-1]}, gain {gain.shape[-1]}, bias {bias.shape[-1]}")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last dim; raises on a zero-norm operand."""
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return (a * b).sum(-1) / (na * nb)


def safe_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Broadcasting cosine that scores zero-norm operands as 0 instead of raising."""
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    denom = na * nb
    ok = denom > 0
    return torch.where(ok, (a * b).sum(-1) / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(denom))


def finite_difference_gradient(f: Callable[[torch.Tensor], float], x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of a scalar function, one component at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    # contiguous so that ``flat`` is a view, not a copy
    x = as_tensor(x).detach().contiguous().clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value near component {i}")
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


@dataclass
class GradReport:
    max_rel_error: float
    max_abs_error: float
    checked_count: int
    passed: bool


def gradient_check(analytic: torch.Tensor, numeric: torch.Tensor, rtol: float = 1e-5, atol: float = 1e-8) -> GradReport:
    """Compare two gradients componentwise.

    A component passes when its relative error is within ``rtol`` or its
    absolute error is within ``atol``.
    """
    analytic = as_tensor(analytic)
    numeric = as_tensor(numeric)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"gradient shapes differ: {tuple(analytic.shape)} vs {tuple(numeric.shape)}")
    abs_err = (analytic - numeric).abs()
    scale = torch.maximum(analytic.abs(), numeric.abs())
    rel_err = torch.where(scale > 0, abs_err / torch.where(scale > 0, scale, torch.ones_like(scale)), torch.zeros_like(scale))
    ok = (rel_err <= rtol) | (abs_err <= atol)
    n = analytic.numel()
    return GradReport(
        max_rel_error=float(rel_err.max()) if n else 0.0,
        max_abs_error=float(abs_err.max()) if n else 0.0,
        checked_count=n,
        passed=bool(ok.all()),
    )


def value_and_grad(fn: Callable[..., torch.Tensor], *inputs: torch.Tensor) -> tuple[float, tuple[torch.Tensor, ...]]:
    """Evaluate a scalar torch function and its gradients w.r.t. every input."""
    leaves = [as_tensor(t).detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    grads = tuple(torch.zeros_like(l) if g is None else g for l, g in zip(leaves, grads))
    return float(out.detach()), grads


def check_function(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], h: float = 1e-6,
                   rtol: float = 1e-5, atol: float = 1e-8) -> GradReport:
    """Autograd vs central differences for every input of ``fn``; aggregated report."""
    inputs = [as_tensor(t).detach().clone() for t in inputs]
    _, grads = value_and_grad(fn, *inputs)
    reports = []
    for idx, x in enumerate(inputs):
        def partial(v, idx=idx):
            args = list(inputs)
            args[idx] = v
            with torch.no_grad():
                return fn(*args)
        numeric = finite_difference_gradient(partial, x, h)
        reports.append(gradient_check(grads[idx], numeric, rtol, atol))
    return GradReport(
        max_rel_error=max(r.max_rel_error for r in reports),
        max_abs_error=max(r.max_abs_error for r in reports),
        checked_count=sum(r.checked_count for r in reports),
        passed=all(r.passed for r in reports),
    )
