"""Dense tensor substrate.

Arrays and reverse-mode gradients come from ``torch``; this module pins the
handful of ops the attention layers rely on to one definition each and
carries the finite-difference oracle used to audit autograd.
"""

from __future__ import annotations

from typing import Callable, Iterable

import torch
import torch.nn.functional as F

from .errors import ShapeError

SINGLE = torch.float32
DOUBLE = torch.float64


def dtype_for(precision: str) -> torch.dtype:
    return {"single": SINGLE, "double": DOUBLE}[precision]


def softmax(x: torch.Tensor, dim: int = -1, scale: float = 1.0) -> torch.Tensor:
    """``softmax(scale * x)`` along ``dim`` with max-subtraction."""
    if x.shape[dim] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x * scale
    z = z - z.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def gather(table: torch.Tensor, index: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """``index_select`` by an integer table of any shape."""
    flat = torch.index_select(table, dim, index.reshape(-1))
    dim = dim % table.dim()
    return flat.reshape(table.shape[:dim] + tuple(index.shape) + table.shape[dim + 1 :])


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def batched_matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def activation(name: str) -> Callable[[torch.Tensor], torch.Tensor]:
    return {"tanh": torch.tanh, "relu": torch.relu, "gelu": F.gelu, "sigmoid": torch.sigmoid}[name]


@torch.no_grad()
def finite_difference_grad(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``tensor``.

    ``tensor`` is perturbed in place and restored.
    """
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.view(-1), grad.view(-1)
    for n in range(flat.numel()):
        orig = flat[n].item()
        flat[n] = orig + h
        up = fn().item()
        flat[n] = orig - h
        down = fn().item()
        flat[n] = orig
        gflat[n] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-6) -> torch.Tensor:
    """Entrywise ``|a - b| / max(|a|, |b|, floor)``."""
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return (a - b).abs() / denom


def gradcheck(
    fn: Callable[[], torch.Tensor],
    params: Iterable[tuple[str, torch.Tensor]],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> dict[str, float]:
    """Worst relative error between autograd and central differences, per tensor."""
    params = list(params)
    for _, p in params:
        p.grad = None
    fn().backward()
    report = {}
    for name, p in params:
        analytic = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        numeric = finite_difference_grad(fn, p.data, h)
        report[name] = relative_error(analytic, numeric, floor).max().item()
    return report
