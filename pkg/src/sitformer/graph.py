"""Trainable shared-weight graph matrices.

A ``GraphWeights`` holds one weight per (channel, edge class).  It acts on a
``[batch, (1+)P, channels]`` tensor either as a dense per-channel ``P x P``
matrix or, for translation-invariant classes, as the equivalent depthwise
convolution.  A leading token row is passed through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .grid import EdgeClassMap

INIT_SCHEMES = ("near_identity", "identity", "normal")


@dataclass(frozen=True)
class DropoutMask:
    kept: torch.Tensor  # bool [num_classes]
    keep_prob: float

    def scale(self, dtype=torch.float64) -> torch.Tensor:
        return self.kept.to(dtype) / self.keep_prob


def draw_mask(num_classes: int, p: float, generator: torch.Generator | None = None) -> DropoutMask:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    kept = torch.rand(num_classes, generator=generator) >= p
    return DropoutMask(kept, 1.0 - p)


class GraphWeights(nn.Module):
    """Per-channel graph matrix ``M[c, i, j] = weights[c, class_index[i, j]]``."""

    def __init__(
        self,
        classes: EdgeClassMap,
        channels: int,
        init: str = "near_identity",
        tied: bool = False,
        dropout: float = 0.0,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if channels < 1:
            raise ConfigError("graph weights need at least one channel")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {dropout}")
        self.classes = classes
        self.channels = channels
        self.tied = tied
        self.dropout = dropout
        self._layouts = {}
        self.register_buffer("class_index", torch.as_tensor(classes.class_index.copy()), persistent=False)
        self.weights = nn.Parameter(torch.empty(1 if tied else channels, classes.num_classes, dtype=dtype))
        self.reset_parameters(init, generator)

    @property
    def num_vertices(self) -> int:
        return self.classes.num_vertices

    @torch.no_grad()
    def reset_parameters(self, init: str = "near_identity", generator: torch.Generator | None = None):
        if init not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {init!r}")
        w = self.weights
        self_cls = torch.as_tensor(self.classes.self_classes().copy())
        if init == "identity":
            w.zero_()
            w[:, self_cls] = 1.0
            return
        std = 1.0 / np.sqrt(self.classes.num_classes)
        w.copy_(torch.randn(w.shape, generator=generator, dtype=w.dtype) * std)
        if init == "near_identity":
            w[:, self_cls] += 1.0

    def effective_weights(self) -> torch.Tensor:
        w = self.weights
        if self.training and self.dropout > 0:
            mask = draw_mask(self.classes.num_classes, self.dropout)
            w = w * mask.scale(w.dtype).to(w.device)
        return w.expand(self.channels, -1) if self.tied else w

    def dense(self) -> torch.Tensor:
        """Materialized ``[channels, P, P]`` matrix."""
        return self.effective_weights()[:, self.class_index]

    def kernel(self, ksize: int) -> torch.Tensor:
        """Depthwise kernel ``[channels, 1, ksize, ksize]`` reproducing ``dense`` within radius."""
        if ksize < 1 or ksize % 2 == 0:
            raise ConfigError(f"graph convolution needs an odd kernel size, got {ksize}")
        if not self.classes.translation_invariant:
            raise ConfigError(f"{self.classes.variant.value} classes have no convolution form")
        slot, where = self._kernel_layout(ksize)
        w = self.effective_weights()
        k = w.new_zeros(self.channels, ksize * ksize)
        k = k.index_copy(1, where, w[:, slot])
        return k.reshape(self.channels, 1, ksize, ksize)

    def _kernel_layout(self, ksize: int):
        if ksize not in self._layouts:
            r = (ksize - 1) // 2
            slot, where = [], []
            for a in range(ksize):
                for b in range(ksize):
                    # cross-correlation tap (a, b) reads the vertex at offset (b - r, a - r)
                    c = self.classes.offset_class(b - r, a - r)
                    if c is not None:
                        slot.append(c)
                        where.append(a * ksize + b)
            self._layouts[ksize] = (torch.as_tensor(slot, dtype=torch.long), torch.as_tensor(where, dtype=torch.long))
        return self._layouts[ksize]

    def full_conv_ksize(self) -> int:
        g = self.classes.grid
        return 2 * max(g.rows, g.cols) - 1

    def forward(self, x: torch.Tensor, path: str = "dense", ksize: int | None = None) -> torch.Tensor:
        if path == "dense":
            return apply_dense(self, x)
        if path == "conv":
            return apply_conv(self, x, ksize or self.full_conv_ksize())
        raise ConfigError(f"unknown graph path {path!r}")


def _split_token(gw: GraphWeights, x: torch.Tensor):
    n = gw.num_vertices
    if x.dim() != 3 or x.shape[-1] != gw.channels or x.shape[1] not in (n, n + 1):
        raise ShapeError(f"expected [batch, {n} or {n + 1}, {gw.channels}], got {tuple(x.shape)}")
    if x.shape[1] == n + 1:
        return x[:, :1], x[:, 1:]
    return None, x


def apply_dense(gw: GraphWeights, x: torch.Tensor) -> torch.Tensor:
    token, patches = _split_token(gw, x)
    y = torch.einsum("cij,bjc->bic", gw.dense(), patches)
    return y if token is None else torch.cat([token, y], dim=1)


def apply_conv(gw: GraphWeights, x: torch.Tensor, ksize: int) -> torch.Tensor:
    token, patches = _split_token(gw, x)
    g = gw.classes.grid
    b = patches.shape[0]
    img = patches.transpose(1, 2).reshape(b, gw.channels, g.rows, g.cols)
    y = F.conv2d(img, gw.kernel(ksize), padding=(ksize - 1) // 2, groups=gw.channels)
    y = y.reshape(b, gw.channels, g.num_vertices).transpose(1, 2)
    return y if token is None else torch.cat([token, y], dim=1)


def truncated_dense(gw: GraphWeights, ksize: int) -> torch.Tensor:
    """Dense matrix with every edge outside the ``ksize`` square window zeroed."""
    r = (ksize - 1) // 2
    xy = torch.as_tensor(gw.classes.grid.coords())
    off = (xy[None, :, :] - xy[:, None, :]).abs().amax(-1)
    return gw.dense() * (off <= r).to(gw.weights.dtype)


@torch.no_grad()
def symmetric_dropout(gw: GraphWeights, p: float, generator: torch.Generator | None = None) -> GraphWeights:
    """Copy of ``gw`` with whole classes zeroed (prob ``p``) and survivors scaled by ``1/(1-p)``."""
    mask = draw_mask(gw.classes.num_classes, p, generator)
    out = GraphWeights(gw.classes, gw.channels, tied=gw.tied, dtype=gw.weights.dtype)
    out.weights.copy_(gw.weights * mask.scale(gw.weights.dtype))
    return out


@torch.no_grad()
def freeze_symmetric_dropout(model: nn.Module, p: float, generator: torch.Generator | None = None) -> int:
    """Apply one class-level dropout draw in place to every graph table of ``model``."""
    count = 0
    for m in model.modules():
        if isinstance(m, GraphWeights):
            mask = draw_mask(m.classes.num_classes, p, generator)
            m.weights.mul_(mask.scale(m.weights.dtype))
            count += 1
    return count
