"""Standard multi-head attention and graph symmetric attention (GSA).

Score pipeline of one GSA head, with token row/column passed through by
every graph structure::

    S  = (G_q Q) (G_k K)^T
    S  = act(G_qk S + G_b)            # optional
    S  = S * G                        # optional Hadamard graph
    S  = S + S^T  |  S - S^T  | S     # score mode
    S  = triangle(S)  (x rotation_layers)
    out = softmax(S / sqrt(d_head)) (G_v V)

``score_mode="both"`` adds the softmaxes of the symmetric and the
antisymmetric branch without renormalizing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError
from .graph import GraphWeights
from .grid import EdgeClassMap, TriangleMap, triangle_map
from .tensor import activation, softmax

SCORE_MODES = ("plain", "symmetric", "antisymmetric", "both")
GRAPHS = ("q", "k", "v", "hadamard", "qk_b")


@dataclass
class GSAConfig:
    dim: int
    heads: int = 1
    classes: EdgeClassMap | None = None
    graphs: tuple[str, ...] = ("q", "k", "v")
    score_mode: str = "symmetric"
    rotation_layers: int = 0
    token: bool = True
    path: str = "dense"
    ksize: int | None = None
    init: str = "near_identity"
    tied: bool = False
    dropout: float = 0.0
    activation: str = "tanh"
    tmap: TriangleMap | None = field(default=None, repr=False)

    def __post_init__(self):
        self.graphs = tuple(self.graphs)
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        unknown = set(self.graphs) - set(GRAPHS)
        if unknown:
            raise ConfigError(f"unknown graph mechanisms {sorted(unknown)}")
        if self.score_mode not in SCORE_MODES:
            raise ConfigError(f"unknown score mode {self.score_mode!r}")
        if self.rotation_layers not in (0, 1, 2):
            raise ConfigError("rotation_layers must be 0, 1 or 2")
        if (self.graphs or self.rotation_layers) and self.classes is None:
            raise ConfigError("graph mechanisms need an edge class map")
        if self.rotation_layers and self.tmap is None:
            self.tmap = triangle_map(self.classes.grid)
        if self.path not in ("dense", "conv"):
            raise ConfigError(f"unknown graph path {self.path!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def num_vertices(self) -> int | None:
        return None if self.classes is None else self.classes.num_vertices


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(1, 2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, d = x.shape
    return x.transpose(1, 2).reshape(b, n, h * d)


def standard_attention(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    heads: int = 1,
    b_q: torch.Tensor | None = None,
    b_k: torch.Tensor | None = None,
    b_v: torch.Tensor | None = None,
) -> torch.Tensor:
    """``softmax(Q K^T / sqrt(d_head)) V`` per head; weights act as ``x @ W``."""
    d = w_q.shape[1]
    if d % heads:
        raise ConfigError(f"dim {d} is not divisible by {heads} heads")
    q, k, v = x @ w_q, x @ w_k, x @ w_v
    if b_q is not None:
        q, k, v = q + b_q, k + b_k, v + b_v
    q, k, v = (_split_heads(t, heads) for t in (q, k, v))
    att = softmax(q @ k.transpose(-2, -1), dim=-1, scale=1.0 / math.sqrt(d // heads))
    return _merge_heads(att @ v)


def _pad_token(m: torch.Tensor, fill: float) -> torch.Tensor:
    """Embed ``[h, P, P]`` into ``[h, 1+P, 1+P]`` with a constant token row/column."""
    h, n, _ = m.shape
    out = m.new_full((h, n + 1, n + 1), fill)
    out[:, 1:, 1:] = m
    return out


def symmetrize(s: torch.Tensor) -> torch.Tensor:
    return s + s.transpose(-2, -1)


def antisymmetrize(s: torch.Tensor) -> torch.Tensor:
    return s - s.transpose(-2, -1)


class TriangleLayer(nn.Module):
    """Theta-weighted sum over the directed triangle of every score entry.

    Acts on the patch block of ``[batch, heads, (1+)P, (1+)P]``; the token
    row and column are left as they are.
    """

    def __init__(self, tmap: TriangleMap, heads: int, generator=None, dtype=torch.float32):
        super().__init__()
        self.tmap = tmap
        self.heads = heads
        n = tmap.grid.num_vertices
        self.register_buffer("index", torch.as_tensor(tmap.gather_index().reshape(-1).copy()), persistent=False)
        self.register_buffer("angle_index", torch.as_tensor(tmap.angle_class.reshape(-1).copy()), persistent=False)
        self.theta = nn.Parameter(torch.empty(heads, tmap.num_angle_classes, dtype=dtype))
        self.num_vertices = n
        with torch.no_grad():
            self.theta.copy_(torch.randn(self.theta.shape, generator=generator, dtype=dtype))

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        n = self.num_vertices
        size = s.shape[-1]
        if size not in (n, n + 1) or s.shape[-2] != size:
            raise ShapeError(f"score block {tuple(s.shape[-2:])} does not match a {n}-vertex triangle map")
        token = size == n + 1
        block = s[..., 1:, 1:] if token else s
        lead = block.shape[:-2]
        y = block.reshape(*lead, n * n)[..., self.index]
        theta = self.theta[:, self.angle_index]  # [heads, 3 P^2]
        y = (y * theta).reshape(*lead, n, n, 3).sum(-1)
        if not token:
            return y
        top = s[..., :1, 1:]
        left = s[..., :, :1]
        return torch.cat([left, torch.cat([top, y], dim=-2)], dim=-1)


def rotation_triangle_layer(gamma: torch.Tensor, tmap: TriangleMap | None, theta: torch.Tensor) -> torch.Tensor:
    """Functional form: ``theta`` is ``[heads, num_angle_classes]``."""
    if tmap is None:
        raise ConfigError("rotation layer needs a triangle map")
    layer = TriangleLayer(tmap, theta.shape[0], dtype=theta.dtype)
    layer.theta = nn.Parameter(theta) if not isinstance(theta, nn.Parameter) else theta
    return layer(gamma)


class GraphSymmetricAttention(nn.Module):
    """Multi-head GSA on ``[batch, (1+)P, dim]`` inputs."""

    def __init__(self, cfg: GSAConfig, generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        d, h = cfg.dim, cfg.heads
        self.qkv = nn.Linear(d, 3 * d, dtype=dtype)
        self.proj = nn.Linear(d, d, dtype=dtype)
        if generator is not None:
            _init_linear(self.qkv, generator)
            _init_linear(self.proj, generator)

        def graph(channels, init=cfg.init):
            return GraphWeights(cfg.classes, channels, init, cfg.tied, cfg.dropout, generator, dtype)

        self.g_q = graph(d) if "q" in cfg.graphs else None
        self.g_k = graph(d) if "k" in cfg.graphs else None
        self.g_v = graph(d) if "v" in cfg.graphs else None
        self.g_had = graph(h) if "hadamard" in cfg.graphs else None
        if "qk_b" in cfg.graphs:
            self.g_qk = graph(h)
            self.g_b = graph(h, init="normal")
        else:
            self.g_qk = self.g_b = None
        self.act = activation(cfg.activation)
        self.triangles = nn.ModuleList(
            TriangleLayer(cfg.tmap, h, generator, dtype) for _ in range(cfg.rotation_layers)
        )

    def _graph(self, gw: GraphWeights | None, x: torch.Tensor) -> torch.Tensor:
        if gw is None:
            return x
        return gw(x, self.cfg.path, self.cfg.ksize)

    def _check(self, x: torch.Tensor):
        n = self.cfg.num_vertices
        if x.dim() != 3 or x.shape[-1] != self.cfg.dim:
            raise ShapeError(f"expected [batch, tokens, {self.cfg.dim}], got {tuple(x.shape)}")
        if n is not None and x.shape[1] != n + int(self.cfg.token):
            raise ShapeError(f"expected {n + int(self.cfg.token)} rows, got {x.shape[1]}")

    def scores(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Pre-mode score ``S`` ``[b, h, N, N]`` and graph-mixed values ``[b, h, N, dh]``."""
        self._check(x)
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = self._graph(self.g_q, q), self._graph(self.g_k, k), self._graph(self.g_v, v)
        h = self.cfg.heads
        q, k, v = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
        s = q @ k.transpose(-2, -1)
        token = self.cfg.token
        if self.g_qk is not None:
            m = self.g_qk.dense()
            if token:
                m = _pad_token(m, 0.0)
                m[:, 0, 0] = 1.0
            bias = self.g_b.dense()
            if token:
                bias = _pad_token(bias, 0.0)
            s = self.act(torch.einsum("hij,bhjk->bhik", m, s) + bias)
        if self.g_had is not None:
            g = self.g_had.dense()
            s = s * (_pad_token(g, 1.0) if token else g)
        return s, v

    def _triangles(self, s: torch.Tensor) -> torch.Tensor:
        for tri in self.triangles:
            s = tri(s)
        return s

    def attention(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        s, v = self.scores(x)
        scale = 1.0 / math.sqrt(self.cfg.head_dim)
        mode = self.cfg.score_mode
        if mode == "both":
            a = softmax(self._triangles(symmetrize(s)), -1, scale) + softmax(
                self._triangles(antisymmetrize(s)), -1, scale
            )
            return a, v
        if mode == "symmetric":
            s = symmetrize(s)
        elif mode == "antisymmetric":
            s = antisymmetrize(s)
        return softmax(self._triangles(s), -1, scale), v

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        a, v = self.attention(x)
        return self.proj(_merge_heads(a @ v))


def plain_attention_config(dim: int, heads: int = 1, token: bool = True) -> GSAConfig:
    return GSAConfig(dim, heads, classes=None, graphs=(), score_mode="plain", token=token)


@torch.no_grad()
def _init_linear(lin: nn.Linear, generator: torch.Generator):
    bound = 1.0 / math.sqrt(lin.in_features)
    lin.weight.copy_((torch.rand(lin.weight.shape, generator=generator, dtype=lin.weight.dtype) * 2 - 1) * bound)
    lin.bias.copy_((torch.rand(lin.bias.shape, generator=generator, dtype=lin.bias.dtype) * 2 - 1) * bound)


def gsa_forward(x: torch.Tensor, module: GraphSymmetricAttention) -> torch.Tensor:
    return module(x)


def gsa_1d(x: torch.Tensor, module: GraphSymmetricAttention) -> torch.Tensor:
    grid = module.cfg.classes.grid if module.cfg.classes is not None else None
    if grid is not None and grid.topology != "line1d":
        raise ConfigError("gsa_1d needs line1d classes")
    return module(x)
