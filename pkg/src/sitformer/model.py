"""Symmetry-invariant transformers: SiT, SeT and SieT, plus ViT baselines.

Images are channels-last ``[batch, H, W, C]``.  The image is tiled into
``local_patch`` squares; each square is the center of a ``local_window``
attention window of pixels (zero padded at the border).  Local GSA runs per
window over its pixels, global GSA over the grid of windows.

Modes decide what crosses from the local to the global stage and what the
head reads:

* ``SiT``  window token in, global token out (invariant stream)
* ``SeT``  mean of window pixel features in, mean of global patch features out
* ``SieT`` both, concatenated
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import GraphSymmetricAttention, GSAConfig
from .errors import ConfigError, ShapeError
from .graph import GraphWeights
from .grid import D4_LABELS, GridSpec, declared_group, edge_classes, symmetry_permutations

MODES = ("SiT", "SeT", "SieT")


@dataclass
class LayerSymmetry:
    variant: str = "dihedral_distance"
    rotation_layers: int = 0
    graphs: tuple[str, ...] = ("q", "k", "v")
    score_mode: str = "symmetric"

    def __post_init__(self):
        self.graphs = tuple(self.graphs)

    @classmethod
    def plain(cls) -> "LayerSymmetry":
        """Standard attention, no graph structure."""
        return cls("identity", 0, (), "plain")

    @property
    def is_plain(self) -> bool:
        return not self.graphs and not self.rotation_layers


@dataclass
class StemConfig:
    ksize: int = 3
    pool: int = 2

    def __post_init__(self):
        if self.ksize < 1 or self.ksize % 2 == 0:
            raise ConfigError("stem kernel size must be odd")
        if self.pool != 1 and self.pool % 2:
            raise ConfigError("stem pool factor must be 1 or even")


@dataclass
class HeadConfig:
    kind: str = "classifier"
    dim: int = 10

    def __post_init__(self):
        if self.kind not in ("classifier", "regression"):
            raise ConfigError(f"unknown head {self.kind!r}")


@dataclass
class SiTConfig:
    image: tuple[int, int, int] = (16, 16, 1)
    local_patch: int = 4
    local_window: int = 4
    local_dim: int = 32
    global_dim: int = 64
    local_heads: int = 4
    global_heads: int = 4
    local_layers: int = 1
    global_layers: int = 2
    mode: str = "SiT"
    local_symmetry: LayerSymmetry = field(default_factory=LayerSymmetry)
    global_symmetry: LayerSymmetry = field(default_factory=LayerSymmetry)
    stem: StemConfig | None = None
    head: HeadConfig = field(default_factory=HeadConfig)
    pos_embed: bool = False
    graph_path: str = "dense"
    graph_dropout: float = 0.0
    graph_init: str = "near_identity"
    tied_graphs: bool = False

    def __post_init__(self):
        self.image = tuple(self.image)
        for name, cls in (("local_symmetry", LayerSymmetry), ("global_symmetry", LayerSymmetry), ("head", HeadConfig)):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, cls(**v))
        if isinstance(self.stem, dict):
            self.stem = StemConfig(**self.stem)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        h, w = self.pixel_shape
        p, win = self.local_patch, self.local_window
        if self.stem and (self.image[0] % self.stem.pool or self.image[1] % self.stem.pool):
            raise ConfigError("image side not divisible by the stem pool factor")
        if p < 1 or h % p or w % p:
            raise ConfigError(f"{h}x{w} pixels cannot be tiled by {p}x{p} patches")
        if win < p or (win - p) % 2:
            raise ConfigError("local_window must be >= local_patch with an even margin")
        if self.local_dim % self.local_heads or self.global_dim % self.global_heads:
            raise ConfigError("feature dims must be divisible by the head counts")
        if self.local_layers < 1 or self.global_layers < 1:
            raise ConfigError("need at least one local and one global layer")
        rows, cols = self.global_grid
        if self.global_symmetry.rotation_layers and rows != cols:
            raise ConfigError("global rotation layers need a square window grid")

    @property
    def pixel_shape(self) -> tuple[int, int]:
        f = self.stem.pool if self.stem else 1
        return self.image[0] // f, self.image[1] // f

    @property
    def global_grid(self) -> tuple[int, int]:
        h, w = self.pixel_shape
        return h // self.local_patch, w // self.local_patch

    @property
    def num_windows(self) -> int:
        r, c = self.global_grid
        return r * c

    @property
    def uses_token(self) -> bool:
        return self.mode in ("SiT", "SieT")

    @property
    def out_dim(self) -> int:
        return self.head.dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SiTConfig":
        return cls(**d)

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SiTConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def exact_global_group(self) -> list[str]:
        """Dihedral labels of whole-image transforms the architecture is invariant to."""
        if self.pos_embed:
            return ["identity"]
        h, w = self.pixel_shape
        r, c = self.global_grid
        win = self.local_window
        local = {p.label for p in layer_group(self.local_symmetry, GridSpec(win, win))}
        glob = {p.label for p in layer_group(self.global_symmetry, GridSpec(r, c))}
        if h != w:
            local -= {"rot90", "rot270", "transpose", "anti_transpose"}
        keep = local & glob
        return [lab for lab in D4_LABELS if lab in keep]


def layer_group(sym: LayerSymmetry, grid: GridSpec):
    if sym.is_plain:
        return symmetry_permutations(grid)
    return declared_group(sym.variant, grid, sym.rotation_layers)


def vit_config(cfg: SiTConfig, pos_embed: bool = True) -> SiTConfig:
    """Same layer stack with standard attention; ``pos_embed=False`` gives PI-ViT."""
    d = cfg.to_dict()
    d.update(local_symmetry=dataclasses.asdict(LayerSymmetry.plain()), global_symmetry=dataclasses.asdict(LayerSymmetry.plain()))
    d.update(pos_embed=pos_embed, stem=None if cfg.stem is None else d["stem"])
    return SiTConfig.from_dict(d)


# --- patch rearrangement ------------------------------------------------------


def patchify(images: torch.Tensor, patch: int, window: int | None = None) -> torch.Tensor:
    """``[b, H, W, C] -> [b, windows, window*window, C]``, both orders row-major."""
    window = window or patch
    if images.dim() != 4:
        raise ShapeError(f"expected [batch, H, W, C], got {tuple(images.shape)}")
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"{h}x{w} image is not divisible into {patch}x{patch} patches")
    margin = (window - patch) // 2
    x = images.permute(0, 3, 1, 2)
    cols = F.unfold(x, kernel_size=window, stride=patch, padding=margin)  # [b, C*win*win, L]
    n = cols.shape[-1]
    return cols.reshape(b, c, window * window, n).permute(0, 3, 2, 1)


def unpatchify(windows: torch.Tensor, shape: tuple[int, int], patch: int) -> torch.Tensor:
    """Inverse of ``patchify`` for non-overlapping windows."""
    b, n, pp, c = windows.shape
    h, w = shape
    if pp != patch * patch or n != (h // patch) * (w // patch):
        raise ShapeError("window tensor does not tile the requested image")
    x = windows.reshape(b, h // patch, w // patch, patch, patch, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


# --- layers -------------------------------------------------------------------------


class GSABlock(nn.Module):
    """Pre-norm residual block ``x + GSA(LN(x))``; no MLP."""

    def __init__(self, cfg: GSAConfig, dtype=torch.float32):
        super().__init__()
        self.norm = nn.LayerNorm(cfg.dim, dtype=dtype)
        self.attn = GraphSymmetricAttention(cfg, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.attn(self.norm(x))


class GraphConvStem(nn.Module):
    """Depthwise graph-weight convolution followed by stride-equals-kernel max pooling."""

    def __init__(self, grid: GridSpec, channels: int, variant: str, ksize: int, pool: int, dtype=torch.float32):
        super().__init__()
        self.grid = grid
        self.ksize = ksize
        self.pool = pool
        classes = edge_classes(grid, variant)
        if not classes.translation_invariant:
            raise ConfigError("the graph-convolution stem needs translation-invariant classes")
        self.graph = GraphWeights(classes, channels, dtype=dtype)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        b, h, w, c = images.shape
        x = images.reshape(b, h * w, c)
        x = self.graph(x, "conv", self.ksize).reshape(b, h, w, c)
        if self.pool > 1:
            x = F.max_pool2d(x.permute(0, 3, 1, 2), self.pool).permute(0, 2, 3, 1)
        return x


def _stage_config(cfg: SiTConfig, sym: LayerSymmetry, grid: GridSpec, dim: int, heads: int) -> GSAConfig:
    if sym.is_plain:
        return GSAConfig(dim, heads, None, (), sym.score_mode, 0, cfg.uses_token)
    return GSAConfig(
        dim,
        heads,
        edge_classes(grid, sym.variant),
        sym.graphs,
        sym.score_mode,
        sym.rotation_layers,
        cfg.uses_token,
        path=cfg.graph_path,
        init=cfg.graph_init,
        tied=cfg.tied_graphs,
        dropout=cfg.graph_dropout,
    )


class SymmetryInvariantTransformer(nn.Module):
    def __init__(self, cfg: SiTConfig, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        h, w, c = cfg.image
        dl, dg = cfg.local_dim, cfg.global_dim
        win = cfg.local_window
        self.stem = None
        if cfg.stem is not None:
            variant = "identity" if cfg.local_symmetry.is_plain else cfg.local_symmetry.variant
            self.stem = GraphConvStem(GridSpec(h, w), c, variant, cfg.stem.ksize, cfg.stem.pool, dtype)
        self.embed = nn.Linear(c, dl, dtype=dtype)
        self.local_pos = nn.Parameter(0.1 * torch.randn(1, win * win, dl, dtype=dtype)) if cfg.pos_embed else None
        self.local_token = nn.Parameter(torch.randn(1, 1, dl, dtype=dtype)) if cfg.uses_token else None
        local_cfg = _stage_config(cfg, cfg.local_symmetry, GridSpec(win, win), dl, cfg.local_heads)
        self.local_blocks = nn.ModuleList(GSABlock(local_cfg, dtype) for _ in range(cfg.local_layers))
        self.local_norm = nn.LayerNorm(dl, dtype=dtype)

        width = 2 if cfg.mode == "SieT" else 1
        self.bridge = nn.Linear(width * dl, dg, dtype=dtype)
        rows, cols = cfg.global_grid
        self.global_pos = nn.Parameter(0.1 * torch.randn(1, rows * cols, dg, dtype=dtype)) if cfg.pos_embed else None
        self.global_token = nn.Parameter(torch.randn(1, 1, dg, dtype=dtype)) if cfg.uses_token else None
        global_cfg = _stage_config(cfg, cfg.global_symmetry, GridSpec(rows, cols), dg, cfg.global_heads)
        self.global_blocks = nn.ModuleList(GSABlock(global_cfg, dtype) for _ in range(cfg.global_layers))
        self.global_norm = nn.LayerNorm(dg, dtype=dtype)
        self.head = nn.Linear(width * dg, cfg.head.dim, dtype=dtype)

    def _stack(self, x, token, pos, blocks, norm):
        if pos is not None:
            x = x + pos
        if token is not None:
            x = torch.cat([token.expand(x.shape[0], -1, -1), x], dim=1)
        for blk in blocks:
            x = blk(x)
        x = norm(x)
        if token is None:
            return None, x
        return x[:, 0], x[:, 1:]

    def _read(self, token, patches):
        mode = self.cfg.mode
        if mode == "SiT":
            return token
        pooled = patches.mean(dim=1)
        return pooled if mode == "SeT" else torch.cat([token, pooled], dim=-1)

    def features(self, images: torch.Tensor) -> dict[str, torch.Tensor]:
        cfg = self.cfg
        h, w, c = cfg.image
        if images.dim() != 4 or tuple(images.shape[1:]) != (h, w, c):
            raise ShapeError(f"expected [batch, {h}, {w}, {c}], got {tuple(images.shape)}")
        b = images.shape[0]
        x = images if self.stem is None else self.stem(images)
        win = patchify(x, cfg.local_patch, cfg.local_window)  # [b, n, win^2, C]
        n = win.shape[1]
        pix = self.embed(win.reshape(b * n, win.shape[2], -1))
        tok, pats = self._stack(pix, self.local_token, self.local_pos, self.local_blocks, self.local_norm)
        windows = self.bridge(self._read(tok, pats)).reshape(b, n, -1)
        gtok, gpats = self._stack(windows, self.global_token, self.global_pos, self.global_blocks, self.global_norm)
        latent = self._read(gtok, gpats)
        return {"window_features": windows, "global_patches": gpats, "latent": latent}

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(images)["latent"])

    def forward_with_latents(self, images: torch.Tensor):
        feats = self.features(images)
        return self.head(feats["latent"]), feats


def build_model(cfg: SiTConfig, seed: int = 0, dtype=torch.float32) -> SymmetryInvariantTransformer:
    torch.manual_seed(seed)
    return SymmetryInvariantTransformer(cfg, dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- latent export ------------------------------------------------------------


@torch.no_grad()
def latent_report(model: SymmetryInvariantTransformer, probes: torch.Tensor, transforms) -> dict[str, list[float]]:
    """L2 distance between the head input of each transformed probe and the original."""
    model.eval()
    base = model.features(probes)["latent"]
    out = {}
    for t in transforms:
        moved = model.features(t.apply(probes))["latent"]
        out[t.label] = (moved - base).norm(dim=-1).tolist()
    return out


def write_latent_report(report: dict[str, list[float]], path: str | Path):
    path = Path(path)
    if path.suffix == ".csv":
        lines = ["transform,probe,delta"]
        for label, deltas in report.items():
            lines += [f"{label},{i},{d!r}" for i, d in enumerate(deltas)]
        path.write_text("\n".join(lines) + "\n")
    else:
        path.write_text(json.dumps(report, indent=2))
