"""Input transformations and invariance/equivariance checks.

Every transform is a pixel permutation of an ``H x W`` image in gather form
(``out.flat[v] = in.flat[perm[v]]``); channels are untouched.  Global
dihedral transforms factor into a permutation of window positions and the
same transform applied inside every window.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .attention import SCORE_MODES, GraphSymmetricAttention, GSAConfig, TriangleLayer
from .graph import freeze_symmetric_dropout
from .grid import (
    D4_LABELS,
    GridSpec,
    SymmetryPermutation,
    declared_group,
    dihedral_permutation,
    edge_classes,
    in_group,
    symmetry_permutations,
    triangle_map,
)
from .model import SiTConfig, layer_group, build_model

LEVELS = ("pixel", "patch", "window-position", "global")
NEGATIVE_THRESHOLD = 1e-3


@dataclass(frozen=True, eq=False)
class InputTransform:
    label: str
    level: str
    perm: np.ndarray
    shape: tuple[int, int]
    inverse: np.ndarray = field(default=None)

    def __post_init__(self):
        perm = np.array(self.perm, dtype=np.int64)
        if sorted(perm.tolist()) != list(range(self.shape[0] * self.shape[1])):
            raise ValueError(f"{self.label} is not a bijection of the pixel grid")
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        object.__setattr__(self, "perm", perm)
        object.__setattr__(self, "inverse", inv)

    def apply(self, images: torch.Tensor) -> torch.Tensor:
        b, h, w, c = images.shape
        idx = torch.as_tensor(self.perm, device=images.device)
        return images.reshape(b, h * w, c)[:, idx].reshape(b, h, w, c)

    def invert(self, images: torch.Tensor) -> torch.Tensor:
        return self.inverted().apply(images)

    def inverted(self) -> "InputTransform":
        return InputTransform(f"{self.label}^-1", self.level, self.inverse, self.shape)

    def then(self, other: "InputTransform") -> "InputTransform":
        """Apply ``self`` first, then ``other``."""
        return InputTransform(f"{other.label}*{self.label}", other.level, self.perm[other.perm], self.shape)


def global_transform(shape: tuple[int, int], label: str) -> InputTransform:
    p = dihedral_permutation(GridSpec(*shape), label)
    return InputTransform(f"global_{label}", "global", p.perm, shape)


def tile_permutation(shape: tuple[int, int], block: int, src: np.ndarray, label: str) -> InputTransform:
    """Move whole ``block x block`` tiles: target tile ``t`` is read from tile ``src[t]``."""
    h, w = shape
    perm = np.empty(h * w, dtype=np.int64)
    cols = w // block
    for r in range(h):
        for c in range(w):
            tr, tc = divmod(int(src[(r // block) * cols + c // block]), cols)
            perm[r * w + c] = (tr * block + r % block) * w + tc * block + c % block
    return InputTransform(label, "window-position", perm, shape)


def window_position_transform(shape: tuple[int, int], block: int, label: str) -> InputTransform:
    """Move tiles as the dihedral element moves tile positions, tile contents unchanged."""
    src = dihedral_permutation(GridSpec(shape[0] // block, shape[1] // block), label).perm
    return tile_permutation(shape, block, src, f"window_{label}")


def local_transform(shape: tuple[int, int], block: int, label: str) -> InputTransform:
    """Apply the dihedral element inside every ``block x block`` tile."""
    h, w = shape
    inner = dihedral_permutation(GridSpec(block, block), label).perm
    perm = np.empty(h * w, dtype=np.int64)
    for r in range(h):
        for c in range(w):
            br, bc = r - r % block, c - c % block
            sr, sc = divmod(int(inner[(r % block) * block + c % block]), block)
            perm[r * w + c] = (br + sr) * w + bc + sc
    return InputTransform(f"local_{label}", "patch", perm, shape)


def random_pixel_transform(shape: tuple[int, int], seed: int) -> InputTransform:
    rng = np.random.default_rng(seed)
    return InputTransform(f"random_pixel_{seed}", "pixel", rng.permutation(shape[0] * shape[1]), shape)


def tile_size(cfg: SiTConfig) -> int:
    """Side of one local patch in raw image pixels."""
    return cfg.local_patch * (cfg.stem.pool if cfg.stem else 1)


def make_transforms(cfg: SiTConfig, random_pixels: int = 2, seed: int = 0) -> list[InputTransform]:
    h, w, _ = cfg.image
    block = tile_size(cfg)
    square = h == w
    grid_square = (h // block) == (w // block)
    out = []
    for lab in D4_LABELS[1:]:
        rotlike = lab in ("rot90", "rot270", "transpose", "anti_transpose")
        if square or not rotlike:
            out.append(global_transform((h, w), lab))
        if grid_square or not rotlike:
            out.append(window_position_transform((h, w), block, lab))
        out.append(local_transform((h, w), block, lab))
    out += [random_pixel_transform((h, w), seed + i) for i in range(random_pixels)]
    return out


def expected_exact(cfg: SiTConfig, t: InputTransform) -> bool:
    """Whether the architecture guarantees invariance of its output under ``t``."""
    if cfg.pos_embed:
        return False
    label = t.label.split("_", 1)[1]
    if t.level == "global":
        return label in cfg.exact_global_group()
    if t.level == "window-position":
        r, c = cfg.global_grid
        return label in {p.label for p in layer_group(cfg.global_symmetry, GridSpec(r, c))}
    if t.level == "patch":
        if cfg.stem is not None or cfg.local_window != cfg.local_patch:
            return False
        p = cfg.local_patch
        return label in {g.label for g in layer_group(cfg.local_symmetry, GridSpec(p, p))}
    return False


@dataclass
class CheckReport:
    transform: str
    kind: str
    tol: float
    deviations: list[float]
    passed: bool

    @property
    def max_deviation(self) -> float:
        return max(self.deviations) if self.deviations else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["max_deviation"] = self.max_deviation
        return d


@torch.no_grad()
def assert_invariant(
    model: Callable[[torch.Tensor], torch.Tensor], transform: InputTransform, probes: torch.Tensor, tol: float
) -> CheckReport:
    """Per-probe max deviation of ``model(T x)`` from ``model(x)``."""
    a, b = model(probes), model(transform.apply(probes))
    dev = (a - b).abs().reshape(a.shape[0], -1).amax(dim=1).tolist()
    return CheckReport(transform.label, "invariant", tol, dev, all(d <= tol for d in dev))


@torch.no_grad()
def assert_equivariant(
    fn: Callable[[torch.Tensor], torch.Tensor],
    transform: InputTransform,
    index_action: np.ndarray,
    probes: torch.Tensor,
    tol: float,
) -> CheckReport:
    """``fn(T x)[:, i] == fn(x)[:, action[i]]`` for ``[b, n, ...]`` features."""
    a = fn(probes)[:, torch.as_tensor(index_action)]
    b = fn(transform.apply(probes))
    dev = (a - b).abs().reshape(a.shape[0], -1).amax(dim=1).tolist()
    return CheckReport(transform.label, "equivariant", tol, dev, all(d <= tol for d in dev))


def symcheck(
    cfg: SiTConfig,
    seeds: int = 5,
    tol: float = 1e-8,
    probes: int = 4,
    dtype=torch.float64,
    random_pixels: int = 2,
) -> dict:
    """Check every declared invariance on fresh models; random pixel shuffles must break.

    A declared symmetry passes if all seeds stay within ``tol``.  A negative
    control passes if it deviates by more than ``NEGATIVE_THRESHOLD`` on at
    least 95% of seeds.  Other out-of-group transforms are reported only.
    """
    transforms = make_transforms(cfg, random_pixels)
    h, w, c = cfg.image
    per = {t.label: [] for t in transforms}
    for seed in range(seeds):
        model = build_model(cfg, seed, dtype).eval()
        gen = torch.Generator().manual_seed(10_000 + seed)
        x = torch.randn(probes, h, w, c, generator=gen, dtype=dtype)
        for t in transforms:
            per[t.label].append(assert_invariant(model, t, x, tol).max_deviation)
    checks = []
    for t in transforms:
        devs = per[t.label]
        if expected_exact(cfg, t):
            kind, ok = "invariant", all(d <= tol for d in devs)
        elif t.level == "pixel":
            need = math.ceil(0.95 * seeds)
            kind, ok = "broken", sum(d > NEGATIVE_THRESHOLD for d in devs) >= need
        else:
            kind, ok = "unconstrained", True
        checks.append({"transform": t.label, "level": t.level, "expected": kind, "max_deviation": max(devs), "min_deviation": min(devs), "passed": ok})
    return {
        "seeds": seeds,
        "tol": tol,
        "negative_threshold": NEGATIVE_THRESHOLD,
        "exact_global_group": cfg.exact_global_group(),
        "checks": checks,
        "passed": all(ch["passed"] for ch in checks),
    }


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2)


# --- layer-level suites -----------------------------------------------------

SUITE_GRAPHS = ("q", "k", "v", "hadamard", "qk_b")


def suite_layers(grid: GridSpec) -> list[tuple[str, int]]:
    """(variant, rotation_layers) pairs exercised on ``grid``."""
    if grid.topology == "line1d":
        return [("identity", 0), ("shift1d", 0), ("flip1d", 0)]
    out = [("identity", 0), ("hflip", 0), ("hvflip", 0), ("dihedral_distance", 0)]
    if grid.is_square and grid.rows >= 2:
        out += [("dihedral_distance", 1), ("dihedral_distance", 2)]
    return out


def random_gsa(grid: GridSpec, variant: str, rotation_layers: int, seed: int, dim: int = 4, heads: int = 2,
               score_mode: str | None = None, dtype=torch.float64):
    modes = SCORE_MODES[1:]
    cfg = GSAConfig(
        dim,
        heads,
        edge_classes(grid, variant),
        SUITE_GRAPHS,
        score_mode or modes[seed % len(modes)],
        rotation_layers,
        token=True,
        init="normal",
    )
    return GraphSymmetricAttention(cfg, torch.Generator().manual_seed(seed), dtype).eval()


@torch.no_grad()
def layer_deviation(module, perm: np.ndarray, x: torch.Tensor) -> tuple[float, float]:
    """Token invariance and patch equivariance errors of a token-first layer under ``perm``."""
    idx = torch.as_tensor(np.concatenate([[0], np.asarray(perm) + 1]))
    y, yp = module(x), module(x[:, idx])
    tok = float((yp[:, 0] - y[:, 0]).abs().max())
    pat = float((yp[:, 1:] - y[:, idx[1:]]).abs().max())
    return tok, pat


def _probe(grid: GridSpec, module, seed: int, batch: int = 3, dtype=torch.float64) -> torch.Tensor:
    gen = torch.Generator().manual_seed(50_000 + seed)
    return torch.randn(batch, 1 + grid.num_vertices, module.cfg.dim, generator=gen, dtype=dtype)


def symmetry_suite(grids, seeds: int = 20, tol: float = 1e-10, dropout: float | None = None) -> dict:
    """Exhaustive declared-group check of fresh random GSA layers.

    With ``dropout`` set, each layer first receives one class-dropout draw
    per graph table.
    """
    rows = []
    for grid in grids:
        for variant, rl in suite_layers(grid):
            group = declared_group(variant, grid, rl)
            worst_tok = worst_pat = 0.0
            for seed in range(seeds):
                m = random_gsa(grid, variant, rl, seed)
                if dropout is not None:
                    freeze_symmetric_dropout(m, dropout, torch.Generator().manual_seed(90_000 + seed))
                x = _probe(grid, m, seed)
                for p in group:
                    tok, pat = layer_deviation(m, p.perm, x)
                    worst_tok, worst_pat = max(worst_tok, tok), max(worst_pat, pat)
            rows.append({
                "grid": [grid.rows, grid.cols], "topology": grid.topology, "cyclic": grid.cyclic,
                "variant": variant, "rotation_layers": rl, "group": [p.name for p in group],
                "token_deviation": worst_tok, "patch_deviation": worst_pat,
                "passed": worst_tok <= tol and worst_pat <= tol,
            })
    return {"tol": tol, "seeds": seeds, "cases": rows, "passed": all(r["passed"] for r in rows)}


def out_of_group(grid: GridSpec, variant: str, rotation_layers: int, seed: int = 0) -> list:
    """Grid symmetries outside the declared group plus one random vertex shuffle."""
    group = declared_group(variant, grid, rotation_layers)
    outside = [p for p in symmetry_permutations(grid) if not in_group(p, group)]
    shuffle = SymmetryPermutation(np.random.default_rng(seed).permutation(grid.num_vertices), "random")
    if not in_group(shuffle, group):
        outside.append(shuffle)
    return outside


def negative_controls(grids, seeds: int = 20, threshold: float = NEGATIVE_THRESHOLD, need: int = 19) -> dict:
    """Each layer kind must be broken by some out-of-group permutation on ``need`` seeds."""
    rows = []
    for grid in grids:
        for variant, rl in suite_layers(grid):
            perms = out_of_group(grid, variant, rl)
            if not perms:
                continue
            broken = {p.name: 0 for p in perms}
            for seed in range(seeds):
                m = random_gsa(grid, variant, rl, seed)
                x = _probe(grid, m, seed)
                for p in perms:
                    if max(layer_deviation(m, p.perm, x)) > threshold:
                        broken[p.name] += 1
            best = max(broken, key=broken.get)
            rows.append({
                "grid": [grid.rows, grid.cols], "variant": variant, "rotation_layers": rl,
                "broken_seeds": broken, "best": best, "passed": broken[best] >= need,
            })
    return {"threshold": threshold, "seeds": seeds, "need": need, "cases": rows, "passed": all(r["passed"] for r in rows)}


def triangle_suite(sizes=(3, 4), seeds: int = 20, tol: float = 1e-10, threshold: float = NEGATIVE_THRESHOLD) -> dict:
    """Triangle layer commutes with quarter turns and fails to commute with flips."""
    rows = []
    for s in sizes:
        grid = GridSpec(s, s)
        tmap = triangle_map(grid)
        rot_dev, flip_broken = 0.0, {"hflip": 0, "vflip": 0}
        for seed in range(seeds):
            gen = torch.Generator().manual_seed(seed)
            layer = TriangleLayer(tmap, 2, gen, torch.float64)
            gamma = torch.randn(3, 2, s * s, s * s, generator=gen, dtype=torch.float64)
            with torch.no_grad():
                out = layer(gamma)
                for label in ("rot90", "rot180", "rot270", "hflip", "vflip"):
                    p = torch.as_tensor(dihedral_permutation(grid, label).perm.copy())
                    dev = float((layer(gamma[..., p, :][..., p]) - out[..., p, :][..., p]).abs().max())
                    if label in flip_broken:
                        flip_broken[label] += dev > threshold
                    else:
                        rot_dev = max(rot_dev, dev)
        rows.append({
            "grid": s, "rotation_deviation": rot_dev, "flip_broken_seeds": flip_broken,
            "passed": rot_dev <= tol and min(flip_broken.values()) >= math.ceil(0.95 * seeds),
        })
    return {"tol": tol, "threshold": threshold, "cases": rows, "passed": all(r["passed"] for r in rows)}
