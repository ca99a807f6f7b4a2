"""Vertex grids, shared-weight edge classes, directed triangles and grid symmetries.

Vertices are numbered row-major, ``v = row * cols + col``.  A vertex sits at
``(x, y) = (col, row)`` with ``y`` pointing down, so a "right turn" while
heading east points south.

All geometry is exact integer arithmetic; no floating point distance or
angle is ever compared.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from math import gcd

import numpy as np

from .errors import ConfigError


class Variant(str, enum.Enum):
    IDENTITY = "identity"
    HFLIP = "hflip"
    HVFLIP = "hvflip"
    DIHEDRAL_DISTANCE = "dihedral_distance"
    SHIFT1D = "shift1d"
    FLIP1D = "flip1d"


GRID2D_VARIANTS = (Variant.IDENTITY, Variant.HFLIP, Variant.HVFLIP, Variant.DIHEDRAL_DISTANCE)
LINE1D_VARIANTS = (Variant.IDENTITY, Variant.SHIFT1D, Variant.FLIP1D)

# dihedral labels in a fixed order; the rotation subgroup comes first
D4_LABELS = ("identity", "rot90", "rot180", "rot270", "hflip", "vflip", "transpose", "anti_transpose")
ROTATION_LABELS = ("identity", "rot90", "rot180", "rot270")


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    topology: str = "grid2d"
    cyclic: bool = False

    def __post_init__(self):
        if self.topology not in ("grid2d", "line1d"):
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid needs positive sides, got {self.rows}x{self.cols}")
        if self.topology == "line1d" and self.rows != 1:
            raise ConfigError("line1d grids use rows=1")
        if self.cyclic and self.topology != "line1d":
            raise ConfigError("cyclic boundary is only defined for line1d")

    @classmethod
    def line(cls, length: int, cyclic: bool = False) -> "GridSpec":
        return cls(1, length, "line1d", cyclic)

    @property
    def num_vertices(self) -> int:
        return self.rows * self.cols

    @property
    def is_square(self) -> bool:
        return self.topology == "grid2d" and self.rows == self.cols

    def coords(self) -> np.ndarray:
        """Integer ``(x, y)`` per vertex, shape ``[P, 2]``."""
        r, c = np.divmod(np.arange(self.num_vertices), self.cols)
        return np.stack([c, r], axis=1)

    def contains(self, x: int, y: int) -> bool:
        return 0 <= x < self.cols and 0 <= y < self.rows

    def vertex(self, x: int, y: int) -> int:
        return y * self.cols + x


def _check_variant(grid: GridSpec, variant: Variant) -> Variant:
    variant = Variant(variant)
    allowed = GRID2D_VARIANTS if grid.topology == "grid2d" else LINE1D_VARIANTS
    if variant not in allowed:
        raise ConfigError(f"variant {variant.value} is not defined on {grid.topology} grids")
    return variant


def offset_key(variant: Variant, dx: int, dy: int, grid: GridSpec | None = None):
    """Sharing key of the edge with offset ``(dx, dy)`` from source to target.

    Only defined for translation-invariant variants (everything but identity).
    The cyclic 1D keys need ``grid`` for the modulus.
    """
    variant = Variant(variant)
    if variant is Variant.HFLIP:
        return (abs(dx), dy)
    if variant is Variant.HVFLIP:
        return (abs(dx), abs(dy))
    if variant is Variant.DIHEDRAL_DISTANCE:
        return dx * dx + dy * dy
    if variant in (Variant.SHIFT1D, Variant.FLIP1D):
        if grid is not None and grid.cyclic:
            n = grid.num_vertices
            fwd = dx % n
            return fwd if variant is Variant.SHIFT1D else min(fwd, (-dx) % n)
        return dx if variant is Variant.SHIFT1D else abs(dx)
    raise ConfigError(f"variant {variant.value} has no offset key")


@dataclass(frozen=True, eq=False)
class EdgeClassMap:
    """Shared-weight classes over ordered vertex pairs.

    ``class_index[i, j]`` is the weight id of the edge ``i -> j``; ids are
    contiguous and ordered by their sorted sharing key (``keys[c]``).
    """

    grid: GridSpec
    variant: Variant
    class_index: np.ndarray
    keys: tuple
    num_classes: int = field(init=False)

    def __post_init__(self):
        self.class_index.setflags(write=False)
        object.__setattr__(self, "num_classes", len(self.keys))

    @property
    def num_vertices(self) -> int:
        return self.grid.num_vertices

    @property
    def translation_invariant(self) -> bool:
        return self.variant is not Variant.IDENTITY

    def self_classes(self) -> np.ndarray:
        """Class ids that occur on the diagonal (zero offset)."""
        return np.unique(np.diag(self.class_index))

    def offset_class(self, dx: int, dy: int) -> int | None:
        """Class id of offset ``(dx, dy)``, ``None`` if no pair in the grid has it."""
        if not self.translation_invariant:
            raise ConfigError("identity classes are not indexed by offset")
        if self.grid.topology == "line1d" and dy != 0:
            return None
        if abs(dx) >= self.grid.cols or abs(dy) >= self.grid.rows:
            return None
        key = offset_key(self.variant, dx, dy, self.grid)
        return self._lookup().get(key)

    def _lookup(self) -> dict:
        if "_key_lookup" not in self.__dict__:
            object.__setattr__(self, "_key_lookup", {k: c for c, k in enumerate(self.keys)})
        return self.__dict__["_key_lookup"]


def _offset_keys(grid: GridSpec, variant: Variant, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Vectorized ``offset_key``; one integer column per key component."""
    if variant is Variant.HFLIP:
        return np.stack([np.abs(dx), dy], axis=-1)
    if variant is Variant.HVFLIP:
        return np.stack([np.abs(dx), np.abs(dy)], axis=-1)
    if variant is Variant.DIHEDRAL_DISTANCE:
        return (dx * dx + dy * dy)[:, None]
    if grid.cyclic:
        n = grid.num_vertices
        fwd = dx % n
        key = fwd if variant is Variant.SHIFT1D else np.minimum(fwd, (-dx) % n)
    else:
        key = dx if variant is Variant.SHIFT1D else np.abs(dx)
    return key[:, None]


def edge_classes(grid: GridSpec, variant: Variant | str) -> EdgeClassMap:
    variant = _check_variant(grid, variant)
    n = grid.num_vertices
    if variant is Variant.IDENTITY:
        idx = np.arange(n * n, dtype=np.int64).reshape(n, n)
        return EdgeClassMap(grid, variant, idx, tuple(range(n * n)))
    xy = grid.coords()
    d = (xy[None, :, :] - xy[:, None, :]).reshape(-1, 2)
    raw = _offset_keys(grid, variant, d[:, 0], d[:, 1])
    uniq, inverse = np.unique(raw, axis=0, return_inverse=True)
    if uniq.shape[1] == 1:
        keys = tuple(int(k) for k in uniq[:, 0])
    else:
        keys = tuple(tuple(int(v) for v in row) for row in uniq)
    return EdgeClassMap(grid, variant, inverse.reshape(n, n).astype(np.int64), keys)


# --- directed triangles -----------------------------------------------------

RIGHT, LEFT, DEGENERATE = 1, -1, 0


@dataclass(frozen=True, eq=False)
class TriangleMap:
    """Third vertex ``k = T(i, j)`` and angle classes for the triangle layer.

    ``angle_class[i, j, s]`` indexes the weight of slot ``s`` of the triangle
    ``i -> j -> k``: slot 0 is the angle at ``j`` (edge ``i j``), slot 1 the
    angle at ``k`` (edge ``j k``), slot 2 the angle at ``i`` (edge ``k i``).
    """

    grid: GridSpec
    third_vertex: np.ndarray
    turn: np.ndarray
    angle_class: np.ndarray
    keys: tuple
    num_angle_classes: int = field(init=False)

    def __post_init__(self):
        for a in (self.third_vertex, self.turn, self.angle_class):
            a.setflags(write=False)
        object.__setattr__(self, "num_angle_classes", len(self.keys))

    def gather_index(self) -> np.ndarray:
        """Flat indices into a ``P*P`` score block, shape ``[P, P, 3]``."""
        n = self.grid.num_vertices
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        k = self.third_vertex
        return np.stack([i * n + j, j * n + k, k * n + i], axis=-1)


def _angle_key(vertex, a, b, orientation: int, slot: int, diagonal: bool):
    u = (a[0] - vertex[0], a[1] - vertex[1])
    w = (b[0] - vertex[0], b[1] - vertex[1])
    uu = u[0] * u[0] + u[1] * u[1]
    ww = w[0] * w[0] + w[1] * w[1]
    if uu == 0 or ww == 0:
        return (1, slot, int(diagonal), 0, 1)
    dot = u[0] * w[0] + u[1] * w[1]
    # interior angle in [0, pi] is fixed by sign(cos) and cos^2
    cos2 = Fraction(dot * dot, uu * ww)
    sign = (dot > 0) - (dot < 0)
    return (0, orientation, sign, cos2.numerator, cos2.denominator)


def triangle_map(grid: GridSpec) -> TriangleMap:
    if not grid.is_square or grid.rows < 2:
        raise ConfigError(f"triangle map needs a square grid of side >= 2, got {grid.rows}x{grid.cols}")
    n = grid.num_vertices
    xy = [tuple(int(v) for v in p) for p in grid.coords()]
    third = np.empty((n, n), dtype=np.int64)
    turn = np.empty((n, n), dtype=np.int64)
    raw = []
    for i in range(n):
        for j in range(n):
            k, t = j, DEGENERATE
            if i != j:
                dx, dy = xy[j][0] - xy[i][0], xy[j][1] - xy[i][1]
                g = gcd(abs(dx), abs(dy))
                # rotate heading by +90 deg in y-down coordinates: a right turn
                rx, ry = -dy // g, dx // g
                xj, yj = xy[j]
                if grid.contains(xj + rx, yj + ry):
                    k, t = grid.vertex(xj + rx, yj + ry), RIGHT
                elif grid.contains(xj - rx, yj - ry):
                    k, t = grid.vertex(xj - rx, yj - ry), LEFT
            third[i, j], turn[i, j] = k, t
            pi, pj, pk = xy[i], xy[j], xy[k]
            diag = i == j
            raw.append(_angle_key(pj, pi, pk, t, 0, diag))
            raw.append(_angle_key(pk, pj, pi, t, 1, diag))
            raw.append(_angle_key(pi, pk, pj, t, 2, diag))
    keys = sorted(set(raw))
    lookup = {k: c for c, k in enumerate(keys)}
    angle = np.array([lookup[k] for k in raw], dtype=np.int64).reshape(n, n, 3)
    return TriangleMap(grid, third, turn, angle, tuple(keys))


# --- symmetry permutations --------------------------------------------------


@dataclass(frozen=True, eq=False)
class SymmetryPermutation:
    """Vertex relabeling in gather form: ``transformed[v] = original[perm[v]]``."""

    perm: np.ndarray
    label: str
    offset: int = 0

    def __post_init__(self):
        p = np.asarray(self.perm, dtype=np.int64)
        if sorted(p.tolist()) != list(range(p.size)):
            raise ConfigError(f"{self.label} is not a bijection")
        p.setflags(write=False)
        object.__setattr__(self, "perm", p)

    @property
    def name(self) -> str:
        return f"shift1d({self.offset})" if self.label == "shift1d" else self.label

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv

    def matrix(self) -> np.ndarray:
        """Permutation matrix ``S`` with ``S @ x == x[perm]``."""
        n = self.perm.size
        m = np.zeros((n, n))
        m[np.arange(n), self.perm] = 1.0
        return m

    def is_identity(self) -> bool:
        return bool(np.all(self.perm == np.arange(self.perm.size)))


def dihedral_source(label: str, rows: int, cols: int):
    """Source ``(row, col)`` of target ``(r, c)`` for a dihedral element."""
    h, w = rows - 1, cols - 1
    table = {
        "identity": lambda r, c: (r, c),
        "rot90": lambda r, c: (h - c, r),  # clockwise
        "rot180": lambda r, c: (h - r, w - c),
        "rot270": lambda r, c: (c, w - r),
        "hflip": lambda r, c: (r, w - c),
        "vflip": lambda r, c: (h - r, c),
        "transpose": lambda r, c: (c, r),
        "anti_transpose": lambda r, c: (w - c, h - r),
    }
    return table[label]


def dihedral_permutation(grid: GridSpec, label: str) -> SymmetryPermutation:
    if label not in D4_LABELS:
        raise ConfigError(f"unknown dihedral element {label!r}")
    if label in ("rot90", "rot270", "transpose", "anti_transpose") and grid.rows != grid.cols:
        raise ConfigError(f"{label} needs a square grid")
    src = dihedral_source(label, grid.rows, grid.cols)
    perm = [0] * grid.num_vertices
    for r in range(grid.rows):
        for c in range(grid.cols):
            sr, sc = src(r, c)
            perm[r * grid.cols + c] = sr * grid.cols + sc
    return SymmetryPermutation(np.array(perm), label)


def shift_permutation(grid: GridSpec, offset: int) -> SymmetryPermutation:
    n = grid.num_vertices
    return SymmetryPermutation((np.arange(n) - offset) % n, "shift1d", offset)


def symmetry_permutations(grid: GridSpec) -> list[SymmetryPermutation]:
    """All applicable grid symmetries, identity first."""
    n = grid.num_vertices
    if grid.topology == "line1d":
        out = [SymmetryPermutation(np.arange(n), "identity"), SymmetryPermutation(np.arange(n)[::-1], "flip1d")]
        if grid.cyclic:
            out += [shift_permutation(grid, d) for d in range(1, n)]
        return out
    labels = D4_LABELS if grid.rows == grid.cols else ("identity", "rot180", "hflip", "vflip")
    return [dihedral_permutation(grid, lab) for lab in labels]


def declared_group(variant: Variant | str, grid: GridSpec, rotation_layers: int = 0) -> list[SymmetryPermutation]:
    """Elements of ``symmetry_permutations(grid)`` a layer is built to respect.

    Triangle layers keep only the orientation-preserving part so flips drop
    out.
    """
    variant = _check_variant(grid, variant)
    perms = symmetry_permutations(grid)
    if variant is Variant.IDENTITY:
        keep = {"identity"}
    elif variant is Variant.HFLIP:
        keep = {"identity", "hflip"}
    elif variant is Variant.HVFLIP:
        keep = {"identity", "hflip", "vflip", "rot180"}
    elif variant is Variant.DIHEDRAL_DISTANCE:
        keep = set(D4_LABELS)
    elif variant is Variant.SHIFT1D:
        keep = {"identity", "shift1d"}
    else:
        keep = {"identity", "flip1d", "shift1d"}
    if rotation_layers:
        keep &= set(ROTATION_LABELS)
    return [p for p in perms if p.label in keep]


def in_group(perm: SymmetryPermutation, group: list[SymmetryPermutation]) -> bool:
    """Membership by action, so e.g. vflip on a one-row grid counts as identity."""
    return any(np.array_equal(perm.perm, g.perm) for g in group)


def check_commutation(classes: EdgeClassMap, perm: SymmetryPermutation) -> bool:
    """True iff ``perm`` maps every shared weight onto itself.

    Equivalent to ``S @ M == M @ S`` for the permutation matrix ``S`` and any
    dense matrix ``M`` built from the classes.
    """
    p = perm.perm
    if p.size != classes.num_vertices:
        raise ConfigError("permutation and class map live on different grids")
    idx = classes.class_index
    return bool(np.array_equal(idx[np.ix_(p, p)], idx))
