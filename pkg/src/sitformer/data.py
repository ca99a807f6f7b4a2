"""Datasets: the synthetic rotation task and a CIFAR-10 binary reader.

All images are returned channels-last ``[n, H, W, C]`` float32 with integer
labels.  Every split also carries a rotated copy of its test images
(uniform random multiples of 90 degrees, clockwise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

RECORD = 3073
CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = "test_batch.bin"


@dataclass
class Split:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    rot_x: np.ndarray
    rot_k: np.ndarray

    @property
    def rot_y(self) -> np.ndarray:
        return self.test_y

    @property
    def image(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max())) + 1

    def save(self, path: str | Path):
        np.savez_compressed(path, **{k: getattr(self, k) for k in ("train_x", "train_y", "test_x", "test_y", "rot_x", "rot_k")})

    @classmethod
    def load(cls, path: str | Path) -> "Split":
        with np.load(path) as z:
            return cls(**{k: z[k] for k in z.files})


def rotate90(images: np.ndarray, k: int | np.ndarray) -> np.ndarray:
    """Clockwise rotation by ``k`` quarter turns of ``[n, H, W, C]`` (per image if ``k`` is an array)."""
    if np.ndim(k) == 0:
        return np.rot90(images, -int(k), axes=(1, 2)).copy()
    out = np.empty_like(images)
    for q in range(4):
        sel = k == q
        out[sel] = np.rot90(images[sel], -q, axes=(1, 2))
    return out


def rotated_copy(images: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    k = rng.integers(0, 4, size=len(images))
    return rotate90(images, k), k


# --- synthetic rotation task -------------------------------------------------


@dataclass
class SyntheticRotTask:
    """Radial-frequency classes seen only through an upward-facing sector.

    Class ``k`` draws ``cos(2 pi f_k r / R + phase)`` with ``f_k = k + 1``,
    multiplies it by a window opening towards the top edge and adds
    Gaussian noise.  The label is recomputed by a radial matched filter
    whose ring sums are exactly rounded, so it is the same for all four
    quarter-turn rotations of an image; samples where the filter disagrees
    with the generating class are redrawn.
    """

    size: int = 16
    channels: int = 1
    num_classes: int = 4
    seed: int = 0
    n_train: int = 5000
    n_test: int = 1000
    noise: float = 0.3
    sector_power: float = 4.0

    def __post_init__(self):
        if self.size < 4 or self.num_classes < 2:
            raise ConfigError("synthetic task needs size >= 4 and at least two classes")
        c = (self.size - 1) / 2
        yy, xx = np.mgrid[0 : self.size, 0 : self.size].astype(np.float64)
        self._r = np.hypot(xx - c, yy - c)
        self._theta = np.arctan2(c - yy, xx - c)  # 0 points right, pi/2 up
        self._R = self.size / 2
        self._window = np.clip(np.sin(self._theta), 0.0, None) ** self.sector_power
        f = np.arange(1, self.num_classes + 1)[:, None, None]
        arg = 2 * np.pi * f * self._r[None] / self._R
        self._cos, self._sin = np.cos(arg), np.sin(arg)

    def _draw(self, rng: np.random.Generator, label: int) -> np.ndarray:
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.8, 1.2)
        f = label + 1
        clean = amp * np.cos(2 * np.pi * f * self._r / self._R + phase) * self._window
        img = clean[..., None] + self.noise * rng.standard_normal((self.size, self.size, self.channels))
        return img

    def label_of(self, image: np.ndarray) -> int:
        """Rotation-invariant label: class whose radial frequency carries the most energy."""
        s = image.sum(axis=-1)
        best, arg = -1.0, -1
        for k in range(self.num_classes):
            a = math.fsum((s * self._cos[k]).ravel())
            b = math.fsum((s * self._sin[k]).ravel())
            e = a * a + b * b
            if e > best:
                best, arg = e, k
        return arg

    def verify_invariant(self, image: np.ndarray) -> bool:
        y = self.label_of(image)
        return all(self.label_of(np.rot90(image, -q, axes=(0, 1))) == y for q in range(1, 4))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        xs = np.empty((n, self.size, self.size, self.channels), dtype=np.float32)
        ys = np.empty(n, dtype=np.int64)
        i = 0
        while i < n:
            label = int(rng.integers(self.num_classes))
            img = self._draw(rng, label)
            if self.label_of(img) != label:
                continue
            if not self.verify_invariant(img):
                raise AssertionError("label function is not rotation invariant")
            xs[i], ys[i] = img, label
            i += 1
        return xs, ys

    def generate(self) -> Split:
        train_seq, test_seq, rot_seq = np.random.SeedSequence(self.seed).spawn(3)
        train_x, train_y = self.sample(self.n_train, np.random.default_rng(train_seq))
        test_x, test_y = self.sample(self.n_test, np.random.default_rng(test_seq))
        rot_x, rot_k = rotated_copy(test_x, np.random.default_rng(rot_seq))
        return Split(train_x, train_y, test_x, test_y, rot_x, rot_k)


def load_synthetic(path: str | Path | None, task: SyntheticRotTask) -> Split:
    """Read the cached split at ``path``, generating and caching it first if missing."""
    if path is None:
        return task.generate()
    path = Path(path)
    if path.is_dir():
        path = path / f"synthetic_rot_seed{task.seed}_{task.n_train}_{task.n_test}.npz"
    if path.exists():
        return Split.load(path)
    split = task.generate()
    path.parent.mkdir(parents=True, exist_ok=True)
    split.save(path)
    return split


# --- CIFAR-10 ---------------------------------------------------------------


def read_cifar_batch(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Records of 1 label byte + 3x32x32 plane-major pixel bytes to ``[n, 32, 32, 3]`` uint8."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD:
        raise ValueError(f"{path}: length {raw.size} is not a positive multiple of {RECORD}")
    rec = raw.reshape(-1, RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise ValueError(f"{path}: label {labels.max()} outside 0..9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, labels


@dataclass
class Cifar10Source:
    path: str | Path
    train_subset: int = 5000
    test_subset: int = 2000
    seed: int = 0

    def files(self) -> tuple[list[Path], Path]:
        root = Path(self.path)
        train = [root / f for f in CIFAR_TRAIN if (root / f).exists()]
        test = root / CIFAR_TEST
        if not train or not test.exists():
            raise FileNotFoundError(f"no CIFAR-10 binary batches under {root}")
        return train, test

    def load(self) -> Split:
        train_files, test_file = self.files()
        parts = [read_cifar_batch(f) for f in train_files]
        tx = np.concatenate([p[0] for p in parts])
        ty = np.concatenate([p[1] for p in parts])
        vx, vy = read_cifar_batch(test_file)
        pick_seq, test_seq, rot_seq = np.random.SeedSequence(self.seed).spawn(3)
        a = np.random.default_rng(pick_seq).permutation(len(tx))[: self.train_subset]
        b = np.random.default_rng(test_seq).permutation(len(vx))[: self.test_subset]
        mean = tx[a].reshape(-1, 3).mean(0) / 255.0
        std = tx[a].reshape(-1, 3).std(0) / 255.0

        def norm(x):
            return ((x.astype(np.float32) / 255.0 - mean) / std).astype(np.float32)

        test_x = norm(vx[b])
        rot_x, rot_k = rotated_copy(test_x, np.random.default_rng(rot_seq))
        return Split(norm(tx[a]), ty[a], test_x, vy[b], rot_x, rot_k)
