"""Desk-scale generalization experiments shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np

from .data import Cifar10Source, SyntheticRotTask
from .model import HeadConfig, LayerSymmetry, SiTConfig, vit_config
from .train import TrainConfig, baselines, parameter_report, train

CIFAR_ENV = "SIT_CIFAR10_DIR"


def rotation_sit_config() -> SiTConfig:
    """1 local + 2 global layers, 32/64 features, rotation layers in both stages."""
    sym = LayerSymmetry("dihedral_distance", rotation_layers=1)
    return SiTConfig(image=(16, 16, 1), local_symmetry=sym, global_symmetry=sym, head=HeadConfig(dim=4))


def cifar_sit_config() -> SiTConfig:
    """SiT with only the Hadamard graph (dihedral sharing), 8x8 windows over 32x32 images."""
    sym = LayerSymmetry("dihedral_distance", graphs=("hadamard",))
    return SiTConfig(
        image=(32, 32, 3), local_patch=8, local_window=8, global_dim=96,
        local_symmetry=sym, global_symmetry=sym, head=HeadConfig(dim=10),
    )


def _summary(rows: list[dict]) -> dict:
    last = rows[-1]
    return {k: float(last[k]) for k in ("train_acc", "test_acc", "rotated_test_acc")}


def rot_generalization(out: str | Path, seeds=(0, 1, 2), epochs: int = 6, log=None) -> dict:
    """Train rotation-SiT and ViT on canonical images; test on canonical and rotated copies."""
    out = Path(out)
    sit = rotation_sit_config()
    models = {"SiT": sit, "ViT": vit_config(sit)}
    runs = {name: [] for name in models}
    t0 = time.perf_counter()
    for seed in seeds:
        split = SyntheticRotTask(seed=seed).generate()
        for name, cfg in models.items():
            rows = train(cfg, split, TrainConfig(epochs=epochs, seed=seed), out / f"{name}_seed{seed}", log=log)
            runs[name].append({"seed": seed, **_summary(rows),
                               "max_gap": max(abs(float(r["test_acc"]) - float(r["rotated_test_acc"])) for r in rows)})
    mean = {n: {k: float(np.mean([r[k] for r in rs])) for k in ("test_acc", "rotated_test_acc")} for n, rs in runs.items()}
    report = {
        "runs": runs,
        "mean": mean,
        "sit_max_gap": max(r["max_gap"] for r in runs["SiT"]),
        "rotated_margin": mean["SiT"]["rotated_test_acc"] - mean["ViT"]["rotated_test_acc"],
        "parameters": parameter_report(models),
        "seconds": time.perf_counter() - t0,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    return report


def cifar_dir(path: str | Path | None = None) -> Path | None:
    path = path or os.environ.get(CIFAR_ENV)
    return Path(path) if path else None


def cifar_ordering(data: str | Path, out: str | Path, seeds=(0, 1, 2), epochs: int = 25, log=None) -> dict:
    """PI-ViT, ViT and SiT(G) on a 5k-image subset; counts seeds with PI-ViT < ViT < SiT(G)."""
    out = Path(out)
    sit = cifar_sit_config()
    models = {"PI-ViT": baselines(sit)["PI-ViT"], "ViT": baselines(sit)["ViT"], "SiT(G)": sit}
    acc = {name: [] for name in models}
    for seed in seeds:
        split = Cifar10Source(data, train_subset=5000, test_subset=2000, seed=seed).load()
        for name, cfg in models.items():
            rows = train(cfg, split, TrainConfig(epochs=epochs, seed=seed), out / f"{name}_seed{seed}",
                         task="cifar10", log=log)
            acc[name].append(float(rows[-1]["test_acc"]))
    ordered = [acc["PI-ViT"][i] < acc["ViT"][i] < acc["SiT(G)"][i] for i in range(len(seeds))]
    report = {"test_acc": acc, "ordered": ordered, "parameters": parameter_report(models)}
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    return report
