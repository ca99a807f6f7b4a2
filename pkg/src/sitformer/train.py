"""Training loop, evaluation and baseline construction.

``metrics.csv`` has one row per epoch with the columns in ``METRIC_COLUMNS``:
mean training loss and accuracy over the epoch's minibatches, accuracy on
the canonical test images, accuracy on the rotated copies of the same test
images, and wall-clock seconds spent in that epoch.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, read_tensors, save_checkpoint
from .data import Split
from .errors import ConfigError
from .model import SiTConfig, SymmetryInvariantTransformer, build_model, count_parameters, vit_config
from .tensor import dtype_for

METRIC_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc", "rotated_test_acc", "wall_time")
CHECKPOINT = "checkpoint.gsaw"
METRICS = "metrics.csv"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    precision: str = "single"
    threads: int = 1
    eval_batch: int = 500

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr and batch_size must be positive, epochs non-negative")
        dtype_for(self.precision)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def make_optimizer(model: torch.nn.Module, tc: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=tc.lr, betas=tc.betas, weight_decay=tc.weight_decay)


@torch.no_grad()
def accuracy(model: torch.nn.Module, x: np.ndarray, y: np.ndarray, batch: int = 500, dtype=torch.float32) -> float:
    model.eval()
    correct = 0
    for i in range(0, len(x), batch):
        logits = model(torch.as_tensor(x[i : i + batch], dtype=dtype))
        correct += int((logits.argmax(-1) == torch.as_tensor(y[i : i + batch])).sum())
    return correct / max(len(x), 1)


def _diagnose(model, loss, epoch, step) -> str:
    bad = [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]
    grads = {n: float(p.grad.norm()) for n, p in model.named_parameters() if p.grad is not None}
    worst = sorted(grads.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:3]
    return f"non-finite loss {float(loss.detach())} at epoch {epoch} step {step}; non-finite params: {bad or 'none'}; largest grad norms: {worst}"


def _read_metrics(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def train(
    model_cfg: SiTConfig,
    split: Split,
    tc: TrainConfig,
    out_dir: str | Path,
    resume: bool = False,
    task: str = "synthetic-rot",
    log=None,
) -> list[dict]:
    """Train from scratch (or from ``out_dir``'s checkpoint) and return all metric rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(tc.threads)
    dtype = dtype_for(tc.precision)
    if split.image != tuple(model_cfg.image):
        raise ConfigError(f"model expects {model_cfg.image} images, data has {split.image}")
    model = build_model(model_cfg, tc.seed, dtype)
    opt = make_optimizer(model, tc)
    start = 0
    ckpt, metrics = out / CHECKPOINT, out / METRICS
    rows = []
    if resume and ckpt.exists():
        start = int(load_checkpoint(ckpt, model, opt)["epoch"])
        rows = _read_metrics(metrics)[:start]
    with open(metrics, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    model_cfg.save(out / "model.json")

    x = torch.as_tensor(split.train_x, dtype=dtype)
    y = torch.as_tensor(split.train_y)
    n = len(x)
    for epoch in range(start, tc.epochs):
        t0 = time.perf_counter()
        torch.manual_seed(tc.seed * 100_003 + epoch)
        order = torch.randperm(n, generator=torch.Generator().manual_seed(tc.seed * 7919 + epoch))
        model.train()
        tot_loss, tot_correct = 0.0, 0
        for step, i in enumerate(range(0, n, tc.batch_size)):
            idx = order[i : i + tc.batch_size]
            logits = model(x[idx])
            loss = F.cross_entropy(logits, y[idx])
            if not torch.isfinite(loss):
                raise TrainingDiverged(_diagnose(model, loss, epoch + 1, step))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tot_loss += float(loss.detach()) * len(idx)
            tot_correct += int((logits.argmax(-1) == y[idx]).sum())
        row = {
            "epoch": epoch + 1,
            "train_loss": tot_loss / n,
            "train_acc": tot_correct / n,
            "test_acc": accuracy(model, split.test_x, split.test_y, tc.eval_batch, dtype),
            "rotated_test_acc": accuracy(model, split.rot_x, split.rot_y, tc.eval_batch, dtype),
        }
        row["wall_time"] = time.perf_counter() - t0
        rows.append(row)
        with open(metrics, "a", newline="") as f:
            csv.DictWriter(f, fieldnames=METRIC_COLUMNS).writerow(row)
        meta = {"epoch": epoch + 1, "task": task, "model": model_cfg.to_dict(), "train": tc.to_dict()}
        save_checkpoint(ckpt, model, opt, meta)
        if log:
            log(json.dumps(row))
    return rows


def load_trained(path: str | Path, dtype=torch.float32) -> tuple[SymmetryInvariantTransformer, dict]:
    _, meta = read_tensors(path)
    cfg = SiTConfig.from_dict(meta["model"])
    model = SymmetryInvariantTransformer(cfg, dtype)
    load_checkpoint(path, model)
    return model.eval(), meta


def evaluate(path: str | Path, split: Split, batch: int = 500) -> dict:
    model, meta = load_trained(path)
    return {
        "epoch": meta.get("epoch"),
        "test_acc": accuracy(model, split.test_x, split.test_y, batch),
        "rotated_test_acc": accuracy(model, split.rot_x, split.rot_y, batch),
    }


def parameter_report(configs: dict[str, SiTConfig], tolerance: float = 0.05) -> dict:
    """Parameter counts and whether each lies within ``tolerance`` of the first model's."""
    counts = {name: count_parameters(build_model(cfg)) for name, cfg in configs.items()}
    ref = next(iter(counts.values()))
    return {
        name: {"parameters": c, "ratio": c / ref, "within": abs(c / ref - 1) <= tolerance}
        for name, c in counts.items()
    }


def baselines(cfg: SiTConfig) -> dict[str, SiTConfig]:
    """ViT (learned positional embedding) and PI-ViT (none) matching ``cfg``'s layer stack."""
    return {"ViT": vit_config(cfg, pos_embed=True), "PI-ViT": vit_config(cfg, pos_embed=False)}
