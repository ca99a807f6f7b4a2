"""PI-ViT < ViT < SiT(G) ordering on a 5k CIFAR-10 subset (binary batches required)."""

import argparse
import json
import sys

import torch

from sitformer.experiments import CIFAR_ENV, cifar_dir, cifar_ordering

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default=None, help=f"CIFAR-10 binary directory (default: ${CIFAR_ENV})")
    ap.add_argument("--out", default="runs/cifar_ablation")
    ap.add_argument("--epochs", type=int, default=25)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    data = cifar_dir(args.data)
    if data is None:
        sys.exit(f"no CIFAR-10 directory given; pass --data or set {CIFAR_ENV}")
    torch.set_num_threads(1)
    rep = cifar_ordering(data, args.out, args.seeds, args.epochs, log=lambda s: print(s, file=sys.stderr))
    print(json.dumps(rep, indent=2))
