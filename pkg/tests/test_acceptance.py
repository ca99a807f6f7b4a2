"""Acceptance criteria, one test each; every test prints a PASS/FAIL summary line.

Run as ``pytest tests/test_acceptance.py -v -s`` to see the summary lines inline.
"""

import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from sitformer.attention import gsa_1d, gsa_forward, standard_attention
from sitformer.experiments import CIFAR_ENV, cifar_dir, cifar_ordering, rot_generalization
from sitformer.graph import apply_conv, apply_dense
from sitformer.grid import GridSpec, edge_classes
from sitformer.model import HeadConfig, LayerSymmetry, SiTConfig, build_model
from sitformer.tensor import gradcheck
from sitformer.testkit import negative_controls, symmetry_suite, triangle_suite
from test_attention import _identity_gsa, _random_x, _weights
from test_graph import CONV_VARIANTS, gw_for
from test_grid import GRID_VARIANTS, brute_partition, same_partition

SUITE_GRIDS = [GridSpec(2, 2), GridSpec(3, 3), GridSpec(4, 4), GridSpec.line(4), GridSpec.line(9, cyclic=True)]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail

    return emit


def test_c01_declared_group_exact(report):
    t0 = time.perf_counter()
    rep = symmetry_suite(SUITE_GRIDS, seeds=20, tol=1e-10)
    sec = time.perf_counter() - t0
    worst = max(max(r["token_deviation"], r["patch_deviation"]) for r in rep["cases"])
    report(1, rep["passed"] and sec <= 120, f"{len(rep['cases'])} layer kinds x 20 seeds, max deviation {worst:.2e} <= 1e-10, {sec:.1f}s <= 120s")


def test_c02_out_of_group_breaks(report):
    rep = negative_controls(SUITE_GRIDS, seeds=20, threshold=1e-3, need=19)
    low = min(r["broken_seeds"][r["best"]] for r in rep["cases"])
    report(2, rep["passed"], f"{len(rep['cases'])} layer kinds, fewest broken seeds {low}/20 (need 19) at threshold 1e-3")


def test_c03_triangle_layer(report):
    rep = triangle_suite((3, 4), seeds=20, tol=1e-10)
    rot = max(r["rotation_deviation"] for r in rep["cases"])
    flips = min(min(r["flip_broken_seeds"].values()) for r in rep["cases"])
    report(3, rep["passed"], f"rotation deviation {rot:.2e} <= 1e-10, flips broken on {flips}/20 seeds")


def test_c04_dense_conv_duality(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for draw in range(100):
        r, c = (int(v) for v in rng.integers(1, 9, size=2))
        gw = gw_for(r, c, CONV_VARIANTS[draw % len(CONV_VARIANTS)], channels=3, seed=draw)
        x = torch.randn(2, 1 + r * c, 3, generator=torch.Generator().manual_seed(draw))
        with torch.no_grad():
            d = apply_dense(gw, x)
            k = apply_conv(gw, x, gw.full_conv_ksize())
        worst = max(worst, float((d - k).abs().max() / d.abs().max()))
    report(4, worst <= 1e-12, f"100 draws on grids up to 8x8, max relative deviation {worst:.2e} <= 1e-12")


def test_c05_identity_graphs_degenerate(report):
    worst = 0.0
    for grid in (GridSpec(2, 2), GridSpec(3, 3), GridSpec(4, 3), GridSpec.line(5)):
        for token in (True, False):
            m = _identity_gsa(grid, token=token)
            x = _random_x(grid.num_vertices + int(token))
            (wq, wk, wv), (bq, bk, bv) = _weights(m)
            with torch.no_grad():
                ref = m.proj(standard_attention(x, wq, wk, wv, 2, bq, bk, bv))
                out = gsa_1d(x, m) if grid.topology == "line1d" else gsa_forward(x, m)
            worst = max(worst, float((out - ref).abs().max()))
    report(5, worst <= 1e-12, f"identity graphs vs standard attention, max deviation {worst:.2e} <= 1e-12")


def test_c06_class_counts(report):
    bad = []
    for variant in GRID_VARIANTS:
        for rows in range(1, 6):
            for cols in range(1, 6):
                grid = GridSpec(rows, cols)
                m = edge_classes(grid, variant)
                keys = brute_partition(grid, variant)
                if m.num_classes != len(set(keys)) or not same_partition(m.class_index, keys):
                    bad.append((variant, rows, cols))
    dihedral3 = edge_classes(GridSpec(3, 3), "dihedral_distance").num_classes
    report(6, not bad and dihedral3 == 6, f"all grids up to 5x5 match brute force ({len(bad)} mismatches), 3x3 dihedral classes = {dihedral3}")


def test_c07_model_gradcheck(report):
    sym = LayerSymmetry("dihedral_distance", rotation_layers=1, graphs=("q", "k", "v", "hadamard"))
    cfg = SiTConfig(image=(4, 4, 1), local_patch=2, local_window=2, local_dim=4, global_dim=4, local_heads=2,
                    global_heads=2, local_layers=1, global_layers=1, local_symmetry=sym, global_symmetry=sym,
                    head=HeadConfig(dim=3), graph_init="normal")
    model = build_model(cfg, seed=0, dtype=torch.float64)
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(2, 4, 4, 1, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 2])
    t0 = time.perf_counter()
    rep = gradcheck(lambda: F.cross_entropy(model(x), y), list(model.named_parameters()), h=1e-5)
    sec = time.perf_counter() - t0
    name, worst = max(rep.items(), key=lambda kv: kv[1])
    report(7, worst <= 1e-4 and sec <= 300, f"{len(rep)} parameter tensors, worst relative error {worst:.2e} ({name}) <= 1e-4, {sec:.1f}s <= 300s")


@pytest.mark.slow
def test_c08_rotation_generalization(report, tmp_path):
    torch.set_default_dtype(torch.float32)
    rep = rot_generalization(tmp_path, seeds=(0, 1, 2), epochs=6)
    ok = rep["sit_max_gap"] <= 0.02 and rep["rotated_margin"] >= 0.15 and rep["seconds"] <= 600
    m = rep["mean"]
    report(8, ok, f"SiT canonical {m['SiT']['test_acc']:.3f} rotated {m['SiT']['rotated_test_acc']:.3f} "
                  f"(max gap {rep['sit_max_gap']:.3f} <= 0.02); ViT rotated {m['ViT']['rotated_test_acc']:.3f}, "
                  f"margin {rep['rotated_margin']:.3f} >= 0.15; {rep['seconds']:.0f}s <= 600s")


@pytest.mark.slow
def test_c09_cifar_ordering(report, tmp_path):
    data = cifar_dir()
    if data is None or not data.exists():
        report(9, False, f"CIFAR-10 binary batches unavailable; set {CIFAR_ENV} to the directory holding data_batch_*.bin")
    torch.set_default_dtype(torch.float32)
    rep = cifar_ordering(data, tmp_path, seeds=(0, 1, 2), epochs=25)
    wins = sum(rep["ordered"])
    report(9, wins >= 2, f"PI-ViT < ViT < SiT(G) on {wins}/3 seeds (need 2): {rep['test_acc']}")


def test_c10_dropout_preserves_symmetry(report):
    worst, ok = 0.0, True
    for p in (0.1, 0.3, 0.5):
        rep = symmetry_suite(SUITE_GRIDS[:3], seeds=20, tol=1e-10, dropout=p)
        ok &= rep["passed"]
        worst = max(worst, *(max(r["token_deviation"], r["patch_deviation"]) for r in rep["cases"]))
    report(10, ok, f"class dropout p in (0.1, 0.3, 0.5), 20 mask draws each, max deviation {worst:.2e} <= 1e-10")
