import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sitformer.attention import (
    GraphSymmetricAttention,
    GSAConfig,
    TriangleLayer,
    antisymmetrize,
    gsa_1d,
    gsa_forward,
    plain_attention_config,
    rotation_triangle_layer,
    standard_attention,
    symmetrize,
)
from sitformer.errors import ConfigError, ShapeError
from sitformer.graph import GraphWeights
from sitformer.grid import GridSpec, dihedral_permutation, edge_classes, shift_permutation, triangle_map
from sitformer.tensor import gradcheck
from sitformer.testkit import layer_deviation, negative_controls, random_gsa, symmetry_suite, triangle_suite

D = 4


def _weights(module):
    w = module.qkv.weight.detach()
    b = module.qkv.bias.detach()
    d = module.cfg.dim
    return (w[:d].T, w[d : 2 * d].T, w[2 * d :].T), (b[:d], b[d : 2 * d], b[2 * d :])


def _random_x(n, d=D, batch=2, seed=0):
    return torch.randn(batch, n, d, generator=torch.Generator().manual_seed(seed))


# --- standard attention ------------------------------------------------------


@given(st.integers(1, 7), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_standard_attention_token_invariant_patch_equivariant(p, seed):
    g = torch.Generator().manual_seed(seed)
    w = [torch.randn(D, D, generator=g) for _ in range(3)]
    x = torch.randn(2, 1 + p, D, generator=g)
    perm = torch.cat([torch.zeros(1, dtype=torch.long), 1 + torch.randperm(p, generator=g)])
    y, yp = standard_attention(x, *w, heads=2), standard_attention(x[:, perm], *w, heads=2)
    assert torch.allclose(yp[:, 0], y[:, 0], atol=1e-12)
    assert torch.allclose(yp[:, 1:], y[:, perm[1:]], atol=1e-12)


def test_two_token_closed_form():
    wq, wk, wv = torch.eye(2), torch.eye(2), torch.eye(2)
    x = torch.tensor([[[1.0, 0.0], [0.0, 2.0]]])
    out = standard_attention(x, wq, wk, wv)
    s = 1 / math.sqrt(2)
    # scores: row0 = [1, 0], row1 = [0, 4]
    a0 = torch.softmax(torch.tensor([1.0, 0.0]) * s, 0)
    a1 = torch.softmax(torch.tensor([0.0, 4.0]) * s, 0)
    expected = torch.stack([a0 @ x[0], a1 @ x[0]])
    assert torch.allclose(out[0], expected, atol=1e-15)
    e = math.exp(s)
    assert out[0, 0, 0].item() == pytest.approx(e / (e + 1), abs=1e-15)


def test_standard_attention_head_check():
    with pytest.raises(ConfigError):
        standard_attention(torch.randn(1, 2, 3), torch.eye(3), torch.eye(3), torch.eye(3), heads=2)


# --- configuration -----------------------------------------------------------


def test_config_validation():
    classes = edge_classes(GridSpec(2, 2), "hflip")
    with pytest.raises(ConfigError):
        GSAConfig(5, 2, classes)
    with pytest.raises(ConfigError):
        GSAConfig(4, 1, classes, graphs=("x",))
    with pytest.raises(ConfigError):
        GSAConfig(4, 1, classes, score_mode="mean")
    with pytest.raises(ConfigError):
        GSAConfig(4, 1, classes, rotation_layers=3)
    with pytest.raises(ConfigError):
        GSAConfig(4, 1, None, graphs=("q",))
    with pytest.raises(ConfigError):
        GSAConfig(4, 1, edge_classes(GridSpec(2, 3), "hflip"), rotation_layers=1)


def test_shape_errors():
    m = GraphSymmetricAttention(GSAConfig(D, 2, edge_classes(GridSpec(2, 2), "hvflip")))
    with pytest.raises(ShapeError):
        m(torch.randn(1, 4, D))
    with pytest.raises(ShapeError):
        m(torch.randn(1, 5, D + 1))


# --- degeneration -------------------------------------------------------------


def _identity_gsa(grid, graphs=("q", "k", "v", "hadamard"), token=True):
    cfg = GSAConfig(D, 2, edge_classes(grid, "identity"), graphs, "plain", token=token, init="identity")
    m = GraphSymmetricAttention(cfg, torch.Generator().manual_seed(0), torch.float64)
    with torch.no_grad():
        if m.g_had is not None:
            m.g_had.weights.fill_(1.0)
    return m


@pytest.mark.parametrize("grid", [GridSpec(2, 2), GridSpec(3, 2), GridSpec.line(5)])
@pytest.mark.parametrize("token", [True, False])
def test_identity_graphs_reduce_to_standard_attention(grid, token):
    m = _identity_gsa(grid, token=token)
    x = _random_x(grid.num_vertices + int(token))
    (wq, wk, wv), (bq, bk, bv) = _weights(m)
    ref = m.proj(standard_attention(x, wq, wk, wv, 2, bq, bk, bv))
    assert (gsa_forward(x, m) - ref).abs().max() <= 1e-12


def test_plain_config_matches_standard_attention():
    m = GraphSymmetricAttention(plain_attention_config(D, 2), torch.Generator().manual_seed(1), torch.float64)
    x = _random_x(6)
    (wq, wk, wv), (bq, bk, bv) = _weights(m)
    assert torch.allclose(m(x), m.proj(standard_attention(x, wq, wk, wv, 2, bq, bk, bv)), atol=1e-14)


def test_line_identity_classes_equal_standard_attention():
    m = _identity_gsa(GridSpec.line(4), graphs=("q", "k", "v"))
    x = _random_x(5)
    (wq, wk, wv), (bq, bk, bv) = _weights(m)
    assert torch.allclose(gsa_1d(x, m), m.proj(standard_attention(x, wq, wk, wv, 2, bq, bk, bv)), atol=1e-12)


# --- score modes ------------------------------------------------------------


@pytest.mark.parametrize("mode", ["symmetric", "antisymmetric"])
def test_score_mode_symmetry(mode):
    m = random_gsa(GridSpec(3, 3), "dihedral_distance", 0, seed=3, score_mode=mode)
    s, _ = m.scores(_random_x(10))
    t = symmetrize(s) if mode == "symmetric" else antisymmetrize(s)
    sign = 1 if mode == "symmetric" else -1
    assert torch.equal(t, sign * t.transpose(-2, -1))


def test_attention_rows_sum_to_one():
    for mode, total in (("symmetric", 1.0), ("antisymmetric", 1.0), ("both", 2.0)):
        m = random_gsa(GridSpec(3, 3), "hvflip", 0, seed=1, score_mode=mode)
        a, _ = m.attention(_random_x(10))
        assert torch.allclose(a.sum(-1), torch.full(a.shape[:-1], total), atol=1e-12)


def test_token_rows_survive_graph_mixing():
    """The Hadamard graph leaves the token row and column of the score matrix alone."""
    grid = GridSpec(2, 2)
    m = GraphSymmetricAttention(
        GSAConfig(D, 1, edge_classes(grid, "hvflip"), ("hadamard",), "plain"), torch.Generator().manual_seed(0), torch.float64
    )
    x = _random_x(5)
    q, k, _ = m.qkv(x).chunk(3, -1)
    raw = q @ k.transpose(-2, -1)
    s, _ = m.scores(x)
    assert torch.allclose(s[:, 0, 0], raw[:, 0], atol=1e-14)
    assert torch.allclose(s[:, 0, :, 0], raw[:, :, 0], atol=1e-14)


# --- symmetry (layer level) -------------------------------------------------


def test_declared_symmetries_hold_on_small_grids():
    grids = [GridSpec(2, 2), GridSpec(3, 3), GridSpec(2, 3), GridSpec.line(5), GridSpec.line(5, cyclic=True)]
    report = symmetry_suite(grids, seeds=5)
    assert report["passed"], [c for c in report["cases"] if not c["passed"]]


def test_out_of_group_permutations_break():
    report = negative_controls([GridSpec(3, 3)], seeds=10, need=10)
    assert report["passed"], report


def test_rotation_gsa_token_invariant_under_rot90():
    grid = GridSpec(3, 3)
    p = dihedral_permutation(grid, "rot90").perm
    for seed in range(5):
        m = random_gsa(grid, "dihedral_distance", 1, seed)
        tok, pat = layer_deviation(m, p, _random_x(10, seed=seed))
        assert tok <= 1e-10 and pat <= 1e-10


def test_rotation_gsa_breaks_under_hflip():
    grid = GridSpec(3, 3)
    p = dihedral_permutation(grid, "hflip").perm
    broken = sum(max(layer_deviation(random_gsa(grid, "dihedral_distance", 1, s), p, _random_x(10, seed=s))) > 1e-3 for s in range(20))
    assert broken == 20


def test_hflip_classes_keep_hflip():
    grid = GridSpec(3, 3)
    p = dihedral_permutation(grid, "hflip").perm
    for seed in range(5):
        tok, pat = layer_deviation(random_gsa(grid, "hflip", 0, seed), p, _random_x(10, seed=seed))
        assert tok <= 1e-10 and pat <= 1e-10


def test_flip1d_reversal_invariance():
    grid = GridSpec.line(6)
    rev = np.arange(6)[::-1].copy()
    for seed in range(5):
        m = random_gsa(grid, "flip1d", 0, seed)
        assert max(layer_deviation(m, rev, _random_x(7, seed=seed))) <= 1e-10


def test_cyclic_shift_equivariance_length_five():
    grid = GridSpec.line(5, cyclic=True)
    for seed in range(5):
        m = random_gsa(grid, "shift1d", 0, seed)
        x = _random_x(6, seed=seed)
        for d in range(5):
            tok, pat = layer_deviation(m, shift_permutation(grid, d).perm, x)
            assert tok <= 1e-10 and pat <= 1e-10


def test_gsa_1d_rejects_2d_classes():
    with pytest.raises(ConfigError):
        gsa_1d(_random_x(5), random_gsa(GridSpec(2, 2), "hflip", 0, 0))


# --- triangle layer -----------------------------------------------------------


def test_tied_theta_sums_triangle():
    grid = GridSpec(3, 3)
    tmap = triangle_map(grid)
    gamma = torch.randn(2, 1, 9, 9)
    t = 0.7
    theta = torch.full((1, tmap.num_angle_classes), t)
    out = rotation_triangle_layer(gamma, tmap, theta)
    k = torch.as_tensor(tmap.third_vertex.copy())
    i, j = torch.meshgrid(torch.arange(9), torch.arange(9), indexing="ij")
    ref = t * (gamma[..., i, j] + gamma[..., j, k] + gamma[..., k, i])
    assert torch.allclose(out, ref, atol=1e-14)


def test_triangle_layer_needs_map():
    with pytest.raises(ConfigError):
        rotation_triangle_layer(torch.randn(1, 1, 4, 4), None, torch.ones(1, 3))


def test_triangle_layer_token_block_untouched():
    tmap = triangle_map(GridSpec(2, 2))
    layer = TriangleLayer(tmap, 2, torch.Generator().manual_seed(0), torch.float64)
    s = torch.randn(3, 2, 5, 5)
    out = layer(s)
    assert torch.equal(out[..., 0, :], s[..., 0, :]) and torch.equal(out[..., :, 0], s[..., :, 0])
    assert torch.equal(out[..., 1:, 1:], layer(s[..., 1:, 1:]))
    with pytest.raises(ShapeError):
        layer(torch.randn(1, 2, 6, 6))


def test_triangle_suite_small():
    report = triangle_suite(sizes=(2, 3), seeds=5)
    assert report["passed"], report


def test_two_rotation_layers_keep_rotations():
    grid = GridSpec(4, 4)
    for label in ("rot90", "rot180", "rot270"):
        p = dihedral_permutation(grid, label).perm
        m = random_gsa(grid, "dihedral_distance", 2, seed=4)
        assert max(layer_deviation(m, p, _random_x(17))) <= 1e-10
        assert len(m.triangles) == 2
        assert not torch.equal(m.triangles[0].theta, m.triangles[1].theta)


# --- paths and gradients --------------------------------------------------------


def test_conv_path_matches_dense_path():
    grid = GridSpec(3, 3)
    dense = random_gsa(grid, "dihedral_distance", 1, seed=2)
    cfg = GSAConfig(**{**dense.cfg.__dict__, "path": "conv"})
    conv = GraphSymmetricAttention(cfg, dtype=torch.float64).eval()
    conv.load_state_dict(dense.state_dict())
    x = _random_x(10)
    assert torch.allclose(conv(x), dense(x), atol=1e-12)


@pytest.mark.parametrize("mode", ["symmetric", "both"])
def test_gsa_gradients_match_finite_differences(mode):
    m = random_gsa(GridSpec(2, 2), "dihedral_distance", 1, seed=0, dim=4, heads=2, score_mode=mode)
    x = _random_x(5, batch=1)
    target = torch.randn(1, 5, 4, generator=torch.Generator().manual_seed(9))

    def loss():
        return ((m(x) - target) ** 2).sum()

    report = gradcheck(loss, list(m.named_parameters()))
    assert max(report.values()) <= 1e-4, report
