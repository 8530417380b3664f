import math

import numpy as np
import pytest

from anomaly_forge import mmf, tge
from anomaly_forge.numerics import (
    DimensionError,
    adaptive_avg_pool2d,
    conv2d,
    depthwise_conv2d,
    relu,
)

C1, C2, C3 = 6, 5, 4


def tge_params(seed=0, n_experts=2):
    rng = np.random.default_rng(seed)
    p = tge.init_tge(rng, C1, C2, 4 * C3, n_experts)
    # non-zero biases so nothing is accidentally symmetric
    return {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in p.items()}


def inputs(seed=0, n=2):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((1, C1)), rng.standard_normal((n, C2))


# --- gate --------------------------------------------------------------------


def test_identical_categories_give_uniform_weights():
    f, win = inputs()
    win = np.vstack([win[0], win[0], win[0]])
    w = tge.gate(f, win, tge_params(n_experts=3))
    np.testing.assert_allclose(w, [1 / 3] * 3, atol=1e-15)


def test_gate_closed_form_logits():
    p = tge_params()
    for k in ("wv", "bv"):
        p["tge.attn." + k] = np.zeros_like(p["tge.attn." + k])
    p["tge.align.w"] = np.eye(C2, C1)
    p["tge.align.b"] = np.zeros(C1)
    f = np.zeros((1, C1))
    f[0, 0] = 1.0
    win = np.zeros((2, C2))
    win[0, 0] = math.log(3.0)
    np.testing.assert_allclose(tge.gate(f, win, p), [0.75, 0.25], atol=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_gate_simplex_and_scaling_keeps_argmax(seed):
    p = tge_params(seed)
    p["tge.align.b"] = np.zeros(C1)  # scaling F_win is then a positive scaling of the logits
    f, win = inputs(seed)
    w = tge.gate(f, win, p)
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-12
    w2 = tge.gate(f, 3.0 * win, p)
    assert np.argmax(w2) == np.argmax(w)
    assert not np.allclose(w, w2)


def test_gate_dimension_errors():
    f, win = inputs(n=3)
    with pytest.raises(DimensionError):
        tge.gate(f, win, tge_params())
    with pytest.raises(ValueError):
        tge.init_tge(np.random.default_rng(0), C1, C2, 16, n_experts=1)


# --- enhance -----------------------------------------------------------------


def expert_closed_form(p, i, x):
    pre = f"tge.e{i}."
    u = x + x @ p[pre + "attn.wv"] + p[pre + "attn.bv"]
    return relu(u @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]) @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]


def shared(p, f):
    return f + f @ p["tge.attn.wv"] + p["tge.attn.bv"]


@pytest.mark.parametrize("seed", range(5))
def test_single_token_attention_closed_form(seed):
    p = tge_params(seed)
    f, _ = inputs(seed)
    out, _ = tge.attention_forward(p, "tge.attn.", f)
    np.testing.assert_allclose(out, shared(p, f), atol=1e-12)
    a = shared(p, f)
    for i in range(2):
        np.testing.assert_allclose(tge.expert_forward(p, i, a)[0], expert_closed_form(p, i, a), atol=1e-12)


def test_one_hot_weights_select_expert():
    p = tge_params(1)
    f, _ = inputs(1)
    a, _ = tge.attention_forward(p, "tge.attn.", f)
    for j in range(2):
        w = np.eye(2)[j]
        assert np.array_equal(tge.enhance(f, w, p), tge.expert_forward(p, j, a)[0])


def test_uniform_over_identical_experts():
    p = tge_params(2)
    for k in [k for k in p if k.startswith("tge.e1.")]:
        p[k] = p[k.replace("tge.e1.", "tge.e0.")].copy()
    f, _ = inputs(2)
    a, _ = tge.attention_forward(p, "tge.attn.", f)
    np.testing.assert_allclose(tge.enhance(f, [0.5, 0.5], p), tge.expert_forward(p, 0, a)[0], atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_enhance_decomposition_and_superposition(seed):
    p = tge_params(seed, n_experts=3)
    f, _ = inputs(seed)
    a = shared(p, f)
    outs = [expert_closed_form(p, i, a) for i in range(3)]
    rng = np.random.default_rng(seed)
    w1, w2 = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
    np.testing.assert_allclose(tge.enhance(f, w1, p), sum(w1[i] * outs[i] for i in range(3)), atol=1e-12)
    t = 0.3
    mixed = tge.enhance(f, t * w1 + (1 - t) * w2, p)
    np.testing.assert_allclose(mixed, t * tge.enhance(f, w1, p) + (1 - t) * tge.enhance(f, w2, p), atol=1e-12)


def test_enhance_weight_length_error():
    with pytest.raises(DimensionError):
        tge.enhance(np.ones((1, C1)), [1.0, 0.0, 0.0], tge_params())


def test_tge_forward_equals_gate_then_enhance():
    p = tge_params(4)
    f, win = inputs(4)
    e_img, _ = tge.tge_forward(p, f, win)
    np.testing.assert_allclose(e_img, tge.enhance(f, tge.gate(f, win, p), p), atol=1e-12)


# --- MCB / MMF ---------------------------------------------------------------


def mmf_params(seed=0, zero_bias=False):
    rng = np.random.default_rng(seed)
    p = mmf.init_mmf(rng, C3, l3=2, c_mid=3)
    if not zero_bias:
        p = {k: v + 0.1 * rng.standard_normal(v.shape) if k.endswith(".b") else v for k, v in p.items()}
    return p


def test_zero_map_zero_bias_gives_zero_tokens():
    p = mmf_params(zero_bias=True)
    assert np.array_equal(mmf.mcb_embed(np.zeros((16, 16)), p), np.zeros((4, C3)))


@pytest.mark.parametrize("size", [16, 8, 4, 2, 5])
def test_token_count_independent_of_resolution(size):
    out = mmf.mcb_embed(np.random.default_rng(size).uniform(size=(size, size)), mmf_params())
    assert out.shape == (mmf.POOL_GRID**2, C3)


def test_tiny_map_rejected():
    with pytest.raises(DimensionError):
        mmf.mcb_embed(np.zeros((0, 3)), mmf_params())


@pytest.mark.parametrize("seed", range(5))
def test_mcb_matches_op_composition(seed):
    p = mmf_params(seed)
    m = np.random.default_rng(seed).uniform(size=(8, 8))
    pre = "mmf.l0."
    x = relu(conv2d(m[:, :, None], p[pre + "c1.k"], 2, 1) + p[pre + "c1.b"])
    x = relu(conv2d(x, p[pre + "c2.k"], 2, 1) + p[pre + "c2.b"])
    x = depthwise_conv2d(x, p[pre + "dw.k"], 1, 1)
    x = conv2d(x, p[pre + "pw.k"]) + p[pre + "pw.b"]
    pooled = adaptive_avg_pool2d(x, 2)
    lo, hi = x.min(axis=(0, 1)), x.max(axis=(0, 1))
    assert np.all(pooled >= lo - 1e-15) and np.all(pooled <= hi + 1e-15)
    np.testing.assert_allclose(mmf.mcb_embed(m, p, level=0), pooled.reshape(4, C3), atol=1e-12)


def test_fuse_layout_and_split():
    blocks = [np.full((4, C3), v) for v in (1.0, 2.0, 3.0, 4.0)]
    fused = mmf.fuse(blocks)
    assert fused.shape == (4, 4 * C3)
    np.testing.assert_array_equal(fused[0], np.repeat([1.0, 2.0, 3.0, 4.0], C3))
    for a, b in zip(mmf.split(fused), blocks):
        assert np.array_equal(a, b)


def test_fuse_permutation_permutes_blocks():
    rng = np.random.default_rng(0)
    blocks = [rng.standard_normal((4, C3)) for _ in range(4)]
    order = [2, 0, 3, 1]
    fused = mmf.fuse([blocks[i] for i in order])
    for pos, i in enumerate(order):
        assert np.array_equal(fused[:, pos * C3 : (pos + 1) * C3], blocks[i])


def test_fuse_shape_errors():
    with pytest.raises(DimensionError):
        mmf.fuse([np.ones((4, C3))] * 3)
    with pytest.raises(DimensionError):
        mmf.fuse([np.ones((4, C3))] * 3 + [np.ones((3, C3))])


def test_assemble_order():
    fusion = np.random.default_rng(1).standard_normal((4, 4 * C3))
    base = np.random.default_rng(2).standard_normal((2, 4 * C3))
    e = mmf.assemble(fusion, base)
    assert e.shape == (6, 4 * C3)
    assert np.array_equal(e[0], fusion[0])
    assert np.array_equal(e[4:], base)
    with pytest.raises(DimensionError):
        mmf.assemble(fusion, np.ones((2, 3)))


def test_mmf_forward_shapes():
    p = mmf_params()
    maps = [np.random.default_rng(s).uniform(size=(3,) + (n, n)) for s, n in enumerate((16, 8, 8, 4))]
    expert, _ = mmf.mmf_forward(p, maps)
    assert expert.shape == (3, 4 + 2, 4 * C3)
    assert np.array_equal(expert[1, 4:], p["mmf.e_base"])
