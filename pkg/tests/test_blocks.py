import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import PATH5, rand_block, rand_spatial
from costgcn.graph import adjacency_set, build_skeleton
from costgcn.blocks import (AgcParams, BatchNorm, BlockParams, CoBlock, GcParams, SsaParams, agc_attention,
                            agc_forward, co_st_block_step, gc_forward, ssa_forward, st_block_clip)
from costgcn.continual import compute_delay, temporal_conv_clip
from costgcn.numerics import DimensionError
from oracles import run_stream


def bn_loop(bn, c, x):
    return bn.gamma[c] * (x - bn.mean[c]) / math.sqrt(bn.var[c] + bn.eps) + bn.beta[c]


def spatial_epilogue(p, h, agg):
    """relu(Res(h) + BN(agg)) with explicit loops."""
    C_out, V = agg.shape
    out = np.zeros((C_out, V))
    for o in range(C_out):
        for v in range(V):
            r = h[o, v] if p.res is None else sum(p.res[o, c] * h[c, v] for c in range(h.shape[0]))
            out[o, v] = max(0.0, r + bn_loop(p.bn, o, agg[o, v]))
    return out


def gc_loop(h, adj, p, graph=None):
    C_in, V = h.shape
    C_out = p.W.shape[1]
    agg = np.zeros((C_out, V))
    for s in range(3):
        for o in range(C_out):
            for j in range(V):
                for i in range(V):
                    g = adj[s, i, j] * p.M[s, i, j] if graph is None else graph[s][i, j]
                    if g == 0:
                        continue
                    agg[o, j] += g * sum(p.W[s, o, c] * h[c, i] for c in range(C_in))
    return spatial_epilogue(p, h, agg)


def attention_loop(h, theta, phi):
    V = h.shape[1]
    a, b = theta @ h.astype(float), phi @ h.astype(float)
    logits = np.array([[sum(a[e, i] * b[e, j] for e in range(a.shape[0])) for j in range(V)] for i in range(V)])
    ex = np.exp(logits - logits.max(axis=1, keepdims=True))
    return ex / ex.sum(axis=1, keepdims=True)


def ssa_loop(h, p):
    S, dk, _ = p.Wq.shape
    V = h.shape[1]
    heads = []
    for s in range(S):
        q, k, v = p.Wq[s] @ h, p.Wk[s] @ h, p.Wv[s] @ h
        out = np.zeros((v.shape[0], V))
        for i in range(V):
            logits = np.array([q[:, i] @ k[:, j] / math.sqrt(dk) for j in range(V)])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            for j in range(V):
                out[:, i] += w[j] * v[:, j]
        heads.append(out)
    return spatial_epilogue(p, h, p.Wo @ np.concatenate(heads))


def test_gc_scalar_example():
    W = np.zeros((3, 1, 1), np.float32)
    W[0] = 1
    p = GcParams(W, np.ones((3, 1, 1), np.float32), BatchNorm.identity(1))
    adj = np.ones((3, 1, 1), np.float32)
    assert gc_forward(np.array([[2.0]]), adj, p).item() == 4


def test_gc_zero_weights_is_relu_of_residual(path5_adj):
    rng = np.random.default_rng(0)
    h = rng.normal(size=(3, 5)).astype(np.float32)
    p = GcParams(np.zeros((3, 3, 3), np.float32), np.ones((3, 5, 5), np.float32), BatchNorm.identity(3))
    assert np.array_equal(gc_forward(h, path5_adj, p), np.maximum(h, 0))
    p = rand_spatial(rng, "gc", 3, 4, 5)
    p.W[:] = 0
    p.bn = BatchNorm.identity(4)
    assert np.array_equal(gc_forward(h, path5_adj, p), np.maximum(p.res @ h, 0))


@pytest.mark.parametrize("C_in,C_out", [(3, 3), (3, 4)])
def test_gc_matches_loop(path5_adj, C_in, C_out):
    rng = np.random.default_rng(1)
    p = rand_spatial(rng, "gc", C_in, C_out, 5)
    h = rng.normal(size=(C_in, 5)).astype(np.float32)
    assert np.abs(gc_forward(h, path5_adj, p) - gc_loop(h, path5_adj, p)).max() <= 1e-5


def test_gc_dimension_error(path5_adj):
    p = rand_spatial(np.random.default_rng(0), "gc", 3, 3, 5)
    with pytest.raises(DimensionError):
        gc_forward(np.ones((4, 5)), path5_adj, p)


def test_agc_attention_examples():
    rng = np.random.default_rng(2)
    p = rand_spatial(rng, "agc", 4, 8, 5)
    assert np.allclose(agc_attention(np.zeros((4, 5)), p, 1), np.full((5, 5), 0.2))
    p1 = rand_spatial(rng, "agc", 4, 8, 1)
    assert agc_attention(rng.normal(size=(4, 1)), p1, 2).tolist() == [[1.0]]
    h = rng.normal(size=(4, 5)).astype(np.float32)
    for s in (1, 2, 3):
        att = agc_attention(h, p, s)
        assert np.all(np.abs(att.sum(axis=1) - 1) <= 1e-6)
        assert np.abs(att - attention_loop(h, p.theta[s - 1], p.phi[s - 1])).max() <= 1e-6


def test_agc_uniform_attention_reduces_to_expansion(path5_adj):
    rng = np.random.default_rng(3)
    p = rand_spatial(rng, "agc", 3, 3, 5)
    p.B[:] = 0
    p.theta[:] = 0
    p.phi[:] = 0
    h = rng.normal(size=(3, 5)).astype(np.float32)
    graph = [path5_adj[s] + np.full((5, 5), 0.2) for s in range(3)]
    assert np.abs(agc_forward(h, path5_adj, p) - gc_loop(h, path5_adj, p, graph)).max() <= 1e-5


def test_agc_zero_weights(path5_adj):
    rng = np.random.default_rng(4)
    p = rand_spatial(rng, "agc", 3, 3, 5)
    p.W[:] = 0
    h = rng.normal(size=(3, 5)).astype(np.float32)
    assert np.array_equal(agc_forward(h, path5_adj, p), np.maximum(h + p.bn.shift[:, None], 0))
    p.bn = BatchNorm.identity(3)
    assert np.array_equal(agc_forward(h, path5_adj, p), np.maximum(h, 0))


@pytest.mark.parametrize("C_in,C_out", [(4, 4), (3, 8)])
def test_agc_matches_loop(path5_adj, C_in, C_out):
    rng = np.random.default_rng(5)
    p = rand_spatial(rng, "agc", C_in, C_out, 5)
    h = rng.normal(size=(C_in, 5)).astype(np.float32)
    graph = [path5_adj[s] + p.B[s] + attention_loop(h, p.theta[s], p.phi[s]) for s in range(3)]
    assert np.abs(agc_forward(h, path5_adj, p) - gc_loop(h, path5_adj, p, graph)).max() <= 1e-5


def test_ssa_single_node():
    rng = np.random.default_rng(6)
    p = rand_spatial(rng, "ssa", 3, 3, 1, heads=1)
    p.bn = BatchNorm.identity(3)
    h = rng.normal(size=(3, 1)).astype(np.float32)
    expected = np.maximum(h + p.Wo @ (p.Wv[0] @ h), 0)
    assert np.abs(ssa_forward(h, p) - expected).max() <= 1e-6


def test_ssa_zero_query_gives_mean_of_values():
    rng = np.random.default_rng(7)
    p = rand_spatial(rng, "ssa", 3, 3, 5, heads=2)
    p.Wq[:] = 0
    p.bn = BatchNorm.identity(3)
    h = rng.normal(size=(3, 5)).astype(np.float32)
    heads = np.concatenate([np.repeat((p.Wv[s] @ h).mean(axis=1, keepdims=True), 5, 1) for s in range(2)])
    expected = np.maximum(h + p.Wo @ heads, 0)
    assert np.abs(ssa_forward(h, p) - expected).max() <= 1e-5
    # node permutation equivariance under uniform attention
    perm = rng.permutation(5)
    assert np.abs(ssa_forward(h[:, perm], p) - ssa_forward(h, p)[:, perm]).max() <= 1e-5


@pytest.mark.parametrize("C_in,C_out", [(4, 4), (3, 6)])
def test_ssa_matches_loop(C_in, C_out):
    rng = np.random.default_rng(8)
    p = rand_spatial(rng, "ssa", C_in, C_out, 4, heads=2)
    h = rng.normal(size=(C_in, 4)).astype(np.float32)
    assert np.abs(ssa_forward(h, p) - ssa_loop(h, p)).max() <= 1e-5


@pytest.mark.parametrize("kind", ["gc", "agc", "ssa"])
def test_spatial_clip_equals_per_frame(path5_adj, kind):
    rng = np.random.default_rng(9)
    p = rand_spatial(rng, kind, 4, 6, 5)
    H = rng.normal(size=(4, 7, 5)).astype(np.float32)
    clip = p.clip(H, path5_adj, scope="frame")
    frames = np.stack([p.frame(H[:, t], path5_adj) for t in range(7)], axis=1)
    assert np.abs(clip - frames).max() <= 1e-5


def test_agc_global_scope_uses_flattened_clip(path5_adj):
    rng = np.random.default_rng(10)
    p = rand_spatial(rng, "agc", 4, 4, 5)
    H = rng.normal(size=(4, 6, 5)).astype(np.float32)
    flat = lambda w: np.concatenate([w @ H[:, t] for t in range(6)])  # (C_e * T, V)
    out = p.clip(H, path5_adj, scope="global")
    for t in (0, 5):
        graph = [path5_adj[s] + p.B[s] + _global_attention(flat(p.theta[s]), flat(p.phi[s])) for s in range(3)]
        assert np.abs(out[:, t] - gc_loop(H[:, t], path5_adj, p, graph)).max() <= 1e-5


def _global_attention(a, b):
    logits = a.T.astype(float) @ b
    ex = np.exp(logits - logits.max(axis=1, keepdims=True))
    return ex / ex.sum(axis=1, keepdims=True)


def test_block_degenerate_kernel(path5_adj):
    rng = np.random.default_rng(11)
    p = rand_block(rng, "gc", 3, 3, 5, K=1)
    p.tcn_kernel[:] = np.eye(3, dtype=np.float32)[:, :, None]
    p.tcn_bias[:] = 0
    p.tcn_bn = BatchNorm.identity(3)
    H = rng.normal(size=(3, 8, 5)).astype(np.float32)
    g = p.spatial.clip(H, path5_adj)
    assert np.abs(st_block_clip(H, path5_adj, p) - np.maximum(H + g, 0)).max() <= 1e-6


def test_block_equal_padding_keeps_length(path5_adj):
    p = rand_block(np.random.default_rng(12), "gc", 3, 3, 5, K=9, padding=4)
    assert p.residual_delay == 4
    H = np.random.default_rng(13).normal(size=(3, 20, 5)).astype(np.float32)
    assert st_block_clip(H, path5_adj, p).shape == (3, 20, 5)


@pytest.mark.parametrize("kind", ["gc", "agc", "ssa"])
@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (1, 2), (2, 2)])
def test_block_clip_is_composition(path5_adj, kind, stride, padding):
    rng = np.random.default_rng(14)
    p = rand_block(rng, kind, 3, 6, 5, K=5, stride=stride, padding=padding)
    H = rng.normal(size=(3, 15, 5)).astype(np.float32)
    g = np.stack([p.spatial.frame(H[:, t], path5_adj) for t in range(15)], axis=1)
    z = temporal_conv_clip(g, p.tcn_kernel, p.tcn_bias, stride, 1, padding)
    z = np.stack([[bn_loop(p.tcn_bn, c, z[c, t]) for t in range(z.shape[1])] for c in range(6)])
    T_out = z.shape[1]
    res_frames = [t * stride for t in range(T_out)]  # own padding => residual centered, offset 0
    r = np.stack([p.res @ H[:, f] for f in res_frames], axis=1)
    assert np.abs(st_block_clip(H, path5_adj, p) - np.maximum(r + z, 0)).max() <= 1e-5


def test_block_without_residual(path5_adj):
    rng = np.random.default_rng(15)
    p = rand_block(rng, "gc", 3, 4, 5, K=3, residual="none")
    H = rng.normal(size=(3, 10, 5)).astype(np.float32)
    stepped = run_stream(CoBlock(p, path5_adj).step, H)
    assert np.abs(stepped - st_block_clip(H, path5_adj, p)).max() <= 1e-5


def test_co_block_k1_emits_every_step(path5_adj):
    rng = np.random.default_rng(16)
    p = rand_block(rng, "gc", 3, 3, 5, K=1)
    assert p.residual_delay == 0
    H = rng.normal(size=(3, 6, 5)).astype(np.float32)
    block = CoBlock(p, path5_adj)
    outs = [co_st_block_step(block, H[:, t]) for t in range(6)]
    assert all(o is not None for o in outs)
    assert np.abs(np.stack(outs, 1) - st_block_clip(H, path5_adj, p)).max() <= 1e-5


def test_co_block_reg_reference_delay():
    p = rand_block(np.random.default_rng(17), "gc", 3, 3, 5, K=9, delay=compute_delay(9, 1, 4))
    assert p.residual_delay == 4 and p.residual_offset == 4


@pytest.mark.parametrize("kind", ["gc", "agc", "ssa"])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("dilation", [1, 2])
def test_co_block_equivalence(path5_adj, kind, stride, dilation):
    rng = np.random.default_rng(100 + stride * 10 + dilation)
    K = 5
    p_reg = ((K - 1) * dilation) // 2
    p = rand_block(rng, kind, 4, 6, 5, K=K, stride=stride, dilation=dilation,
                   delay=compute_delay(K, dilation, p_reg))
    H = rng.normal(size=(4, 60, 5)).astype(np.float32)
    block = CoBlock(p, path5_adj)
    stepped = run_stream(block.step, H)
    clip = st_block_clip(H, path5_adj, p)
    assert stepped.shape == clip.shape
    assert np.abs(stepped - clip).max() <= 1e-5
    assert len(block.delay) == p.residual_delay


@settings(max_examples=25, deadline=None)
@given(K=st.integers(1, 9), d=st.integers(1, 2), s=st.integers(1, 2), data=st.data())
def test_random_delay_blocks_stay_equivalent(K, d, s, data):
    path5_adj = adjacency_set(build_skeleton(PATH5))
    k_eff = (K - 1) * d + 1
    p_reg = data.draw(st.integers(0, k_eff - 1))
    kind = data.draw(st.sampled_from(["gc", "agc", "ssa"]))
    rng = np.random.default_rng(data.draw(st.integers(0, 10**6)))
    p = rand_block(rng, kind, 3, 3, 5, K=K, stride=s, dilation=d, delay=compute_delay(K, d, p_reg))
    H = rng.normal(size=(3, k_eff + 12, 5)).astype(np.float32)
    stepped = run_stream(CoBlock(p, path5_adj).step, H)
    assert np.abs(stepped - st_block_clip(H, path5_adj, p)).max() <= 1e-5
