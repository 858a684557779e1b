"""Token compressors: shape laws, hand-computed cases, gradient flow."""

import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from vtcomp.compression import (
    CompressionSpec,
    MeanPoolCompressor,
    QueryResampler,
    StridedConvCompressor,
    build_compressor,
    pad_to_multiple,
)


def test_conv_shape_law():
    conv = StridedConvCompressor(d=16, ratio=2, init_noise=0.0)
    out = conv(torch.randn(8, 16))
    assert out.shape == (4, 16)


def test_conv_averaging_init_is_pairwise_mean():
    conv = StridedConvCompressor(d=2, ratio=2, init_noise=0.0)
    tokens = torch.tensor([[1.0, 3.0], [5.0, 7.0]])
    out = conv(tokens)
    assert torch.allclose(out, torch.tensor([[3.0, 5.0]]))


def test_conv_r4_is_two_stacked_stride2_layers():
    conv = StridedConvCompressor(d=8, ratio=4, init_noise=0.0)
    assert len(conv.stage_w) == 2
    out = conv(torch.randn(16, 8))
    assert out.shape == (4, 8)


def test_conv_locality():
    """Output row i depends only on its own window."""
    conv = StridedConvCompressor(d=4, ratio=2, init_noise=0.01,
                                 generator=torch.Generator().manual_seed(0))
    x = torch.randn(8, 4)
    base = conv(x)
    x2 = x.clone()
    x2[6] += 1.0  # window 3
    out = conv(x2)
    assert torch.allclose(out[:3], base[:3])
    assert not torch.allclose(out[3], base[3])


def test_conv_rejects_bad_ratio():
    with pytest.raises(ValueError):
        StridedConvCompressor(d=4, ratio=3)
    with pytest.raises(ValueError):
        CompressionSpec("conv1d", 6).validate()


def test_pool_hand_case():
    pool = MeanPoolCompressor(ratio=2)
    tokens = torch.tensor([[1.0, 3.0], [5.0, 7.0], [2.0, 2.0], [4.0, 6.0]])
    assert torch.allclose(pool(tokens), torch.tensor([[3.0, 5.0], [3.0, 4.0]]))


def test_pool_constant_input():
    pool = MeanPoolCompressor(ratio=4)
    tokens = torch.full((8, 3), 2.5)
    assert torch.allclose(pool(tokens), torch.full((2, 3), 2.5))


def test_pool_window_permutation_invariance():
    pool = MeanPoolCompressor(ratio=2)
    x = torch.randn(6, 5)
    perm = x.clone()
    perm[[2, 3]] = perm[[3, 2]]  # swap inside window 1
    assert torch.allclose(pool(x), pool(perm))


def test_pool_has_no_parameters():
    assert list(MeanPoolCompressor(2).parameters()) == []


def test_query_shape_and_rows():
    q = QueryResampler(d=8, num_queries=3, ratio=2,
                       generator=torch.Generator().manual_seed(1))
    x = torch.randn(12, 8)
    assert q(x).shape == (3, 8)
    attn = q.attention(x)
    assert torch.allclose(attn.sum(-1), torch.ones(3), atol=1e-6)


def test_query_single_token_degenerates_to_value_projection():
    q = QueryResampler(d=8, num_queries=4, ratio=2,
                       generator=torch.Generator().manual_seed(2))
    x = torch.randn(1, 8)
    out = q(x)
    expected = (x @ q.w_value).expand(4, -1)
    assert torch.allclose(out, expected, atol=1e-6)


def test_query_rejects_nonpositive_queries():
    with pytest.raises(ValueError):
        QueryResampler(d=8, num_queries=0, ratio=2)


def test_spec_validation():
    with pytest.raises(ValueError):
        CompressionSpec("query_resampler", 2, num_queries=5).validate(n_tokens=16)
    CompressionSpec("query_resampler", 2, num_queries=8).validate(n_tokens=16)
    with pytest.raises(ValueError):
        CompressionSpec("nope", 2).validate()


def test_pad_to_multiple():
    x = torch.randn(13, 4)
    padded = pad_to_multiple(x, 2)
    assert padded.shape == (14, 4)
    assert torch.equal(padded[13], torch.zeros(4))
    assert torch.equal(pad_to_multiple(x, 1), x)


@given(
    st.sampled_from(["conv1d", "mean_pool", "query_resampler"]),
    st.sampled_from([2, 4]),
    st.integers(2, 33),
)
@settings(max_examples=40, deadline=None)
def test_all_variants_emit_ceil_n_over_r_rows(kind, r, n):
    d = 6
    spec = CompressionSpec(kind, r, num_queries=math.ceil(n / r)
                           if kind == "query_resampler" else None)
    module = build_compressor(spec, d=d, n_tokens=n,
                              generator=torch.Generator().manual_seed(0))
    x = pad_to_multiple(torch.randn(n, d), r)
    out = module(x)
    assert out.shape == (math.ceil(n / r), d)


def test_identity_for_ratio_one():
    module = build_compressor(CompressionSpec("conv1d", 1), d=4, n_tokens=8)
    x = torch.randn(8, 4)
    assert torch.equal(module(x), x)
    assert list(module.parameters()) == []


@pytest.mark.parametrize("kind", ["conv1d", "query_resampler"])
def test_gradient_reaches_compressor_params(kind):
    spec = CompressionSpec(kind, 2, num_queries=4 if kind == "query_resampler" else None)
    module = build_compressor(spec, d=8, n_tokens=8,
                              generator=torch.Generator().manual_seed(3))
    x = torch.randn(8, 8)
    loss = module(x).pow(2).sum()
    loss.backward()
    grads = [p.grad for p in module.parameters()]
    assert grads and all(g is not None for g in grads)
    assert any(float(g.abs().max()) > 0 for g in grads)
