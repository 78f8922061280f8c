"""Functional primitives: affine, convolutions, normalizations, softmax,
attention block. Expected values are hand arithmetic or shape arithmetic.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csimask.core import (
    AttentionBlockParams,
    ConfigError,
    DimensionError,
    Tensor,
    affine,
    attention_block,
    batch_norm_features,
    conv2d,
    deconv2d,
    layer_norm,
    log_softmax,
    make_rng,
    softmax,
)

RNG = make_rng(11)


def t(values, grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=grad)


# ---- affine -----------------------------------------------------------------


def test_affine_hand_example():
    # x=[1,2], W=[[1,1]], b=[0.5] -> [3.5]
    out = affine(t([1.0, 2.0]), t([[1.0, 1.0]]), t([0.5]))
    assert np.allclose(out.data, [3.5])


def test_affine_identity():
    x = RNG.standard_normal((4, 3))
    out = affine(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    assert np.allclose(out.data, x)


def test_affine_latent_width():
    # flattened bottom feature map (512 x 5 x 10 = 25600) maps to the 256 latent
    x = Tensor(RNG.standard_normal((2, 512 * 5 * 10)).astype(np.float32))
    w = Tensor(RNG.standard_normal((256, 25600)).astype(np.float32))
    out = affine(x, w, Tensor(np.zeros(256, dtype=np.float32)))
    assert out.data.shape == (2, 256)


def test_affine_dim_mismatch():
    with pytest.raises(DimensionError):
        affine(t([1.0, 2.0, 3.0]), t([[1.0, 1.0]]), None)


# ---- conv2d / deconv2d --------------------------------------------------------


def test_conv2d_stage_shape():
    x = Tensor(RNG.standard_normal((1, 3, 30, 200)))
    w = Tensor(RNG.standard_normal((128, 3, 3, 5)))
    out = conv2d(x, w, None, (3, 5))
    assert out.data.shape == (1, 128, 10, 40)


def test_conv2d_full_encoder_chain():
    h = Tensor(RNG.standard_normal((1, 3, 30, 200)))
    specs = [(128, 3, (3, 5)), (256, 128, (2, 2)), (512, 256, (1, 2))]
    for cout, cin, k in specs:
        w = Tensor(RNG.standard_normal((cout, cin) + k) * 0.01)
        h = conv2d(h, w, None, k)
    assert h.data.shape == (1, 512, 5, 10)


def test_conv2d_identity_kernel():
    x = RNG.standard_normal((2, 1, 5, 5))
    w = Tensor(np.ones((1, 1, 1, 1)))
    out = conv2d(Tensor(x), w, None, (1, 1))
    assert np.allclose(out.data, x)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(
            Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 2, 2))), None, (1, 1)
        )


def test_conv2d_kernel_too_large():
    with pytest.raises(DimensionError):
        conv2d(
            Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), None, (1, 1)
        )


def test_deconv2d_shape():
    x = Tensor(RNG.standard_normal((1, 512, 5, 10)))
    w = Tensor(RNG.standard_normal((512, 4, 1, 2)) * 0.01)
    out = deconv2d(x, w, None, (1, 2))
    assert out.data.shape == (1, 4, 5, 20)


def test_deconv2d_decoder_chain_shapes():
    h = Tensor(RNG.standard_normal((2, 512, 5, 10)))
    for cin, cout, k in [(512, 256, (1, 2)), (256, 128, (2, 2)), (128, 3, (3, 5))]:
        w = Tensor(RNG.standard_normal((cin, cout) + k) * 0.01)
        h = deconv2d(h, w, None, k)
    assert h.data.shape == (2, 3, 30, 200)


def test_deconv2d_identity_kernel():
    x = RNG.standard_normal((1, 1, 3, 4))
    out = deconv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), None, (1, 1))
    assert np.allclose(out.data, x)


def test_conv_deconv_spatial_roundtrip():
    # (30,200) -> (5,10) -> (30,200) through the full strided chain
    h = Tensor(RNG.standard_normal((1, 3, 30, 200)))
    down = [(8, 3, (3, 5)), (8, 8, (2, 2)), (8, 8, (1, 2))]
    for cout, cin, k in down:
        h = conv2d(h, Tensor(RNG.standard_normal((cout, cin) + k) * 0.1), None, k)
    assert h.data.shape[2:] == (5, 10)
    for cin, cout, k in [(8, 8, (1, 2)), (8, 8, (2, 2)), (8, 3, (3, 5))]:
        h = deconv2d(h, Tensor(RNG.standard_normal((cin, cout) + k) * 0.1), None, k)
    assert h.data.shape[2:] == (30, 200)


# ---- softmax / norms -----------------------------------------------------------


def test_softmax_uniform():
    out = softmax(t([0.0, 0.0, 0.0, 0.0]))
    assert np.allclose(out.data, 0.25)


def test_softmax_stable_on_large_logits():
    out = softmax(t([1000.0, 1000.0, 1000.0]))
    assert np.allclose(out.data, 1.0 / 3.0) and np.isfinite(out.data).all()


def test_softmax_closed_form():
    out = softmax(t([np.log(2.0), 0.0]))
    assert np.allclose(out.data, [2.0 / 3.0, 1.0 / 3.0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=16), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(logits, shift):
    p1 = softmax(t(logits)).data
    p2 = softmax(t(np.asarray(logits) + shift)).data
    assert abs(p1.sum() - 1.0) <= 1e-12
    assert np.allclose(p1, p2, atol=1e-12)


def test_log_softmax_matches_log_of_softmax():
    x = t(RNG.standard_normal(9))
    assert np.allclose(log_softmax(x).data, np.log(softmax(x).data))


def test_batch_norm_two_point_columns():
    out = batch_norm_features(t([[1.0], [-1.0]]))
    assert np.allclose(out.data.ravel(), [1.0, -1.0], atol=1e-4)
    out = batch_norm_features(t([[0.0], [2.0]]))
    assert np.allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-4)


def test_batch_norm_constant_column_guarded():
    out = batch_norm_features(t([[3.0], [3.0]]))
    assert np.allclose(out.data, 0.0)


def test_batch_norm_rejects_small_batch():
    with pytest.raises(DimensionError):
        batch_norm_features(t([[1.0, 2.0]]))


def test_batch_norm_moments():
    x = t(RNG.standard_normal((64, 7)) * 3.0 + 1.0)
    out = batch_norm_features(x).data
    assert np.abs(out.mean(axis=0)).max() < 1e-9
    assert np.abs(out.var(axis=0) - 1.0).max() < 1e-4


def test_layer_norm_affine_params():
    x = t(RNG.standard_normal((5, 8)))
    gamma, beta = t(np.full(8, 2.0)), t(np.full(8, -1.0))
    out = layer_norm(x, gamma, beta).data
    assert np.allclose(out.mean(axis=-1), -1.0, atol=1e-6)


# ---- attention block -------------------------------------------------------------


def make_block(dim=256, heads=1):
    return AttentionBlockParams.create(dim, heads, make_rng(3), dtype=np.float64, prefix="blk")


def test_attention_output_shape():
    params = make_block()
    tokens = Tensor(RNG.standard_normal((400, 256)))
    assert attention_block(tokens, params).data.shape == (400, 256)


def test_attention_permutation_equivariance():
    params = make_block(dim=16, heads=4)
    tokens = RNG.standard_normal((9, 16))
    perm = make_rng(5).permutation(9)
    out = attention_block(Tensor(tokens), params).data
    out_p = attention_block(Tensor(tokens[perm]), params).data
    assert np.allclose(out[perm], out_p, atol=1e-12)


def test_attention_single_token_collapses_to_self():
    # with one token the attention weight is exactly 1, so MHA reduces to
    # the value/output projections of the token itself
    params = make_block(dim=6, heads=2)
    tok = RNG.standard_normal((1, 6))
    out = attention_block(Tensor(tok), params).data
    h = (tok - tok.mean(-1, keepdims=True)) / np.sqrt(tok.var(-1, keepdims=True) + 1e-5)
    h = h * params.ln1_gamma.data + params.ln1_beta.data
    v = h @ params.w_v.data.T + params.b_v.data
    z = tok + v @ params.w_o.data.T + params.b_o.data
    m = (z - z.mean(-1, keepdims=True)) / np.sqrt(z.var(-1, keepdims=True) + 1e-5)
    m = m * params.ln2_gamma.data + params.ln2_beta.data
    u = z + np.maximum(m @ params.w_mlp1.data.T + params.b_mlp1.data, 0) @ params.w_mlp2.data.T + params.b_mlp2.data
    assert np.allclose(out, u, atol=1e-10)


def test_attention_head_divisibility():
    with pytest.raises(ConfigError):
        AttentionBlockParams.create(10, 3, make_rng(0))


def test_attention_batched_consistency():
    params = make_block(dim=8, heads=2)
    tokens = RNG.standard_normal((3, 5, 8))
    batched = attention_block(Tensor(tokens), params).data
    single = np.stack([attention_block(Tensor(tk), params).data for tk in tokens])
    assert np.allclose(batched, single, atol=1e-12)
