"""Encoder/decoder shape chain, masked losses, error maps, supervised path."""

import numpy as np
import pytest

from csimask.backbone import (
    Decoder,
    Encoder,
    masked_mae_loss,
    masked_recon_loss,
    pixel_error_map,
)
from csimask.core import ConfigError, DimensionError, Tensor, make_rng

RNG = make_rng(41)


def small_models(seed=0, n=3, s=30, t=200, dtype=np.float64):
    enc = Encoder(n, s, t, make_rng(seed), dtype=dtype)
    dec = Decoder(n, s, t, make_rng(seed, 1), dtype=dtype)
    return enc, dec


def test_encoder_latent_shape():
    enc, _ = small_models()
    z = enc(Tensor(RNG.standard_normal((8, 3, 30, 200))))
    assert z.data.shape == (8, 256)


def test_encoder_zero_input_zero_bias_gives_zero_latent():
    enc, _ = small_models()
    z = enc(Tensor(np.zeros((2, 3, 30, 200))))
    assert np.allclose(z.data, 0.0)


def test_encoder_stage_shapes_match_fixed_chain():
    enc, _ = small_models()
    assert enc.stage_shapes() == [(128, 10, 40), (256, 5, 20), (512, 5, 10)]


def test_encoder_supports_six_antennas():
    enc, dec = small_models(n=6)
    out = dec(enc(Tensor(RNG.standard_normal((2, 6, 30, 200)))))
    assert out.data.shape == (2, 6, 30, 200)


def test_encoder_rejects_non_divisible_plane():
    with pytest.raises(ConfigError):
        Encoder(3, 31, 200, make_rng(0))
    with pytest.raises(ConfigError):
        Encoder(3, 30, 201, make_rng(0))


def test_decoder_output_shape():
    _, dec = small_models()
    out = dec(Tensor(RNG.standard_normal((8, 256))))
    assert out.data.shape == (8, 3, 30, 200)


def test_decoder_zero_latent_constant_output():
    _, dec = small_models()
    out = dec(Tensor(np.zeros((2, 256)))).data
    assert np.allclose(out[0], out[1])
    per_channel = out[0].reshape(3, -1)
    assert np.allclose(per_channel, per_channel[:, :1])


def test_encode_decode_differentiable_end_to_end():
    from csimask.core import finite_difference_check, tsum

    enc = Encoder(1, 6, 20, make_rng(3), dtype=np.float64)
    dec = Decoder(1, 6, 20, make_rng(4), dtype=np.float64)
    x = Tensor(RNG.standard_normal((1, 1, 6, 20)), requires_grad=True)
    proj = Tensor(RNG.standard_normal((1, 1, 6, 20)))
    err = finite_difference_check(lambda x: tsum(dec(enc(x)) * proj), [x])
    assert err < 1e-4


def test_dual_streams_identical_given_same_seed():
    enc_a, _ = small_models(seed=7)
    enc_b, _ = small_models(seed=7)
    x = RNG.standard_normal((2, 3, 30, 200))
    assert np.array_equal(enc_a(Tensor(x)).data, enc_b(Tensor(x)).data)


# ---- masked loss -------------------------------------------------------------


def test_masked_mae_zero_for_perfect_recon():
    x = RNG.standard_normal((2, 3, 6, 10))
    masks = np.zeros((2, 6, 10))
    loss = masked_mae_loss(Tensor(x), x, masks)
    assert loss.item() == 0.0


def test_masked_mae_toy_oracle():
    # x=[[1,2],[3,4]], xhat=[[1,0],[0,4]], masked pixels (0,1) and (1,0) -> 2.5
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    xhat = np.array([[[[1.0, 0.0], [0.0, 4.0]]]])
    pixel_mask = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    loss = masked_mae_loss(Tensor(xhat), x, pixel_mask)
    assert loss.item() == pytest.approx(2.5, abs=0)


def test_masked_loss_ignores_visible_pixels():
    x = RNG.standard_normal((1, 2, 4, 4))
    mask = np.zeros((1, 4, 4))
    mask[0, 0, :] = 1.0  # first row visible
    xhat = x.copy()
    base = masked_mae_loss(Tensor(xhat), x, mask).item()
    xhat2 = x.copy()
    xhat2[:, :, 0, :] += 100.0  # perturb only visible pixels
    assert masked_mae_loss(Tensor(xhat2), x, mask).item() == base


def test_masked_loss_requires_nonempty_mask():
    x = np.zeros((1, 1, 2, 2))
    with pytest.raises(DimensionError):
        masked_mae_loss(Tensor(x), x, np.ones((1, 2, 2)))


def test_masked_loss_gradient_zero_at_visible_pixels():
    x = RNG.standard_normal((1, 2, 4, 6))
    mask = (RNG.random((1, 4, 6)) > 0.5).astype(np.float64)
    mask[0, 0, 0] = 0.0
    xhat = Tensor(RNG.standard_normal((1, 2, 4, 6)), requires_grad=True)
    masked_mae_loss(xhat, x, mask).backward()
    visible = np.broadcast_to(mask[:, None].astype(bool), xhat.data.shape)
    assert np.all(xhat.grad[visible] == 0.0)
    assert np.any(xhat.grad[~visible] != 0.0)


def test_mae_linear_penalty_scaling():
    # scaling one masked residual by 10 changes the loss by exactly 9|r|/|Omega|
    x = np.zeros((1, 1, 2, 2))
    mask = np.zeros((1, 2, 2))
    xhat = np.array([[[[0.5, 0.25], [1.0, -0.75]]]])
    base = masked_mae_loss(Tensor(xhat), x, mask).item()
    xhat10 = xhat.copy()
    xhat10[0, 0, 0, 0] *= 10.0
    scaled = masked_mae_loss(Tensor(xhat10), x, mask).item()
    assert scaled - base == pytest.approx(9.0 * 0.5 / 4.0, abs=1e-12)
    # the squared-error variant is super-linear in the same perturbation
    base_mse = masked_recon_loss(Tensor(xhat), x, mask, kind="mse").item()
    scaled_mse = masked_recon_loss(Tensor(xhat10), x, mask, kind="mse").item()
    assert scaled_mse - base_mse > 9.0 * 0.5 / 4.0


def test_normalized_target_variant_changes_loss():
    x = RNG.standard_normal((2, 1, 4, 4)) * 5.0 + 2.0
    xhat = Tensor(RNG.standard_normal((2, 1, 4, 4)))
    mask = np.zeros((2, 4, 4))
    plain = masked_recon_loss(xhat, x, mask, normalized_target=False).item()
    normed = masked_recon_loss(xhat, x, mask, normalized_target=True).item()
    assert plain != pytest.approx(normed)


# ---- error map -----------------------------------------------------------------


def test_pixel_error_map_zero():
    x = RNG.standard_normal((2, 3, 5, 7))
    assert np.allclose(pixel_error_map(x, x), 0.0)


def test_pixel_error_map_single_pixel():
    x = np.zeros((1, 3, 4, 4))
    xhat = x.copy()
    xhat[0, 1, 2, 3] = 3.0
    emap = pixel_error_map(xhat, x)
    assert emap.shape == (4, 4)
    assert emap[2, 3] == pytest.approx(1.0)  # mean over 3 antennas
    assert emap.sum() == pytest.approx(1.0)


def test_pixel_error_map_shape_contract():
    x = RNG.standard_normal((5, 2, 6, 9))
    assert pixel_error_map(x + 1.0, x).shape == (6, 9)


def test_supervised_path_fits_separable_toy():
    from csimask.evaluate import train_supervised
    from csimask.trainer import PretrainState, TrainConfig

    rng = make_rng(55)
    n = 40
    labels = np.arange(n) % 2
    amp = rng.standard_normal((n, 3, 6, 20)).astype(np.float32) * 0.05
    amp[labels == 0, :, :3] += 1.0
    amp[labels == 1, :, 3:] += 1.0
    pha = rng.standard_normal((n, 3, 6, 20)).astype(np.float32) * 0.05
    cfg = TrainConfig(epochs=1, batch_size=16, d_policy=32, bt_width=16, seed=0)
    state = PretrainState(cfg, 3, 6, 20)
    _, acc = train_supervised(state, amp, pha, labels, n_classes=2, steps=200, lr=1e-3)
    assert acc == 100.0
