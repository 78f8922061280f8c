"""Projection heads, cross-correlation, and the identity-target loss."""

import numpy as np
import pytest

from csimask.alignment import (
    ProjectionHead,
    bt_loss,
    cross_correlation,
    project_and_normalize,
)
from csimask.core import AdamW, DimensionError, Parameter, Tensor, make_rng

RNG = make_rng(61)


def heads(width=1024, in_dim=256, seed=2, dtype=np.float64):
    return (
        ProjectionHead(in_dim, width, make_rng(seed), dtype=dtype, prefix="a"),
        ProjectionHead(in_dim, width, make_rng(seed, 1), dtype=dtype, prefix="p"),
    )


def test_projection_default_width():
    ha, hp = heads()
    za = Tensor(RNG.standard_normal((4, 256)))
    pa, pp = project_and_normalize(za, za, ha, hp)
    assert pa.data.shape == (4, 1024) and pp.data.shape == (4, 1024)


def test_projection_outputs_standardized():
    ha, hp = heads(width=32)
    # scale well clear of the 1e-5 variance guard (non-degenerate columns)
    za = Tensor(RNG.standard_normal((16, 256)) * 10.0)
    zp = Tensor(RNG.standard_normal((16, 256)) * 10.0)
    pa, pp = project_and_normalize(za, zp, ha, hp)
    for p in (pa, pp):
        assert np.abs(p.data.mean(axis=0)).max() < 1e-9
        assert np.abs(p.data.var(axis=0) - 1.0).max() < 1e-3
        assert p.data.var(axis=0).max() <= 1.0 + 1e-6


def test_identical_streams_identical_projections():
    ha, _ = heads(width=16)
    z = Tensor(RNG.standard_normal((8, 256)))
    pa, pp = project_and_normalize(z, z, ha, ha)
    assert np.array_equal(pa.data, pp.data)


def test_projection_requires_batch_of_two():
    ha, hp = heads(width=8)
    z = Tensor(RNG.standard_normal((1, 256)))
    with pytest.raises(DimensionError):
        project_and_normalize(z, z, ha, hp)


# ---- cross correlation -----------------------------------------------------------


def test_cross_correlation_perfect_alignment():
    p = Tensor(np.array([[1.0], [-1.0]]))
    corr = cross_correlation(p, p)
    assert np.allclose(corr.data, [[1.0]])


def test_cross_correlation_sign_flip():
    pa = Tensor(np.array([[1.0], [-1.0]]))
    corr = cross_correlation(pa, Tensor(-pa.data))
    assert np.allclose(corr.data, [[-1.0]])


def test_cross_correlation_orthogonal_columns():
    cols = np.array(
        [[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]
    )
    corr = cross_correlation(Tensor(cols), Tensor(cols))
    assert np.allclose(corr.data, np.eye(2))


def test_cross_correlation_entries_bounded_for_normalized_input():
    ha, hp = heads(width=24)
    za = Tensor(RNG.standard_normal((32, 256)))
    zp = Tensor(RNG.standard_normal((32, 256)))
    pa, pp = project_and_normalize(za, zp, ha, hp)
    corr = cross_correlation(pa, pp).data
    assert np.abs(corr).max() <= 1.0 + 1e-6


# ---- loss --------------------------------------------------------------------------


def test_bt_loss_identity_is_zero():
    assert bt_loss(Tensor(np.eye(5)), 0.005).item() == 0.0


def test_bt_loss_zero_matrix():
    assert bt_loss(Tensor(np.zeros((2, 2))), 123.0).item() == pytest.approx(2.0)


def test_bt_loss_offdiagonal_oracle():
    corr = Tensor(np.array([[1.0, 0.5], [0.5, 1.0]]))
    assert bt_loss(corr, 0.005).item() == pytest.approx(0.0025, abs=1e-15)


def test_bt_loss_nonnegative_and_zero_only_at_identity():
    rng = make_rng(3)
    for _ in range(10):
        c = rng.standard_normal((4, 4))
        value = bt_loss(Tensor(c), 0.01).item()
        assert value >= 0.0
        if not np.allclose(c, np.eye(4)):
            assert value > 0.0


def test_bt_loss_gradient_closed_form():
    # d/dC_ii = -2(1 - C_ii); d/dC_ij = 2 lambda C_ij
    lam = 0.37
    c = Tensor(RNG.standard_normal((3, 3)), requires_grad=True)
    bt_loss(c, lam).backward()
    expect = np.where(
        np.eye(3, dtype=bool), -2.0 * (1.0 - c.data), 2.0 * lam * c.data
    )
    assert np.allclose(c.grad, expect, atol=1e-12)


def test_bt_loss_gradient_matches_finite_differences():
    from csimask.core import finite_difference_check

    c = Tensor(RNG.standard_normal((3, 3)), requires_grad=True)
    err = finite_difference_check(lambda c: bt_loss(c, 0.005), [c])
    assert err < 1e-6


def test_bt_path_gives_decoder_zero_gradient():
    from csimask.trainer import PretrainState, TrainConfig

    cfg = TrainConfig(epochs=1, batch_size=8, d_policy=32, bt_width=16, seed=0)
    state = PretrainState(cfg, 3, 6, 20)
    za = state.encoders["amplitude"](Tensor(RNG.standard_normal((4, 3, 6, 20)).astype(np.float32)))
    zp = state.encoders["phase"](Tensor(RNG.standard_normal((4, 3, 6, 20)).astype(np.float32)))
    pa, pp = project_and_normalize(za, zp, state.heads["amplitude"], state.heads["phase"])
    bt_loss(cross_correlation(pa, pp), 0.005).backward()
    for dec in state.decoders.values():
        for p in dec.parameters():
            assert p.grad is None
    assert any(p.grad is not None for p in state.encoders["amplitude"].parameters())


def test_bt_training_aligns_toy_two_stream_model():
    # two linear maps of a shared latent; training on the alignment loss alone
    # drives the correlation diagonal toward 1
    rng = make_rng(8)
    w_a = Parameter(rng.standard_normal((6, 6)) * 0.3, "wa")
    w_p = Parameter(rng.standard_normal((6, 6)) * 0.3, "wp")
    opt = AdamW([w_a, w_p], lr=5e-3, weight_decay=0.0)
    shared = rng.standard_normal((256, 6))
    view_a = shared + 0.05 * rng.standard_normal((256, 6))
    view_p = shared + 0.05 * rng.standard_normal((256, 6))
    from csimask.core.functional import batch_norm_features
    from csimask.core.tensor import matmul

    diag_mean = 0.0
    for _ in range(500):
        pa = batch_norm_features(matmul(Tensor(view_a), w_a.T))
        pp = batch_norm_features(matmul(Tensor(view_p), w_p.T))
        corr = cross_correlation(pa, pp)
        loss = bt_loss(corr, 0.01)
        opt.zero_grad()
        loss.backward()
        opt.step()
        diag_mean = float(np.diag(corr.data).mean())
    assert diag_mean > 0.99
