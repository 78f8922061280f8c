"""Patch grid, policy network, Gumbel-TopK partitioning, rewards, policy loss."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csimask.core import ConfigError, Parameter, Tensor, finite_difference_check, make_rng, softmax
from csimask.masking import (
    MaskingPolicy,
    PatchGrid,
    aim_loss,
    aim_loss_batch,
    apply_mask,
    gumbel_topk_partition,
    patch_tokens,
    per_patch_error,
    policy_probs,
    round_half_up,
    sample_partitions,
)

RNG = make_rng(29)
GRID = PatchGrid(3, 5, 30, 200)


def make_policy(embed=128, d=64, seed=1):
    return MaskingPolicy(embed, d_policy=d, heads=1, rng=make_rng(seed), dtype=np.float64)


# ---- grid ---------------------------------------------------------------------


def test_grid_patch_count():
    assert GRID.n_patches == 400
    assert (GRID.rows, GRID.cols) == (10, 40)


def test_grid_rejects_non_divisible():
    with pytest.raises(ConfigError):
        PatchGrid(4, 5, 30, 200)


def test_grid_row_major_bijection():
    cells = [GRID.patch_cell(i) for i in range(GRID.n_patches)]
    assert cells[0] == (0, 0)
    assert cells[1] == (0, 1)
    assert cells[GRID.cols] == (1, 0)
    assert len(set(cells)) == GRID.n_patches


# ---- patch tokens ----------------------------------------------------------------


def conv1_params(seed=0, n=3, cout=128):
    rng = make_rng(seed)
    w = Parameter(rng.standard_normal((cout, n, 3, 5)) * 0.05, "enc.conv1.weight")
    b = Parameter(np.zeros(cout), "enc.conv1.bias")
    return w, b


def test_patch_tokens_shape():
    policy = make_policy(d=256)
    w, b = conv1_params()
    x = RNG.standard_normal((2, 3, 30, 200))
    tokens = patch_tokens(x, w, b, (3, 5), GRID, policy)
    assert tokens.data.shape == (2, 400, 256)


def test_patch_tokens_zero_input_constant():
    policy = make_policy()
    w, b = conv1_params()
    tokens = patch_tokens(np.zeros((1, 3, 30, 200)), w, b, (3, 5), GRID, policy)
    first = tokens.data[0, 0]
    assert np.allclose(tokens.data[0], first[None, :])


def test_patch_tokens_detached_from_backbone():
    policy = make_policy()
    w, b = conv1_params()
    x = RNG.standard_normal((1, 3, 30, 200))
    tokens = patch_tokens(x, w, b, (3, 5), GRID, policy)
    probs = policy_probs(tokens, policy)
    (probs * Tensor(RNG.standard_normal(probs.data.shape))).sum().backward()
    assert w.grad is None and b.grad is None
    assert policy.proj_weight.grad is not None


def test_patch_tokens_requires_matching_kernel():
    policy = make_policy()
    w, b = conv1_params()
    with pytest.raises(ConfigError):
        patch_tokens(np.zeros((1, 3, 30, 200)), w, b, (1, 1), GRID, policy)


# ---- policy probabilities -----------------------------------------------------------


def test_policy_probs_sum_to_one():
    policy = make_policy()
    tokens = policy.project(Tensor(RNG.standard_normal((3, 400, 128))))
    probs = policy_probs(tokens, policy)
    assert probs.data.shape == (3, 400)
    assert np.abs(probs.data.sum(axis=1) - 1.0).max() <= 1e-9
    assert (probs.data > 0).all()


def test_policy_probs_identical_tokens_uniform():
    policy = make_policy()
    tok = policy.project(Tensor(np.tile(RNG.standard_normal((1, 1, 128)), (1, 50, 1))))
    probs = policy_probs(tok, policy)
    assert np.allclose(probs.data, 1.0 / 50, atol=1e-12)


def test_policy_probs_permutation_equivariant():
    policy = make_policy()
    base = RNG.standard_normal((1, 40, 128))
    perm = make_rng(9).permutation(40)
    p1 = policy_probs(policy.project(Tensor(base)), policy).data[0]
    p2 = policy_probs(policy.project(Tensor(base[:, perm])), policy).data[0]
    assert np.allclose(p1[perm], p2, atol=1e-12)


# ---- partitioning --------------------------------------------------------------------


def test_round_half_up():
    assert round_half_up(379.5) == 380
    assert round_half_up(380.0) == 380
    assert round_half_up(0.4) == 0


def test_partition_sizes_at_defaults():
    p = np.full(400, 1.0 / 400)
    part = gumbel_topk_partition(p, 0.95, GRID, rng=make_rng(0))
    assert part.masked.size == 380 and part.visible.size == 20


def test_partition_disjoint_cover_many_draws():
    p = softmax(Tensor(RNG.standard_normal(400))).data
    rng = make_rng(123)
    for _ in range(50):
        part = gumbel_topk_partition(p, 0.95, GRID, rng=rng)
        union = np.sort(np.concatenate([part.visible, part.masked]))
        assert np.array_equal(union, np.arange(400))
        assert np.intersect1d(part.visible, part.masked).size == 0
        assert part.masked.size == 380


def test_partition_deterministic_topk():
    grid = PatchGrid(1, 1, 2, 2)
    part = gumbel_topk_partition(np.array([0.1, 0.2, 0.3, 0.4]), 0.5, grid, deterministic=True)
    assert part.visible.tolist() == [3, 2]
    assert part.masked.tolist() == [0, 1]


def test_partition_tie_break_ascending():
    grid = PatchGrid(1, 1, 2, 2)
    part = gumbel_topk_partition(np.array([0.25, 0.25, 0.25, 0.25]), 0.5, grid, deterministic=True)
    assert part.visible.tolist() == [0, 1]


def test_partition_seeded_reproducible():
    p = softmax(Tensor(RNG.standard_normal(400))).data
    a = gumbel_topk_partition(p, 0.95, GRID, rng=make_rng(77))
    b = gumbel_topk_partition(p, 0.95, GRID, rng=make_rng(77))
    assert np.array_equal(a.visible, b.visible)
    assert np.array_equal(a.pixel_mask, b.pixel_mask)


def test_partition_rejects_all_masked():
    grid = PatchGrid(1, 1, 2, 2)
    with pytest.raises(ConfigError):
        gumbel_topk_partition(np.full(4, 0.25), 0.99, grid, deterministic=True)


def test_partition_pixel_mask_matches_visible_set():
    p = np.full(400, 1.0 / 400)
    part = gumbel_topk_partition(p, 0.95, GRID, rng=make_rng(5))
    expect = np.zeros((30, 200), dtype=np.float32)
    for idx in part.visible:
        r, c = GRID.patch_cell(idx)
        expect[r * 3 : r * 3 + 3, c * 5 : c * 5 + 5] = 1.0
    assert np.array_equal(part.pixel_mask, expect)


def test_gumbel_top1_marginal_matches_categorical():
    # top-1 Gumbel perturbation is exact categorical sampling
    grid = PatchGrid(1, 1, 2, 2)
    p = np.array([0.7, 0.1, 0.1, 0.1])
    rng = make_rng(2024)
    hits = 0
    draws = 10_000
    for _ in range(draws):
        part = gumbel_topk_partition(p, 0.75, grid, rng=rng)
        hits += part.visible[0] == 0
    assert abs(hits / draws - 0.7) <= 0.02


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_partition_invariants_property(seed, rho):
    grid = PatchGrid(1, 1, 4, 5)
    p = softmax(Tensor(make_rng(seed).standard_normal(20))).data
    part = gumbel_topk_partition(p, rho, grid, rng=make_rng(seed, 1))
    assert part.masked.size == round_half_up(rho * 20)
    union = np.sort(np.concatenate([part.visible, part.masked]))
    assert np.array_equal(union, np.arange(20))


# ---- mask application and rewards ------------------------------------------------------


def test_apply_mask_all_ones_identity():
    x = RNG.standard_normal((3, 30, 200))
    assert np.array_equal(apply_mask(x, np.ones((30, 200))), x)


def test_apply_mask_all_zeros():
    x = RNG.standard_normal((3, 30, 200))
    assert np.all(apply_mask(x, np.zeros((30, 200))) == 0.0)


def test_apply_mask_zero_count_at_defaults():
    x = np.ones((3, 30, 200))
    p = np.full(400, 1.0 / 400)
    part = gumbel_topk_partition(p, 0.95, GRID, rng=make_rng(8))
    masked = apply_mask(x, part.pixel_mask)
    zeros_per_antenna = np.count_nonzero(masked[0] == 0.0)
    assert zeros_per_antenna == 380 * 3 * 5  # 5700 of 6000 pixels


def test_per_patch_error_constant():
    part = gumbel_topk_partition(np.full(400, 1.0 / 400), 0.95, GRID, rng=make_rng(1))
    errs = per_patch_error(np.full((3, 30, 200), 0.37), GRID, part)
    assert errs.shape == (380,)
    assert np.allclose(errs, 0.37)


def test_per_patch_error_toy_mean():
    grid = PatchGrid(1, 2, 1, 4)  # two patches of 1x2 pixels
    part = gumbel_topk_partition(np.array([0.9, 0.1]), 0.5, grid, deterministic=True)
    assert part.masked.tolist() == [1]
    abs_err = np.array([[[0.0, 0.0, 1.0, 3.0]]])
    errs = per_patch_error(abs_err, grid, part)
    assert np.allclose(errs, [2.0])


# ---- policy loss -------------------------------------------------------------------------


def test_aim_loss_uniform_oracle():
    # p uniform 0.25 over L=4, M={2,3}, E={2,4}: -(1/2) ln(1/4) (2+4) = 4.158883
    grid = PatchGrid(1, 1, 2, 2)
    part = gumbel_topk_partition(np.array([0.3, 0.3, 0.2, 0.2]), 0.5, grid, deterministic=True)
    assert part.masked.tolist() == [2, 3]
    p = Tensor(np.full(4, 0.25), requires_grad=True)
    loss = aim_loss(p, part, np.array([2.0, 4.0]))
    assert abs(loss.item() - (-0.5 * np.log(0.25) * 6.0)) < 1e-12
    assert abs(loss.item() - 4.15888) < 1e-5


def test_aim_loss_zero_rewards():
    grid = PatchGrid(1, 1, 2, 2)
    part = gumbel_topk_partition(np.full(4, 0.25), 0.5, grid, deterministic=True)
    p = Tensor(np.full(4, 0.25), requires_grad=True)
    loss = aim_loss(p, part, np.zeros(2))
    loss.backward()
    assert loss.item() == 0.0
    assert np.all(p.grad == 0.0)


def test_aim_loss_gradient_pushes_high_error_patches_up():
    # raising E_j for a masked patch must push its visibility logit upward
    grid = PatchGrid(1, 1, 2, 2)
    logits = Tensor(np.zeros(4), requires_grad=True)
    part = gumbel_topk_partition(np.array([0.4, 0.3, 0.2, 0.1]), 0.5, grid, deterministic=True)
    j = part.masked[0]

    def loss_for(e_j):
        rewards = np.array([e_j, 1.0])
        logits.grad = None
        loss = aim_loss(softmax(logits), part, rewards)
        loss.backward()
        return logits.grad[j]

    g_small, g_big = loss_for(1.0), loss_for(5.0)
    assert g_big < g_small < 0  # more negative: gradient descent raises p_j


def test_aim_loss_fd_through_softmax():
    grid = PatchGrid(1, 1, 2, 3)
    logits = Tensor(RNG.standard_normal(6), requires_grad=True)
    part = gumbel_topk_partition(np.full(6, 1 / 6), 0.5, grid, rng=make_rng(3))
    rewards = np.abs(RNG.standard_normal(part.masked.size)) + 0.1
    err = finite_difference_check(lambda lg: aim_loss(softmax(lg), part, rewards), [logits])
    assert err < 1e-6


def test_aim_loss_batch_matches_mean_of_singles():
    grid = PatchGrid(1, 1, 2, 3)
    p = softmax(Tensor(RNG.standard_normal((4, 6))), axis=-1)
    parts = sample_partitions(p.data, 0.5, grid, make_rng(10))
    rewards = [np.abs(RNG.standard_normal(3)) for _ in range(4)]
    batch = aim_loss_batch(p, parts, rewards).item()
    singles = [
        aim_loss(Tensor(p.data[i]), parts[i], rewards[i]).item() for i in range(4)
    ]
    assert abs(batch - np.mean(singles)) < 1e-12
