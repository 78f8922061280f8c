"""Adaptive information-guided masking.

A lightweight per-modality policy scores every patch of the subcarrier-time
plane with a visibility probability. Patch embeddings are taken from the
encoder's first convolution run on the full input (kernel and stride equal
the patch size), detached from the backbone graph, projected by a policy
linear layer, passed through one attention block and softmax-normalized
over patches. Partitions are sampled with Gumbel-TopK; the policy is
trained to spend the small visibility budget on patches that are hard to
reconstruct, via a score-function loss on the masked patches' errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core.errors import ConfigError, DimensionError
from .core.functional import AttentionBlockParams, affine, attention_block, softmax
from .core.init import fan_in_uniform
from .core.tensor import Parameter, Tensor, as_tensor, no_grad, take_along, tmean, tsum


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class PatchGrid:
    """Row-major partition of the (S, T) plane into (s_p, t_p) patches."""

    s_p: int
    t_p: int
    n_subcarriers: int
    n_timesteps: int

    def __post_init__(self):
        if self.n_subcarriers % self.s_p or self.n_timesteps % self.t_p:
            raise ConfigError(
                f"patch ({self.s_p},{self.t_p}) does not divide plane "
                f"({self.n_subcarriers},{self.n_timesteps})"
            )

    @property
    def rows(self) -> int:
        return self.n_subcarriers // self.s_p

    @property
    def cols(self) -> int:
        return self.n_timesteps // self.t_p

    @property
    def n_patches(self) -> int:
        return self.rows * self.cols

    def patch_cell(self, index: int) -> tuple[int, int]:
        return divmod(int(index), self.cols)


@dataclass
class MaskPartition:
    """Visible/masked split of patch indices plus the pixel-level mask."""

    visible: np.ndarray  # indices, selection order
    masked: np.ndarray  # indices, ascending
    pixel_mask: np.ndarray  # (S, T) float32 in {0,1}; 1 on visible patches

    def to_text_grid(self) -> str:
        rows = ["".join(str(int(v)) for v in row) for row in self.pixel_mask.astype(int)]
        return "\n".join(rows)


class MaskingPolicy:
    """Visibility-probability network for one modality."""

    def __init__(
        self,
        embed_dim: int,
        d_policy: int = 256,
        heads: int = 1,
        mlp_hidden: int | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        prefix: str = "policy",
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.embed_dim = embed_dim
        self.d_policy = d_policy
        self.proj_weight = Parameter(
            fan_in_uniform((d_policy, embed_dim), embed_dim, rng, dtype), f"{prefix}.proj.weight"
        )
        self.proj_bias = Parameter(np.zeros(d_policy, dtype=dtype), f"{prefix}.proj.bias")
        self.block = AttentionBlockParams.create(
            d_policy, heads, rng, hidden=mlp_hidden, dtype=dtype, prefix=f"{prefix}.block"
        )
        self.score_weight = Parameter(
            fan_in_uniform((1, d_policy), d_policy, rng, dtype), f"{prefix}.score.weight"
        )

    def parameters(self) -> list[Parameter]:
        return [self.proj_weight, self.proj_bias, *self.block.parameters(), self.score_weight]

    def project(self, embeddings: Tensor) -> Tensor:
        """Policy-space tokens from detached patch embeddings."""
        return affine(embeddings, self.proj_weight, self.proj_bias)


def patch_tokens(x: np.ndarray, conv_weight, conv_bias, stride, grid: PatchGrid,
                 policy: MaskingPolicy) -> Tensor:
    """Tokenize the full (unmasked) input with the encoder's first conv.

    Returns (..., L, d_policy) tokens. The convolution output is detached, so
    the policy loss cannot reach backbone weights; the projection itself is
    policy-owned and stays differentiable.
    """
    kh, kw = conv_weight.data.shape[2], conv_weight.data.shape[3]
    if (kh, kw) != (grid.s_p, grid.t_p) or tuple(stride) != (grid.s_p, grid.t_p):
        raise ConfigError(
            f"first conv kernel/stride {(kh, kw)}/{tuple(stride)} must equal patch "
            f"({grid.s_p},{grid.t_p})"
        )
    from .core.functional import conv2d

    x = np.asarray(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    with no_grad():
        emb = conv2d(Tensor(x), conv_weight, conv_bias, tuple(stride))
    b, c = emb.data.shape[0], emb.data.shape[1]
    tokens = np.ascontiguousarray(emb.data.transpose(0, 2, 3, 1)).reshape(b, grid.n_patches, c)
    if squeeze:
        tokens = tokens[0]
    return policy.project(Tensor(tokens))


def policy_probs(tokens: Tensor, policy: MaskingPolicy) -> Tensor:
    """Visibility distribution over patches: attention, score, softmax."""
    hidden = attention_block(tokens, policy.block)
    logits = affine(hidden, policy.score_weight, None)
    logits = logits.reshape(logits.data.shape[:-1])
    return softmax(logits, axis=-1)


def gumbel_topk_partition(
    p: np.ndarray,
    rho: float,
    grid: PatchGrid,
    rng: np.random.Generator | None = None,
    deterministic: bool = False,
) -> MaskPartition:
    """Partition patches into visible/masked sets from visibility probs.

    Visible set: indices of the top-k values of log(p_i) + g_i with standard
    Gumbel noise g_i (omitted in deterministic mode, where ties break toward
    the lower index). k = L - round_half_up(rho * L).
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size != grid.n_patches:
        raise DimensionError(f"probability vector must have length L={grid.n_patches}")
    if not (0.0 < rho < 1.0):
        raise ConfigError("mask ratio must lie in (0, 1)")
    n_masked = round_half_up(rho * grid.n_patches)
    k_visible = grid.n_patches - n_masked
    if k_visible < 1:
        raise ConfigError(f"mask ratio {rho} leaves no visible patch")
    if deterministic:
        keys = p
    else:
        if rng is None:
            raise ConfigError("sampling mode requires an rng handle")
        u = np.clip(rng.random(grid.n_patches), 1e-12, 1.0 - 1e-12)
        keys = np.log(p) - np.log(-np.log(u))
    order = np.argsort(-keys, kind="stable")
    visible = order[:k_visible]
    masked = np.sort(order[k_visible:])
    patch_bits = np.zeros(grid.n_patches, dtype=np.float32)
    patch_bits[visible] = 1.0
    pixel = np.repeat(
        np.repeat(patch_bits.reshape(grid.rows, grid.cols), grid.s_p, axis=0), grid.t_p, axis=1
    )
    return MaskPartition(visible=visible, masked=masked, pixel_mask=pixel)


def sample_partitions(
    probs: np.ndarray,
    rho: float,
    grid: PatchGrid,
    rng: np.random.Generator,
    deterministic: bool = False,
) -> list[MaskPartition]:
    """One partition per row of a (B, L) probability matrix, sequential draws."""
    return [
        gumbel_topk_partition(row, rho, grid, rng=rng, deterministic=deterministic)
        for row in np.asarray(probs)
    ]


def apply_mask(x: np.ndarray, pixel_mask: np.ndarray) -> np.ndarray:
    """Zero out masked pixels; the mask broadcasts over the antenna axis."""
    x = np.asarray(x)
    pixel_mask = np.asarray(pixel_mask)
    if pixel_mask.shape != x.shape[-2:]:
        raise DimensionError(
            f"pixel mask {pixel_mask.shape} does not match plane {x.shape[-2:]}"
        )
    return x * pixel_mask.astype(x.dtype)


def per_patch_error(abs_err, grid: PatchGrid, partition: MaskPartition) -> np.ndarray:
    """Mean absolute error per masked patch, averaged over all antennas.

    The result is detached (plain numpy); rewards never carry gradients.
    """
    err = abs_err.data if isinstance(abs_err, Tensor) else np.asarray(abs_err)
    if err.ndim != 3:
        raise DimensionError("per_patch_error expects (antennas, S, T)")
    n = err.shape[0]
    per_patch = err.reshape(n, grid.rows, grid.s_p, grid.cols, grid.t_p).mean(axis=(0, 2, 4))
    return per_patch.reshape(-1)[partition.masked]


def aim_loss(p: Tensor, partition: MaskPartition, rewards: np.ndarray) -> Tensor:
    """-(1/|M|) sum over masked patches of log(p_i) * E_i.

    Rewards enter as constants (stop-gradient), so minimizing this loss
    raises the visibility probability of high-error patches and touches only
    policy parameters.
    """
    p = as_tensor(p)
    rewards = np.asarray(rewards, dtype=p.data.dtype)
    if rewards.shape[0] != partition.masked.shape[0]:
        raise DimensionError("one reward per masked patch required")
    from .core.tensor import log

    picked = take_along(log(p), partition.masked, axis=0)
    return -tmean(picked * Tensor(rewards))


def aim_loss_batch(p: Tensor, partitions: list[MaskPartition], rewards: list[np.ndarray]) -> Tensor:
    """Batch mean of the per-sample policy loss; p is (B, L)."""
    p = as_tensor(p)
    idx = np.stack([part.masked for part in partitions])
    rew = np.stack(rewards).astype(p.data.dtype)
    from .core.tensor import log

    picked = take_along(log(p), idx, axis=1)
    return -tmean(picked * Tensor(rew))
