"""Cross-modal redundancy reduction between the two latent streams.

Both modalities' latents (computed on unmasked input) pass through separate
3-layer projection heads, are batch-normalized per feature, and their
cross-correlation matrix is pushed toward the identity: the diagonal term
aligns corresponding dimensions, the off-diagonal term decorrelates the
rest. No negative samples are involved.
"""

from __future__ import annotations

import numpy as np

from .core.errors import DimensionError
from .core.functional import batch_norm_features
from .core.init import fan_in_uniform
from .core.tensor import Parameter, Tensor, as_tensor, matmul, relu, square, transpose, tsum
from .core.functional import affine

DEFAULT_BT_LAMBDA = 0.005


class ProjectionHead:
    """3-layer MLP, 256 -> width -> width -> width, ReLU between layers."""

    def __init__(self, in_dim: int, width: int, rng: np.random.Generator,
                 dtype=np.float32, prefix: str = "bt_head"):
        self.width = width
        dims = [(in_dim, width), (width, width), (width, width)]
        self.layers = []
        for i, (din, dout) in enumerate(dims, start=1):
            w = Parameter(fan_in_uniform((dout, din), din, rng, dtype), f"{prefix}.fc{i}.weight")
            b = Parameter(np.zeros(dout, dtype=dtype), f"{prefix}.fc{i}.bias")
            self.layers.append((w, b))

    def parameters(self) -> list[Parameter]:
        return [p for w, b in self.layers for p in (w, b)]

    def __call__(self, z: Tensor) -> Tensor:
        h = as_tensor(z)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = affine(h, w, b)
            if i != last:
                h = relu(h)
        return h


def project_and_normalize(
    z_amp: Tensor, z_phase: Tensor, head_amp: ProjectionHead, head_phase: ProjectionHead
) -> tuple[Tensor, Tensor]:
    """Project both latents and standardize each feature over the batch."""
    if z_amp.data.shape[0] < 2:
        raise DimensionError("cross-modal alignment requires a batch of at least 2")
    return (
        batch_norm_features(head_amp(z_amp)),
        batch_norm_features(head_phase(z_phase)),
    )


def cross_correlation(p_amp: Tensor, p_phase: Tensor) -> Tensor:
    """C[i, j] = (1/B) sum_b p_amp[b, i] * p_phase[b, j]."""
    p_amp, p_phase = as_tensor(p_amp), as_tensor(p_phase)
    if p_amp.data.shape != p_phase.data.shape:
        raise DimensionError("projected batches must share a shape")
    batch = p_amp.data.shape[0]
    return matmul(transpose(p_amp, (1, 0)), p_phase) * (1.0 / batch)


def bt_loss(corr: Tensor, lam: float = DEFAULT_BT_LAMBDA) -> Tensor:
    """sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2."""
    corr = as_tensor(corr)
    w = corr.data.shape[0]
    if corr.ndim != 2 or corr.data.shape[1] != w:
        raise DimensionError("correlation matrix must be square")
    eye = np.eye(w, dtype=corr.data.dtype)
    invariance = tsum(square((1.0 - corr) * Tensor(eye)))
    redundancy = tsum(square(corr * Tensor(1.0 - eye)))
    return invariance + redundancy * float(lam)
