"""Symmetric convolutional encoder-decoder and the masked reconstruction loss.

Encoder: three valid strided convolutions, then a linear map to the latent.
    (N, S, T) -> (128, S/3, T/5) -> (256, S/6, T/10) -> (512, S/6, T/20) -> 256
Decoder mirrors it back to (N, S, T). Kernel sizes equal strides, so each
stage tiles its input exactly; shapes that do not divide are rejected when
the model is built. ReLU follows every hidden stage; the latent map and the
reconstruction output stay linear so both can reach negative (z-scored)
values.
"""

from __future__ import annotations

import numpy as np

from .core.errors import ConfigError, DimensionError
from .core.functional import affine, conv2d, deconv2d
from .core.init import fan_in_uniform
from .core.tensor import Parameter, Tensor, as_tensor, relu, square, tabs, tmean

# Stage widths and the later-stage kernels are fixed; the first kernel and
# stride equal the masking patch size so stage-1 activations double as patch
# embeddings (default patch (3, 5) on the 30 x 200 plane).
STAGE_WIDTHS = (128, 256, 512)
LATER_KERNELS = ((2, 2), (1, 2))
DEFAULT_PATCH = (3, 5)
LATENT_DIM = 256


def encoder_plan(
    n_antennas: int, n_sub: int, n_time: int, patch: tuple[int, int] = DEFAULT_PATCH
) -> list[tuple]:
    """Per-stage (cin, cout, kernel) chain; raises if shapes do not divide."""
    plan = []
    cin, h, w = n_antennas, n_sub, n_time
    kernels = (tuple(patch),) + LATER_KERNELS
    for cout, (kh, kw) in zip(STAGE_WIDTHS, kernels):
        if h % kh or w % kw:
            raise ConfigError(
                f"stage kernel ({kh},{kw}) does not divide spatial dims ({h},{w})"
            )
        plan.append((cin, cout, (kh, kw), (h, w)))
        cin, h, w = cout, h // kh, w // kw
    plan.append((cin * h * w, LATENT_DIM, None, (h, w)))
    return plan


class Encoder:
    """Maps (B, N, S, T) to the (B, 256) latent."""

    def __init__(self, n_antennas: int, n_sub: int, n_time: int,
                 rng: np.random.Generator, dtype=np.float32, prefix: str = "encoder",
                 patch: tuple[int, int] = DEFAULT_PATCH):
        self.n_antennas, self.n_sub, self.n_time = n_antennas, n_sub, n_time
        plan = encoder_plan(n_antennas, n_sub, n_time, patch)
        self.convs = []
        for i, (cin, cout, kernel, _) in enumerate(plan[:-1], start=1):
            kh, kw = kernel
            w = Parameter(
                fan_in_uniform((cout, cin, kh, kw), cin * kh * kw, rng, dtype),
                f"{prefix}.conv{i}.weight",
            )
            b = Parameter(np.zeros(cout, dtype=dtype), f"{prefix}.conv{i}.bias")
            self.convs.append((w, b, kernel))
        flat, latent, _, self.bottom_hw = plan[-1]
        self.flat_dim = flat
        self.fc_weight = Parameter(
            fan_in_uniform((latent, flat), flat, rng, dtype), f"{prefix}.fc.weight"
        )
        self.fc_bias = Parameter(np.zeros(latent, dtype=dtype), f"{prefix}.fc.bias")

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b, _ in self.convs:
            out += [w, b]
        return out + [self.fc_weight, self.fc_bias]

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 4 or x.data.shape[1] != self.n_antennas:
            raise DimensionError(
                f"encoder expects (B,{self.n_antennas},{self.n_sub},{self.n_time})"
            )
        h = x
        for w, b, kernel in self.convs:
            h = relu(conv2d(h, w, b, kernel))
        return affine(h.reshape((h.data.shape[0], self.flat_dim)), self.fc_weight, self.fc_bias)

    def stage_shapes(self) -> list[tuple]:
        """Intermediate (C, H, W) after each conv; used by shape-chain checks."""
        shapes = []
        h, w = self.n_sub, self.n_time
        for weight, _, (kh, kw) in self.convs:
            h, w = h // kh, w // kw
            shapes.append((weight.data.shape[0], h, w))
        return shapes


class Decoder:
    """Maps the (B, 256) latent back to (B, N, S, T)."""

    def __init__(self, n_antennas: int, n_sub: int, n_time: int,
                 rng: np.random.Generator, dtype=np.float32, prefix: str = "decoder",
                 patch: tuple[int, int] = DEFAULT_PATCH):
        self.n_antennas, self.n_sub, self.n_time = n_antennas, n_sub, n_time
        plan = encoder_plan(n_antennas, n_sub, n_time, patch)
        flat, latent, _, (bh, bw) = plan[-1]
        self.bottom = (plan[-2][1], bh, bw)
        self.fc_weight = Parameter(
            fan_in_uniform((flat, latent), latent, rng, dtype), f"{prefix}.fc.weight"
        )
        self.fc_bias = Parameter(np.zeros(flat, dtype=dtype), f"{prefix}.fc.bias")
        self.deconvs = []
        stages = list(reversed(plan[:-1]))  # widest stage first on the way up
        for i, (cin, cout, kernel, _) in enumerate(stages, start=1):
            kh, kw = kernel
            # transposed conv weight layout: (in channels, out channels, kh, kw)
            w = Parameter(
                fan_in_uniform((cout, cin, kh, kw), cout * kh * kw, rng, dtype),
                f"{prefix}.deconv{i}.weight",
            )
            b = Parameter(np.zeros(cin, dtype=dtype), f"{prefix}.deconv{i}.bias")
            self.deconvs.append((w, b, kernel))

    def parameters(self) -> list[Parameter]:
        out = [self.fc_weight, self.fc_bias]
        for w, b, _ in self.deconvs:
            out += [w, b]
        return out

    def __call__(self, z: Tensor) -> Tensor:
        z = as_tensor(z)
        if z.ndim != 2 or z.data.shape[1] != LATENT_DIM:
            raise DimensionError(f"decoder expects (B, {LATENT_DIM}) latents")
        h = relu(affine(z, self.fc_weight, self.fc_bias))
        h = h.reshape((z.data.shape[0],) + self.bottom)
        last = len(self.deconvs) - 1
        for i, (w, b, kernel) in enumerate(self.deconvs):
            h = deconv2d(h, w, b, kernel)
            if i != last:
                h = relu(h)
        return h


def masked_recon_loss(
    xhat: Tensor,
    x: np.ndarray,
    pixel_masks: np.ndarray,
    kind: str = "mae",
    normalized_target: bool = False,
    eps: float = 1e-6,
) -> Tensor:
    """Reconstruction loss over masked pixels only.

    xhat: (B, N, S, T) prediction; x: same-shape target; pixel_masks:
    (B, S, T) with 1 on visible pixels. ``kind`` selects the absolute-error
    (default) or squared-error penalty; ``normalized_target`` standardizes
    the target per sample at loss time (the rejected design variant, kept
    for comparison runs).
    """
    xhat = as_tensor(xhat)
    x = np.asarray(x, dtype=xhat.data.dtype)
    pixel_masks = np.asarray(pixel_masks)
    if x.shape != xhat.data.shape:
        raise DimensionError("prediction/target shapes differ")
    if pixel_masks.shape != (x.shape[0],) + x.shape[2:]:
        raise DimensionError("pixel masks must be (B, S, T)")
    masked = (1.0 - pixel_masks)[:, None, :, :].astype(xhat.data.dtype)
    count = float(masked.sum() * x.shape[1])
    if count < 1:
        raise DimensionError("empty masked set: the loss is undefined")
    if normalized_target:
        mu = x.mean(axis=(1, 2, 3), keepdims=True)
        sd = x.std(axis=(1, 2, 3), keepdims=True)
        x = (x - mu) / (sd + eps)
    diff = xhat - Tensor(x)
    penalty = tabs(diff) if kind == "mae" else square(diff)
    if kind not in ("mae", "mse"):
        raise ConfigError(f"unknown loss kind {kind!r}")
    return (penalty * Tensor(masked)).sum() * (1.0 / count)


def masked_mae_loss(xhat: Tensor, x: np.ndarray, pixel_masks: np.ndarray) -> Tensor:
    """Mean absolute error over masked pixels (the default objective)."""
    return masked_recon_loss(xhat, x, pixel_masks, kind="mae")


def pixel_error_map(xhat, x) -> np.ndarray:
    """Absolute error averaged over batch and antennas; shape (S, T)."""
    a = xhat.data if isinstance(xhat, Tensor) else np.asarray(xhat)
    b = x.data if isinstance(x, Tensor) else np.asarray(x)
    if a.shape != b.shape:
        raise DimensionError("pixel_error_map: shapes differ")
    err = np.abs(a - b)
    if err.ndim == 4:
        return err.mean(axis=(0, 1))
    if err.ndim == 3:
        return err.mean(axis=0)
    raise DimensionError("expected (B,N,S,T) or (N,S,T)")
