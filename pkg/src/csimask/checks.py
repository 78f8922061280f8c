"""Finite-difference verification suite over every differentiable primitive
and each composite loss. Used by the command-line ``grad-check`` entry and
by the acceptance tests; everything runs in double precision on small
random instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .alignment import ProjectionHead, bt_loss, cross_correlation, project_and_normalize
from .backbone import masked_recon_loss
from .core.functional import (
    AttentionBlockParams,
    affine,
    attention_block,
    batch_norm_features,
    conv2d,
    deconv2d,
    layer_norm,
    softmax,
)
from .core.gradcheck import finite_difference_check
from .core.init import make_rng
from .core.tensor import Tensor, relu, stop_gradient, tabs, tmean, tsum
from .masking import MaskPartition, PatchGrid, aim_loss, gumbel_topk_partition

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = GRAD_TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _probe(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def _const(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def run_gradient_checks(seed: int = 0, instances: int = 3) -> list[CheckResult]:
    """All primitive and composite-loss checks, ``instances`` random repeats each."""
    results: list[CheckResult] = []

    def record(name, fn):
        worst = 0.0
        for rep in range(instances):
            worst = max(worst, fn(make_rng(seed, 900 + rep, abs(hash(name)) % 2**31)))
        results.append(CheckResult(name, worst))

    def check_affine(rng):
        x, w, b = _probe(rng, 3, 4), _probe(rng, 5, 4), _probe(rng, 5)
        proj = _const(rng, 3, 5)
        return finite_difference_check(
            lambda x, w, b: tsum(affine(x, w, b) * proj), [x, w, b]
        )

    def check_conv(rng):
        x, w, b = _probe(rng, 2, 2, 4, 4), _probe(rng, 3, 2, 2, 2), _probe(rng, 3)
        proj = _const(rng, 2, 3, 3, 3)
        return finite_difference_check(
            lambda x, w, b: tsum(conv2d(x, w, b, (1, 1)) * proj), [x, w, b]
        )

    def check_conv_strided(rng):
        x, w, b = _probe(rng, 1, 2, 6, 6), _probe(rng, 2, 2, 2, 3), _probe(rng, 2)
        proj = _const(rng, 1, 2, 3, 2)
        return finite_difference_check(
            lambda x, w, b: tsum(conv2d(x, w, b, (2, 3)) * proj), [x, w, b]
        )

    def check_deconv(rng):
        x, w, b = _probe(rng, 2, 3, 2, 3), _probe(rng, 3, 2, 2, 2), _probe(rng, 2)
        proj = _const(rng, 2, 2, 4, 6)
        return finite_difference_check(
            lambda x, w, b: tsum(deconv2d(x, w, b, (2, 2)) * proj), [x, w, b]
        )

    def check_relu(rng):
        x = _probe(rng, 4, 4)
        proj = _const(rng, 4, 4)
        return finite_difference_check(lambda x: tsum(relu(x) * proj), [x])

    def check_softmax(rng):
        x = _probe(rng, 7)
        proj = _const(rng, 7)
        return finite_difference_check(lambda x: tsum(softmax(x) * proj), [x])

    def check_batch_norm(rng):
        x = _probe(rng, 5, 3)
        proj = _const(rng, 5, 3)
        return finite_difference_check(lambda x: tsum(batch_norm_features(x) * proj), [x])

    def check_layer_norm(rng):
        x, g, b = _probe(rng, 3, 6), _probe(rng, 6), _probe(rng, 6)
        proj = _const(rng, 3, 6)
        return finite_difference_check(
            lambda x, g, b: tsum(layer_norm(x, g, b) * proj), [x, g, b]
        )

    def check_attention(rng):
        params = AttentionBlockParams.create(4, 2, rng, dtype=np.float64, prefix="chk")
        tokens = _probe(rng, 3, 4)
        proj = _const(rng, 3, 4)
        fn = lambda *args: tsum(attention_block(args[0], params) * proj)
        worst = finite_difference_check(fn, [tokens])
        for p in params.parameters():
            worst = max(worst, finite_difference_check(lambda *a: fn(tokens), [p]))
        return worst

    def check_stop_gradient(rng):
        # Not an FD check: the op's contract is an exactly-zero pullback.
        # sum(stopgrad(x)) must give a zero gradient; x * stopgrad(x) must
        # give exactly the frozen factor.
        x = _probe(rng, 5)
        tsum(stop_gradient(x)).backward()
        zero_err = 0.0 if x.grad is None else float(np.abs(x.grad).max())
        x.grad = None
        tsum(x * stop_gradient(x)).backward()
        frozen_err = float(np.abs(x.grad - x.data).max())
        return max(zero_err, frozen_err)

    def check_masking_loss(rng):
        # visibility probs through softmax, masked-set log-prob * reward
        grid = PatchGrid(1, 1, 2, 3)
        logits = _probe(rng, grid.n_patches)
        part = gumbel_topk_partition(
            np.full(grid.n_patches, 1.0 / grid.n_patches), 0.5, grid, deterministic=True
        )
        rewards = np.abs(rng.standard_normal(part.masked.size))
        return finite_difference_check(
            lambda lg: aim_loss(softmax(lg), part, rewards), [logits]
        )

    def check_masked_recon(rng):
        xhat = _probe(rng, 2, 2, 2, 4)
        x = rng.standard_normal((2, 2, 2, 4))
        masks = (rng.random((2, 2, 4)) > 0.5).astype(np.float64)
        masks[:, 0, 0] = 0.0  # keep the masked set non-empty
        return finite_difference_check(
            lambda xh: masked_recon_loss(xh, x, masks, kind="mae"), [xhat]
        )

    def check_bt(rng):
        za, zp = _probe(rng, 4, 3), _probe(rng, 4, 3)
        head_a = ProjectionHead(3, 4, rng, dtype=np.float64, prefix="bta")
        head_p = ProjectionHead(3, 4, rng, dtype=np.float64, prefix="btp")

        def fn(za, zp):
            pa, pp = project_and_normalize(za, zp, head_a, head_p)
            return bt_loss(cross_correlation(pa, pp), 0.005)

        worst = finite_difference_check(fn, [za, zp])
        worst = max(
            worst, finite_difference_check(lambda w: fn(za, zp), [head_a.layers[0][0]])
        )
        return worst

    record("affine", check_affine)
    record("conv2d", check_conv)
    record("conv2d-strided", check_conv_strided)
    record("deconv2d", check_deconv)
    record("relu", check_relu)
    record("softmax", check_softmax)
    record("batch-norm-features", check_batch_norm)
    record("layer-norm", check_layer_norm)
    record("attention-block", check_attention)
    record("stop-gradient", check_stop_gradient)
    record("masking-policy-loss", check_masking_loss)
    record("masked-reconstruction-loss", check_masked_recon)
    record("cross-modal-alignment-loss", check_bt)
    return results
