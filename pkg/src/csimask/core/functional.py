"""Differentiable building blocks: convolutions, affine maps, normalizations,
softmax and the pre-norm attention block.

Convolutions are valid (unpadded) and strided; the backbone's kernel/stride
pairs divide their input dims exactly, and non-divisible shapes are rejected
at model construction. Forward passes are arranged as large GEMMs (im2col)
so float32 training stays fast on CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .tensor import Parameter, Tensor, _track, as_tensor, relu

LAYER_NORM_EPS = 1e-5
BATCH_NORM_EPS = 1e-5


# ---- affine ---------------------------------------------------------------


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x @ W^T + b over the last axis; leading axes are batch."""
    x, weight = as_tensor(x), as_tensor(weight)
    dout, din = weight.data.shape
    if x.data.shape[-1] != din:
        raise DimensionError(
            f"affine: input last dim {x.data.shape[-1]} != weight in-dim {din}"
        )
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, din)
    y2 = x2 @ weight.data.T
    if bias is not None:
        y2 = y2 + bias.data
    out = Tensor(y2.reshape(lead + (dout,)))

    def bw(g, x=x, weight=weight, bias=bias, x2=x2, lead=lead):
        g2 = g.reshape(-1, dout)
        if x.requires_grad:
            x._accumulate((g2 @ weight.data).reshape(lead + (din,)))
        if weight.requires_grad:
            weight._accumulate(g2.T @ x2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _track(out, parents, bw)


# ---- convolutions -----------------------------------------------------------


def _conv_cols(x: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    """im2col: (B,C,H,W) -> (B*Ho*Wo, C*kh*kw) plus the output spatial dims."""
    b, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: tuple[int, int]) -> Tensor:
    """Valid 2-D convolution.

    x: (B, Cin, H, W); weight: (Cout, Cin, kh, kw); output (B, Cout, Ho, Wo)
    with Ho = floor((H-kh)/sh)+1 and Wo = floor((W-kw)/sw)+1.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    b, cin, h, w = x.data.shape
    cout, wcin, kh, kw = weight.data.shape
    sh, sw = stride
    if cin != wcin:
        raise DimensionError(f"conv2d: input channels {cin} != weight channels {wcin}")
    if h < kh or w < kw:
        raise DimensionError(f"conv2d: spatial dims ({h},{w}) smaller than kernel ({kh},{kw})")
    if sh < 1 or sw < 1:
        raise DimensionError("conv2d: stride components must be >= 1")

    cols, ho, wo = _conv_cols(x.data, kh, kw, sh, sw)
    wf = weight.data.reshape(cout, -1)
    y2 = cols @ wf.T
    if bias is not None:
        y2 = y2 + bias.data
    out = Tensor(y2.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))

    def bw(g, x=x, weight=weight, bias=bias, cols=cols, wf=wf):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if weight.requires_grad:
            weight._accumulate((g2.T @ cols).reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ wf).reshape(b, ho, wo, cin, kh, kw)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            x._accumulate(gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _track(out, parents, bw)


def deconv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: tuple[int, int]) -> Tensor:
    """Transposed 2-D convolution (fractionally strided upsampling).

    x: (B, Cin, H, W); weight: (Cin, Cout, kh, kw); output spatial dims are
    (H-1)*sh + kh by (W-1)*sw + kw.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("deconv2d expects 4-D input and weight")
    b, cin, h, w = x.data.shape
    wcin, cout, kh, kw = weight.data.shape
    sh, sw = stride
    if cin != wcin:
        raise DimensionError(f"deconv2d: input channels {cin} != weight channels {wcin}")
    ho = (h - 1) * sh + kh
    wo = (w - 1) * sw + kw

    x2 = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, cin)
    t = (x2 @ weight.data.reshape(cin, -1)).reshape(b, h, w, cout, kh, kw)
    y = np.zeros((b, cout, ho, wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            y[:, :, i : i + sh * h : sh, j : j + sw * w : sw] += t[:, :, :, :, i, j].transpose(
                0, 3, 1, 2
            )
    if bias is not None:
        y = y + bias.data[:, None, None]
    out = Tensor(y)

    def bw(g, x=x, weight=weight, bias=bias, x2=x2):
        gwin = sliding_window_view(g, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        gwin2 = np.ascontiguousarray(gwin.transpose(0, 2, 3, 1, 4, 5)).reshape(
            b * h * w, cout * kh * kw
        )
        if x.requires_grad:
            gx = (gwin2 @ weight.data.reshape(cin, -1).T).reshape(b, h, w, cin)
            x._accumulate(gx.transpose(0, 3, 1, 2))
        if weight.requires_grad:
            weight._accumulate((x2.T @ gwin2).reshape(weight.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _track(out, parents, bw)


# ---- normalizations and softmax --------------------------------------------


def _normalize(x: Tensor, axis: int, eps: float) -> Tensor:
    """(x - mean) / sqrt(population variance + eps) along ``axis``."""
    x = as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = Tensor(y)

    def bw(g, x=x, y=y, inv=inv, axis=axis):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        x._accumulate(inv * (g - gm - y * gym))

    return _track(out, (x,), bw)


def batch_norm_features(x: Tensor, eps: float = BATCH_NORM_EPS) -> Tensor:
    """Column-wise standardization of a (B, D) batch; requires B >= 2."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError("batch_norm_features expects a (B, D) tensor")
    if x.data.shape[0] < 2:
        raise DimensionError("batch_norm_features requires a batch of at least 2")
    return _normalize(x, axis=0, eps=eps)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Last-axis normalization with learned scale and shift."""
    return _normalize(x, axis=-1, eps=eps) * gamma + beta


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g, x=x, y=y, axis=axis):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - dot))

    return _track(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    y = np.exp(out.data)

    def bw(g, x=x, y=y, axis=axis):
        x._accumulate(g - y * g.sum(axis=axis, keepdims=True))

    return _track(out, (x,), bw)


# ---- attention block --------------------------------------------------------


@dataclass
class AttentionBlockParams:
    """Parameters of one pre-norm transformer block (MHA + MLP, residuals)."""

    ln1_gamma: Parameter
    ln1_beta: Parameter
    w_q: Parameter
    b_q: Parameter
    w_k: Parameter
    b_k: Parameter
    w_v: Parameter
    b_v: Parameter
    w_o: Parameter
    b_o: Parameter
    ln2_gamma: Parameter
    ln2_beta: Parameter
    w_mlp1: Parameter
    b_mlp1: Parameter
    w_mlp2: Parameter
    b_mlp2: Parameter
    heads: int

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in fields(self) if f.name != "heads"]

    @classmethod
    def create(
        cls,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        hidden: int | None = None,
        dtype=np.float32,
        prefix: str = "attn",
    ) -> "AttentionBlockParams":
        if dim % heads != 0:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        hidden = hidden or dim
        from .init import fan_in_uniform

        def lin(name, dout, din):
            w = Parameter(fan_in_uniform((dout, din), din, rng, dtype), f"{prefix}.{name}.weight")
            b = Parameter(np.zeros(dout, dtype=dtype), f"{prefix}.{name}.bias")
            return w, b

        wq, bq = lin("q", dim, dim)
        wk, bk = lin("k", dim, dim)
        wv, bv = lin("v", dim, dim)
        wo, bo = lin("o", dim, dim)
        w1, b1 = lin("mlp1", hidden, dim)
        w2, b2 = lin("mlp2", dim, hidden)
        return cls(
            ln1_gamma=Parameter(np.ones(dim, dtype=dtype), f"{prefix}.ln1.gamma"),
            ln1_beta=Parameter(np.zeros(dim, dtype=dtype), f"{prefix}.ln1.beta"),
            w_q=wq, b_q=bq, w_k=wk, b_k=bk, w_v=wv, b_v=bv, w_o=wo, b_o=bo,
            ln2_gamma=Parameter(np.ones(dim, dtype=dtype), f"{prefix}.ln2.gamma"),
            ln2_beta=Parameter(np.zeros(dim, dtype=dtype), f"{prefix}.ln2.beta"),
            w_mlp1=w1, b_mlp1=b1, w_mlp2=w2, b_mlp2=b2,
            heads=heads,
        )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead = x.data.shape[:-2]
    tokens, dim = x.data.shape[-2:]
    dh = dim // heads
    x = x.reshape(lead + (tokens, heads, dh))
    axes = tuple(range(len(lead))) + (x.ndim - 2, x.ndim - 3, x.ndim - 1)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    lead = x.data.shape[:-3]
    heads, tokens, dh = x.data.shape[-3:]
    axes = tuple(range(len(lead))) + (x.ndim - 2, x.ndim - 3, x.ndim - 1)
    return x.transpose(axes).reshape(lead + (tokens, heads * dh))


def attention_block(tokens: Tensor, params: AttentionBlockParams) -> Tensor:
    """Pre-norm self-attention block over the token axis.

    z = tokens + MHA(LN(tokens)); out = z + MLP(LN(z)). Accepts (L, d) or
    batched (..., L, d); no positional encoding, so the map is permutation
    equivariant over tokens.
    """
    from .tensor import matmul

    tokens = as_tensor(tokens)
    dim = tokens.data.shape[-1]
    heads = params.heads
    if dim % heads != 0:
        raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
    dh = dim // heads

    h = layer_norm(tokens, params.ln1_gamma, params.ln1_beta)
    q = _split_heads(affine(h, params.w_q, params.b_q), heads)
    k = _split_heads(affine(h, params.w_k, params.b_k), heads)
    v = _split_heads(affine(h, params.w_v, params.b_v), heads)
    scores = matmul(q, k.transpose(tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    att = softmax(scores * float(dh) ** -0.5, axis=-1)
    ctx = _merge_heads(matmul(att, v))
    z = tokens + affine(ctx, params.w_o, params.b_o)

    m = layer_norm(z, params.ln2_gamma, params.ln2_beta)
    return z + affine(relu(affine(m, params.w_mlp1, params.b_mlp1)), params.w_mlp2, params.b_mlp2)
