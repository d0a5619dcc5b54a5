"""Dynamic decomposed mixer: axis-folded spatial mixers, a channel mixer,
and the two softmax fusion mechanisms that mix their outputs adaptively.

All functions accept (C,H,W) tensors or batched (B,C,H,W) tensors; the
batch axis, when present, is carried through untouched.

Fold index maps (the checkpoint-portable contract):
    fold_width:  Y[c'*W + w, p, h] = X[p*C' + c', h, w]
    fold_height: Y[c'*H + h, p, w] = X[p*C' + c', h, w]
with C' = C/N and patch p owning the contiguous source channels
[p*C', (p+1)*C'). Both are pure permutations, hence bitwise invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

__all__ = [
    "fold_width", "fold_height", "unfold_width", "unfold_height",
    "SDMixerParams", "ChannelMixerParams", "SpatialMixParams",
    "ChannelMixParams", "DDMParams",
    "sd_mixer", "channel_mixer", "spatial_dynamic_mix", "channel_dynamic_mix",
    "ddm_forward", "he_uniform",
]


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    """Fan-in He-uniform init, U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def _zeros_param(shape: tuple, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _check_patches(c: int, n: int) -> int:
    if c % n:
        raise ShapeError(f"channel count {c} not divisible by patch count {n}")
    return c // n


def fold_width(x: Tensor, n: int) -> Tensor:
    """(C,H,W) -> (C'*W, N, H): patches concatenated along width, permuted."""
    c, h, w = x.shape[-3:]
    cp = _check_patches(c, n)
    if x.ndim == 3:
        y = ops.reshape(x, (n, cp, h, w))
        y = ops.permute(y, (1, 3, 0, 2))  # (C', W, N, H)
        return ops.reshape(y, (cp * w, n, h))
    b = x.shape[0]
    y = ops.reshape(x, (b, n, cp, h, w))
    y = ops.permute(y, (0, 2, 4, 1, 3))
    return ops.reshape(y, (b, cp * w, n, h))


def unfold_width(x: Tensor, n: int, width: int) -> Tensor:
    """Exact inverse of fold_width; `width` is the original W."""
    f, np_, h = x.shape[-3:]
    if np_ != n or f % width:
        raise ShapeError(f"unfold_width: shape {x.shape} inconsistent with N={n}, W={width}")
    cp = f // width
    if x.ndim == 3:
        y = ops.reshape(x, (cp, width, n, h))
        y = ops.permute(y, (2, 0, 3, 1))  # (N, C', H, W)
        return ops.reshape(y, (cp * n, h, width))
    b = x.shape[0]
    y = ops.reshape(x, (b, cp, width, n, h))
    y = ops.permute(y, (0, 3, 1, 4, 2))
    return ops.reshape(y, (b, cp * n, h, width))


def fold_height(x: Tensor, n: int) -> Tensor:
    """(C,H,W) -> (C'*H, N, W): patches concatenated along height, permuted."""
    c, h, w = x.shape[-3:]
    cp = _check_patches(c, n)
    if x.ndim == 3:
        y = ops.reshape(x, (n, cp, h, w))
        y = ops.permute(y, (1, 2, 0, 3))  # (C', H, N, W)
        return ops.reshape(y, (cp * h, n, w))
    b = x.shape[0]
    y = ops.reshape(x, (b, n, cp, h, w))
    y = ops.permute(y, (0, 2, 3, 1, 4))
    return ops.reshape(y, (b, cp * h, n, w))


def unfold_height(x: Tensor, n: int, height: int) -> Tensor:
    """Exact inverse of fold_height; `height` is the original H."""
    f, np_, w = x.shape[-3:]
    if np_ != n or f % height:
        raise ShapeError(f"unfold_height: shape {x.shape} inconsistent with N={n}, H={height}")
    cp = f // height
    if x.ndim == 3:
        y = ops.reshape(x, (cp, height, n, w))
        y = ops.permute(y, (2, 0, 1, 3))
        return ops.reshape(y, (cp * n, height, w))
    b = x.shape[0]
    y = ops.reshape(x, (b, cp, height, n, w))
    y = ops.permute(y, (0, 3, 1, 2, 4))
    return ops.reshape(y, (b, cp * n, height, w))


# -- parameter containers -------------------------------------------------------


@dataclass
class SDMixerParams:
    """Spatially decomposed mixer along one axis.

    The linears are square over the folded extent (C/N * W for the width
    path, C/N * H for the height path); the 1x3 depthwise kernel spans the
    remaining spatial axis, never the patch axis.
    """

    axis: str  # "height" | "width"
    n: int
    lin1_w: Tensor
    lin1_b: Tensor
    dw_k: Tensor
    dw_b: Tensor
    lin2_w: Tensor
    lin2_b: Tensor

    @classmethod
    def create(cls, axis: str, c: int, n: int, h: int, w: int,
               rng: np.random.Generator, dtype=np.float32) -> "SDMixerParams":
        cp = _check_patches(c, n)
        folded = cp * (w if axis == "width" else h)
        return cls(
            axis=axis,
            n=n,
            lin1_w=he_uniform(rng, (folded, folded), folded, dtype),
            lin1_b=_zeros_param((folded,), dtype),
            dw_k=he_uniform(rng, (folded, 1, 3), 3, dtype),
            dw_b=_zeros_param((folded,), dtype),
            lin2_w=he_uniform(rng, (folded, folded), folded, dtype),
            lin2_b=_zeros_param((folded,), dtype),
        )

    def named_tensors(self, prefix: str):
        yield f"{prefix}.lin1.weight", self.lin1_w
        yield f"{prefix}.lin1.bias", self.lin1_b
        yield f"{prefix}.dw.weight", self.dw_k
        yield f"{prefix}.dw.bias", self.dw_b
        yield f"{prefix}.lin2.weight", self.lin2_w
        yield f"{prefix}.lin2.bias", self.lin2_b


@dataclass
class ChannelMixerParams:
    """Pointwise expand, 3x3 depthwise, GELU, pointwise project."""

    expansion: int
    lin1_w: Tensor
    lin1_b: Tensor
    dw_k: Tensor
    dw_b: Tensor
    lin2_w: Tensor
    lin2_b: Tensor

    @classmethod
    def create(cls, c: int, expansion: int, rng: np.random.Generator,
               dtype=np.float32) -> "ChannelMixerParams":
        if expansion < 1:
            raise ValueError("channel mixer expansion must be >= 1")
        ec = expansion * c
        return cls(
            expansion=expansion,
            lin1_w=he_uniform(rng, (ec, c), c, dtype),
            lin1_b=_zeros_param((ec,), dtype),
            dw_k=he_uniform(rng, (ec, 3, 3), 9, dtype),
            dw_b=_zeros_param((ec,), dtype),
            lin2_w=he_uniform(rng, (c, ec), ec, dtype),
            lin2_b=_zeros_param((c,), dtype),
        )

    def named_tensors(self, prefix: str):
        yield f"{prefix}.lin1.weight", self.lin1_w
        yield f"{prefix}.lin1.bias", self.lin1_b
        yield f"{prefix}.dw.weight", self.dw_k
        yield f"{prefix}.dw.bias", self.dw_b
        yield f"{prefix}.lin2.weight", self.lin2_w
        yield f"{prefix}.lin2.bias", self.lin2_b


@dataclass
class SpatialMixParams:
    """Two tiny bottleneck MLPs, one per pooled direction summary.

    Final layers start at zero so the spatial mixing begins as an exact
    identity on its residual inputs.
    """

    h_lin1_w: Tensor
    h_lin1_b: Tensor
    h_lin2_w: Tensor
    h_lin2_b: Tensor
    w_lin1_w: Tensor
    w_lin1_b: Tensor
    w_lin2_w: Tensor
    w_lin2_b: Tensor

    @classmethod
    def create(cls, c: int, reduction: int, rng: np.random.Generator,
               dtype=np.float32) -> "SpatialMixParams":
        hid = max(c // reduction, 1)
        def mlp():
            return (
                he_uniform(rng, (hid, c), c, dtype),
                _zeros_param((hid,), dtype),
                _zeros_param((c, hid), dtype),  # zero-init final layer
                _zeros_param((c,), dtype),
            )
        h1w, h1b, h2w, h2b = mlp()
        w1w, w1b, w2w, w2b = mlp()
        return cls(h1w, h1b, h2w, h2b, w1w, w1b, w2w, w2b)

    def named_tensors(self, prefix: str):
        yield f"{prefix}.h.lin1.weight", self.h_lin1_w
        yield f"{prefix}.h.lin1.bias", self.h_lin1_b
        yield f"{prefix}.h.lin2.weight", self.h_lin2_w
        yield f"{prefix}.h.lin2.bias", self.h_lin2_b
        yield f"{prefix}.w.lin1.weight", self.w_lin1_w
        yield f"{prefix}.w.lin1.bias", self.w_lin1_b
        yield f"{prefix}.w.lin2.weight", self.w_lin2_w
        yield f"{prefix}.w.lin2.bias", self.w_lin2_b


@dataclass
class ChannelMixParams:
    """Tiny bottleneck MLP C -> C/r -> 3C scoring the three branches.

    Zero-init final layer makes the initial fusion the exact 3-way mean.
    """

    lin1_w: Tensor
    lin1_b: Tensor
    lin2_w: Tensor
    lin2_b: Tensor

    @classmethod
    def create(cls, c: int, reduction: int, rng: np.random.Generator,
               dtype=np.float32) -> "ChannelMixParams":
        hid = max(c // reduction, 1)
        return cls(
            lin1_w=he_uniform(rng, (hid, c), c, dtype),
            lin1_b=_zeros_param((hid,), dtype),
            lin2_w=_zeros_param((3 * c, hid), dtype),
            lin2_b=_zeros_param((3 * c,), dtype),
        )

    def named_tensors(self, prefix: str):
        yield f"{prefix}.lin1.weight", self.lin1_w
        yield f"{prefix}.lin1.bias", self.lin1_b
        yield f"{prefix}.lin2.weight", self.lin2_w
        yield f"{prefix}.lin2.bias", self.lin2_b


@dataclass
class DDMParams:
    """All parameters of one dynamic decomposed mixer module."""

    c: int
    n: int
    sdm_h: SDMixerParams
    sdm_w: SDMixerParams
    cm: ChannelMixerParams
    smix: SpatialMixParams
    cmix: ChannelMixParams

    @classmethod
    def create(cls, c: int, n: int, h: int, w: int, rng: np.random.Generator,
               dtype=np.float32, cm_expansion: int = 2,
               reduction: int = 4) -> "DDMParams":
        return cls(
            c=c,
            n=n,
            sdm_h=SDMixerParams.create("height", c, n, h, w, rng, dtype),
            sdm_w=SDMixerParams.create("width", c, n, h, w, rng, dtype),
            cm=ChannelMixerParams.create(c, cm_expansion, rng, dtype),
            smix=SpatialMixParams.create(c, reduction, rng, dtype),
            cmix=ChannelMixParams.create(c, reduction, rng, dtype),
        )

    def named_tensors(self, prefix: str):
        yield from self.sdm_h.named_tensors(f"{prefix}.sdm_h")
        yield from self.sdm_w.named_tensors(f"{prefix}.sdm_w")
        yield from self.cm.named_tensors(f"{prefix}.cm")
        yield from self.smix.named_tensors(f"{prefix}.smix")
        yield from self.cmix.named_tensors(f"{prefix}.cmix")


# -- forward passes -------------------------------------------------------------


def sd_mixer(x: Tensor, p: SDMixerParams) -> Tensor:
    """Fold one spatial axis into channels, mix with linear/dwconv/GELU/linear,
    unfold back to the input shape."""
    h, w = x.shape[-2:]
    if p.axis == "width":
        folded = fold_width(x, p.n)
        restore = lambda t: unfold_width(t, p.n, w)
    elif p.axis == "height":
        folded = fold_height(x, p.n)
        restore = lambda t: unfold_height(t, p.n, h)
    else:
        raise ValueError(f"unknown sd_mixer axis {p.axis!r}")
    y = ops.linear(folded, p.lin1_w, p.lin1_b, axis=-3)
    y = ops.dwconv2d(y, p.dw_k, p.dw_b)
    y = ops.gelu(y)
    y = ops.linear(y, p.lin2_w, p.lin2_b, axis=-3)
    return restore(y)


def channel_mixer(x: Tensor, p: ChannelMixerParams) -> Tensor:
    y = ops.linear(x, p.lin1_w, p.lin1_b, axis=-3)
    y = ops.dwconv2d(y, p.dw_k, p.dw_b)
    y = ops.gelu(y)
    return ops.linear(y, p.lin2_w, p.lin2_b, axis=-3)


def _pooled_vector(x: Tensor) -> Tensor:
    """Global spatial mean as a flat per-channel vector, (C,) or (B,C)."""
    pooled = ops.global_avgpool(x)
    return ops.reshape(pooled, pooled.shape[:-2])


def _as_channel_map(v: Tensor) -> Tensor:
    """(C,) -> (C,1,1) or (B,C) -> (B,C,1,1) for broadcasting over space."""
    return ops.reshape(v, v.shape + (1, 1))


def _tiny_mlp(v: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return ops.linear(ops.gelu(ops.linear(v, w1, b1, axis=-1)), w2, b2, axis=-1)


def _similarity_map(features: Tensor, summary_vec: Tensor) -> Tensor:
    """Softmax over all H*W positions of <features[:,h,w], summary>."""
    h, w = features.shape[-2:]
    logits = ops.tsum(ops.mul(features, _as_channel_map(summary_vec)), axis=-3, keepdims=True)
    flat = ops.reshape(logits, logits.shape[:-2] + (h * w,))
    scores = ops.softmax(flat, axis=-1)
    return ops.reshape(scores, logits.shape)


def spatial_dynamic_mix(x_h: Tensor, x_w: Tensor, p: SpatialMixParams):
    """Cross-inject each axis branch with the other branch's pooled summary.

    Returns (x_h_star, x_w_star); with zero final MLP layers both are the
    unchanged residual inputs.
    """
    if x_h.shape != x_w.shape:
        raise ShapeError(f"spatial_dynamic_mix: shape mismatch {x_h.shape} vs {x_w.shape}")
    w_summary = _pooled_vector(x_w)
    h_summary = _pooled_vector(x_h)
    score_h = _similarity_map(x_h, w_summary)
    score_w = _similarity_map(x_w, h_summary)
    w_injected = _tiny_mlp(w_summary, p.w_lin1_w, p.w_lin1_b, p.w_lin2_w, p.w_lin2_b)
    h_injected = _tiny_mlp(h_summary, p.h_lin1_w, p.h_lin1_b, p.h_lin2_w, p.h_lin2_b)
    x_h_star = ops.add(ops.mul(_as_channel_map(w_injected), score_h), x_h)
    x_w_star = ops.add(ops.mul(_as_channel_map(h_injected), score_w), x_w)
    return x_h_star, x_w_star


def channel_dynamic_mix(x_h_star: Tensor, x_w_star: Tensor, x_c: Tensor,
                        p: ChannelMixParams) -> Tensor:
    """Fuse the three branches with per-channel softmax significance weights."""
    if not (x_h_star.shape == x_w_star.shape == x_c.shape):
        raise ShapeError("channel_dynamic_mix: branch shape mismatch")
    c = x_c.shape[-3]
    summed = ops.add(ops.add(x_h_star, x_w_star), x_c)
    scores = _tiny_mlp(_pooled_vector(summed), p.lin1_w, p.lin1_b, p.lin2_w, p.lin2_b)
    grouped = ops.reshape(scores, scores.shape[:-1] + (3, c))
    weights = ops.softmax(grouped, axis=-2)
    w1, w2, w3 = ops.split(weights, 3, axis=-2)
    lead = scores.shape[:-1]
    as_map = lambda t: ops.reshape(t, lead + (c, 1, 1))
    return ops.add(
        ops.add(ops.mul(x_h_star, as_map(w1)), ops.mul(x_w_star, as_map(w2))),
        ops.mul(x_c, as_map(w3)),
    )


def ddm_forward(x: Tensor, p: DDMParams) -> Tensor:
    """Two axis mixers and a channel mixer, fused by the dynamic mixings."""
    x_h = sd_mixer(x, p.sdm_h)
    x_w = sd_mixer(x, p.sdm_w)
    x_c = channel_mixer(x, p.cm)
    x_h_star, x_w_star = spatial_dynamic_mix(x_h, x_w, p.smix)
    return channel_dynamic_mix(x_h_star, x_w_star, x_c, p.cmix)
