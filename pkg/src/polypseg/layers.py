"""Forward and backward rules for every layer the two architectures use.

All spatial kernels (convolution, transposed convolution, pooling, unpooling,
bilinear upsampling) are fused autodiff operations with hand-written backward
closures; batch normalization is composed from tensor primitives so its
gradient comes for free. Convolutions run through an im2col + GEMM path.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import autodiff as ad
from .autodiff import Tensor, accumulate_grad, as_tensor, from_op
from .errors import CorruptionError, InvalidArgumentError, NumericError, ShapeError
from .rng import Rng


# -- parameter containers ----------------------------------------------------


@dataclass
class Conv2dParams:
    """Weights [out_ch, in_ch, kH, kW] plus optional bias and geometry.

    The same container drives both conv2d (in_ch -> out_ch) and
    transposed_conv2d, which computes the adjoint map (out_ch -> in_ch).
    """
    weights: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.data.ndim != 4:
            raise ShapeError("conv weights must be rank 4 [out, in, kH, kW]")
        kh, kw = self.weights.shape[2], self.weights.shape[3]
        if kh != kw:
            raise ShapeError(f"only square kernels are supported, got {kh}x{kw}")
        if self.padding < 0:
            raise InvalidArgumentError("padding must be non-negative")


@dataclass
class PoolResult:
    """2x2 max-pool output with per-window argmax positions.

    ``indices`` holds the row-major position (0..3) of the max inside each
    2x2 window, which the unpooling decoder scatters back into.
    """
    output: Tensor
    indices: np.ndarray


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise InvalidArgumentError("momentum must lie in (0, 1)")
        if self.epsilon <= 0:
            raise InvalidArgumentError("epsilon must be positive")


@dataclass
class DropoutConfig:
    rate: float = 0.5
    mode: str = "train"  # off | train | mc-sample

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise InvalidArgumentError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.mode not in ("off", "train", "mc-sample"):
            raise InvalidArgumentError(f"unknown dropout mode {self.mode!r}")


# -- im2col machinery ---------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("convolution output would be empty")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    sn, sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(dcols: np.ndarray, xshape, kh: int, kw: int, stride: int, pad: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride] += d6[:, :, u, v]
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + h, pad:pad + w])
    return dxp


# -- convolution ---------------------------------------------------------------


def conv2d(x, p: Conv2dParams) -> Tensor:
    """Cross-correlation with zero padding; output H' = (H + 2p - k)/s + 1."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d expects [N, C, H, W], got rank {x.data.ndim}")
    if p.stride < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {p.stride}")
    cout, cin, kh, kw = p.weights.shape
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {cin}")
    if p.bias is not None and p.bias.shape != (cout,):
        raise ShapeError("bias shape must be [out_ch]")

    n = x.shape[0]
    cols, ho, wo = _im2col(x.data, kh, kw, p.stride, p.padding)
    wmat = p.weights.data.reshape(cout, -1)
    out2 = cols @ wmat.T
    if p.bias is not None:
        out2 += p.bias.data
    out_data = np.ascontiguousarray(
        out2.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    w, b = p.weights, p.bias
    out = from_op(out_data, (x, w, b))

    def _bw():
        g2 = out._grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        if w._needs_grad:
            accumulate_grad(w, (g2.T @ cols).reshape(w.shape))
        if b is not None and b._needs_grad:
            accumulate_grad(b, g2.sum(axis=0))
        if x._needs_grad:
            dcols = g2 @ wmat
            accumulate_grad(x, _col2im(dcols, x.shape, kh, kw, p.stride, p.padding, ho, wo))

    out._backward_fn = _bw
    return out


def transposed_conv2d(x, p: Conv2dParams) -> Tensor:
    """Adjoint of conv2d with the same weights (learned upsampling).

    Maps [N, out_ch, H, W] to [N, in_ch, (H-1)*s - 2p + k, ...]; for random
    x, y the identity <conv2d(x, p), y> == <x, transposed_conv2d(y, p)> holds
    (with bias disabled).
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects [N, C, H, W], got rank {x.data.ndim}")
    if p.stride < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {p.stride}")
    cout, cin, kh, kw = p.weights.shape
    if x.shape[1] != cout:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {cout}")
    n, _, h, w_in = x.shape
    h_out = (h - 1) * p.stride - 2 * p.padding + kh
    w_out = (w_in - 1) * p.stride - 2 * p.padding + kw
    if h_out <= 0 or w_out <= 0:
        raise ShapeError("transposed convolution output would be empty")
    if p.bias is not None and p.bias.shape != (cin,):
        raise ShapeError("transposed conv bias must have [in_ch] entries")

    wmat = p.weights.data.reshape(cout, -1)
    xmat = x.data.transpose(0, 2, 3, 1).reshape(n * h * w_in, cout)
    dcols = xmat @ wmat
    out_data = _col2im(dcols, (n, cin, h_out, w_out), kh, kw, p.stride, p.padding, h, w_in)
    if p.bias is not None:
        out_data += p.bias.data.reshape(1, cin, 1, 1)

    w, b = p.weights, p.bias
    out = from_op(out_data, (x, w, b))

    def _bw():
        gcols, _, _ = _im2col(out._grad, kh, kw, p.stride, p.padding)
        if x._needs_grad:
            dx = (gcols @ wmat.T).reshape(n, h, w_in, cout).transpose(0, 3, 1, 2)
            accumulate_grad(x, np.ascontiguousarray(dx))
        if w._needs_grad:
            accumulate_grad(w, (xmat.T @ gcols).reshape(w.shape))
        if b is not None and b._needs_grad:
            accumulate_grad(b, out._grad.sum(axis=(0, 2, 3)))

    out._backward_fn = _bw
    return out


# -- pooling -------------------------------------------------------------------


def maxpool2x2(x) -> PoolResult:
    """Non-overlapping 2x2 max pooling; ties break toward the smallest
    row-major position inside the window."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("maxpool2x2 expects [N, C, H, W]")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, ho, wo, 4)
    indices = windows.argmax(axis=-1)  # first max wins -> smallest flat index
    out_data = np.take_along_axis(windows, indices[..., None], axis=-1)[..., 0]
    out = from_op(np.ascontiguousarray(out_data), (x,))

    def _bw():
        scatter = np.zeros((n, c, ho, wo, 4), dtype=out._grad.dtype)
        np.put_along_axis(scatter, indices[..., None], out._grad[..., None], axis=-1)
        dx = scatter.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        accumulate_grad(x, np.ascontiguousarray(dx))

    out._backward_fn = _bw
    return PoolResult(output=out, indices=indices.astype(np.int64))


def max_unpool2x2(y, indices: np.ndarray, out_shape) -> Tensor:
    """Scatter pooled values back to their argmax positions; everything else
    is zero, so each 2x2 window holds at most one nonzero candidate."""
    y = as_tensor(y)
    out_shape = tuple(out_shape)
    if y.data.ndim != 4:
        raise ShapeError("max_unpool2x2 expects [N, C, H, W]")
    if indices.shape != y.data.shape:
        raise ShapeError("indices must match the pooled tensor shape")
    n, c, ho, wo = y.shape
    if out_shape != (n, c, 2 * ho, 2 * wo):
        raise ShapeError(f"out_shape must be {(n, c, 2 * ho, 2 * wo)}, got {out_shape}")
    if indices.min() < 0 or indices.max() > 3:
        raise CorruptionError("pooling indices outside the 2x2 window range")

    scatter = np.zeros((n, c, ho, wo, 4), dtype=y.dtype)
    np.put_along_axis(scatter, indices[..., None], y.data[..., None], axis=-1)
    out_data = scatter.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    out = from_op(np.ascontiguousarray(out_data.reshape(out_shape)), (y,))

    def _bw():
        g = out._grad.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
        g = g.reshape(n, c, ho, wo, 4)
        dy = np.take_along_axis(g, indices[..., None], axis=-1)[..., 0]
        accumulate_grad(y, np.ascontiguousarray(dy))

    out._backward_fn = _bw
    return out


# -- normalization and regularization -----------------------------------------


def batchnorm(x, state: BatchNormState, mode: str | None = None) -> Tensor:
    """Per-channel normalization; composed from primitives so the training
    gradient flows through the batch statistics."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("batchnorm expects [N, C, H, W]")
    c = x.shape[1]
    if state.gamma.shape != (c,) or state.beta.shape != (c,):
        raise ShapeError("gamma/beta must have one entry per channel")
    mode = state.mode if mode is None else mode
    if mode not in ("train", "eval"):
        raise InvalidArgumentError(f"unknown batchnorm mode {mode!r}")

    if mode == "train":
        n, _, h, w = x.shape
        if n * h * w < 2:
            raise InvalidArgumentError("train-mode batchnorm needs at least 2 values per channel")
        mu = ad.tmean(x, axis=(0, 2, 3), keepdims=True)
        centered = ad.sub(x, mu)
        var = ad.tmean(ad.power(centered, 2.0), axis=(0, 2, 3), keepdims=True)
        inv_std = ad.power(ad.add(var, state.epsilon), -0.5)
        x_hat = ad.mul(centered, inv_std)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mu.data.reshape(c)
        state.running_var[...] = (1 - m) * state.running_var + m * var.data.reshape(c)
    else:
        rm = state.running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        rv = state.running_var.reshape(1, c, 1, 1).astype(x.dtype)
        x_hat = ad.mul(ad.sub(x, rm), (rv + state.epsilon) ** -0.5)

    gamma = ad.reshape(state.gamma, (1, c, 1, 1))
    beta = ad.reshape(state.beta, (1, c, 1, 1))
    return ad.add(ad.mul(x_hat, gamma), beta)


def dropout(x, cfg: DropoutConfig, rng: Rng | None = None) -> Tensor:
    """Inverted dropout: keep with probability 1-rate, scale survivors by
    1/(1-rate). Modes train and mc-sample are identical; off is the identity."""
    x = as_tensor(x)
    if cfg.mode == "off" or cfg.rate == 0.0:
        return x
    if rng is None:
        raise InvalidArgumentError("active dropout needs an Rng")
    keep = rng.uniform(x.size).reshape(x.shape) >= cfg.rate
    scale = 1.0 / (1.0 - cfg.rate)
    mask = keep.astype(x.dtype) * x.dtype.type(scale)
    out = from_op(x.data * mask, (x,))

    def _bw():
        accumulate_grad(x, out._grad * mask)

    out._backward_fn = _bw
    return out


# -- loss ----------------------------------------------------------------------


def stable_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Max-subtracted softmax over ``axis`` (shared by the loss and by
    Monte Carlo prediction)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_ce(logits, target: np.ndarray):
    """Per-pixel softmax cross-entropy.

    Returns ``(loss, probs)`` where loss is the mean over all pixels of
    -log p(target class) with probabilities floored at 1e-12 inside the log,
    and probs is a detached [N, K, H, W] tensor.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 4:
        raise ShapeError("softmax_ce expects logits [N, K, H, W]")
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape must be {(n, h, w)}, got {target.shape}")
    if not np.issubdtype(target.dtype, np.integer):
        raise InvalidArgumentError("target must be an integer tensor")
    if target.min() < 0 or target.max() >= k:
        raise InvalidArgumentError(f"target classes must lie in [0, {k})")

    probs = stable_softmax(logits.data, axis=1)
    p_target = np.take_along_axis(probs, target[:, None], axis=1)[:, 0]
    npix = n * h * w
    loss_val = -np.log(np.maximum(p_target, 1e-12)).sum() / npix
    if not np.isfinite(loss_val):
        raise NumericError("cross-entropy loss is non-finite")

    out = from_op(np.asarray(loss_val, dtype=logits.dtype), (logits,))

    def _bw():
        d = probs.copy()
        hot = np.take_along_axis(d, target[:, None], axis=1)
        np.put_along_axis(d, target[:, None], hot - 1.0, axis=1)
        accumulate_grad(logits, d * (out._grad / npix))

    out._backward_fn = _bw
    return out, Tensor(probs)


# -- bilinear upsampling ---------------------------------------------------------


def _upsample_axis(size: int, factor: int):
    # align_corners=False source coordinates, clamped at the borders
    src = (np.arange(size * factor, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    t = src - i0
    return i0, i1, t


def bilinear_upsample(x, factor: int) -> Tensor:
    """Bilinear interpolation to (H*factor, W*factor), align_corners=False."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("bilinear_upsample expects [N, C, H, W]")
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise InvalidArgumentError(f"factor must be a positive integer, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    y0, y1, ty = _upsample_axis(h, factor)
    x0, x1, tx = _upsample_axis(w, factor)
    ty = ty[:, None].astype(x.dtype)
    tx = tx[None, :].astype(x.dtype)
    w00 = (1 - ty) * (1 - tx)
    w01 = (1 - ty) * tx
    w10 = ty * (1 - tx)
    w11 = ty * tx

    d = x.data
    out_data = (w00 * d[:, :, y0[:, None], x0[None, :]]
                + w01 * d[:, :, y0[:, None], x1[None, :]]
                + w10 * d[:, :, y1[:, None], x0[None, :]]
                + w11 * d[:, :, y1[:, None], x1[None, :]])
    out = from_op(np.ascontiguousarray(out_data), (x,))

    def _bw():
        g = out._grad
        dx = np.zeros_like(x.data)
        for wgt, yi, xi in ((w00, y0, x0), (w01, y0, x1), (w10, y1, x0), (w11, y1, x1)):
            np.add.at(dx, (slice(None), slice(None), yi[:, None], xi[None, :]), wgt * g)
        accumulate_grad(x, dx)

    out._backward_fn = _bw
    return out


# -- parameter construction helpers ---------------------------------------------


def make_conv(cin: int, cout: int, k: int, rng: Rng, stride: int = 1,
              padding: int = 0, bias: bool = True) -> Conv2dParams:
    """He-initialized convolution parameters (fan_in = cin * k * k)."""
    w = ad.he_normal_init((cout, cin, k, k), fan_in=cin * k * k, rng=rng)
    b = Tensor(np.zeros(cout, dtype=ad.default_dtype()), requires_grad=True) if bias else None
    return Conv2dParams(weights=w, bias=b, stride=stride, padding=padding)


def make_batchnorm(c: int) -> BatchNormState:
    dt = ad.default_dtype()
    return BatchNormState(
        gamma=Tensor(np.ones(c, dtype=dt), requires_grad=True),
        beta=Tensor(np.zeros(c, dtype=dt), requires_grad=True),
        running_mean=np.zeros(c, dtype=dt),
        running_var=np.ones(c, dtype=dt),
    )
