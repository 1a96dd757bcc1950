"""Neural-network operations for the segmentation net, forward and backward.

Exactly the op set the encoder-decoder architecture needs: stride-1
cross-correlation with `same` or `valid` zero padding, 2x2 max pooling,
nearest-neighbour upsampling (the up-convolution is upsample + 2x2
same-padded conv), channel concatenation, ReLU, sigmoid, and mean
binary cross-entropy. No strides, dilation or other layer types.

Conventions fixed here, because downstream results depend on them:

* `same` padding splits ``k - 1`` zeros as ``(k-1)//2`` before and the
  remainder after, so a 3x3 kernel pads 1/1 and a 2x2 kernel pads 0/1
  (bottom/right-heavy).
* ReLU's subgradient at 0 is 0; max-pool ties route the gradient to the
  first maximum in row-major window order.
* sigmoid output is clamped to the open interval (0, 1) at one ulp so
  the strict range contract survives float rounding.
* BCE clamps predictions into [1e-7, 1 - 1e-7] before the logs; pixels
  outside that band get zero gradient (gradient of the active clamp).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, make_op_result

__all__ = [
    "conv2d",
    "maxpool2",
    "upsample2",
    "upconv2",
    "concat_channels",
    "relu",
    "sigmoid",
    "bce_loss",
    "BCE_EPSILON",
]

BCE_EPSILON = 1e-7


def _require_4d(t: Tensor, op: str, name: str) -> None:
    if t.data.ndim != 4:
        raise ValueError(f"{op}: {name} must be 4-d [N,C,H,W], got shape {t.shape}")


def _require_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


def _same_padding(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Unfold stride-1 windows of xp [N,C,Hp,Wp] into [N, C*kh*kw, Ho*Wo]."""
    n, c, hp, wp = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh, sw),
        writeable=False,
    )
    return windows.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 2-d cross-correlation with zero padding.

    x: [N,Cin,H,W]; weight: [Cout,Cin,kh,kw]; bias: [Cout].
    With ``padding="same"`` the output keeps H and W; with ``"valid"``
    it shrinks to (H-kh+1, W-kw+1). Differentiable in x, weight, bias.
    """
    _require_4d(x, "conv2d", "input")
    _require_4d(weight, "conv2d", "weight")
    if bias.data.ndim != 1:
        raise ValueError(f"conv2d: bias must be 1-d [Cout], got shape {bias.shape}")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    _require_same_dtype("conv2d", x, weight, bias)

    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if kh < 1 or kw < 1:
        raise ValueError(f"conv2d: kernel must be at least 1x1, got {kh}x{kw}")
    if cin_w != cin:
        raise ValueError(
            f"conv2d: input has {cin} channels but weight expects {cin_w} "
            f"(input {x.shape}, weight {weight.shape})"
        )
    if bias.shape[0] != cout:
        raise ValueError(f"conv2d: bias has {bias.shape[0]} entries for {cout} output channels")

    if padding == "same":
        pt, pb = _same_padding(kh)
        pl, pr = _same_padding(kw)
    else:
        pt = pb = pl = pr = 0
        if h < kh or w < kw:
            raise ValueError(
                f"conv2d: valid padding needs input at least {kh}x{kw}, got {h}x{w}"
            )

    if pt or pb or pl or pr:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        xp = x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = hp - kh + 1, wp - kw + 1

    cols = np.ascontiguousarray(_im2col(xp, kh, kw))
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    out = out + bias.data.reshape(1, cout, 1, 1)

    def bwd(g: np.ndarray):
        gl = g.reshape(n, cout, ho * wo)
        grad_b = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        grad_w = None
        if weight.requires_grad:
            grad_w = np.tensordot(gl, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        grad_x = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gl).reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho, j : j + wo] += gcols[:, :, i, j]
            grad_x = np.ascontiguousarray(gxp[:, :, pt : pt + h, pl : pl + w])
        return grad_x, grad_w, grad_b

    return make_op_result(out, (x, weight, bias), bwd)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; requires even spatial dims.

    The backward pass routes each window's gradient to its first
    maximum in row-major order, so tied windows behave deterministically.
    """
    _require_4d(x, "maxpool2", "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(
            f"maxpool2: spatial dims must be even, got {h}x{w}; pad or crop the input"
        )
    ho, wo = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    )
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def bwd(g: np.ndarray):
        scatter = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(scatter, argmax[..., None], g[..., None], axis=-1)
        grad_x = (
            scatter.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(grad_x),)

    return make_op_result(np.ascontiguousarray(out), (x,), bwd)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    _require_4d(x, "upsample2", "input")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bwd(g: np.ndarray):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make_op_result(out, (x,), bwd)


def upconv2(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Learned 2x upsampling: nearest-neighbour doubling then a 2x2 same conv.

    weight: [Cout,Cin,2,2]. Output spatial dims are exactly doubled; the
    2x2 `same` conv pads one zero row/column at the bottom and right.
    """
    if weight.data.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ValueError(f"upconv2: weight must be [Cout,Cin,2,2], got shape {weight.shape}")
    return conv2d(upsample2(x), weight, bias, padding="same")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; a's channels come first."""
    _require_4d(a, "concat_channels", "first input")
    _require_4d(b, "concat_channels", "second input")
    _require_same_dtype("concat_channels", a, b)
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ValueError(
            f"concat_channels: batch/spatial dims must match, got {a.shape} vs {b.shape}"
        )
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g: np.ndarray):
        return (
            np.ascontiguousarray(g[:, :ca]) if a.requires_grad else None,
            np.ascontiguousarray(g[:, ca:]) if b.requires_grad else None,
        )

    return make_op_result(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    mask = x.data > 0

    def bwd(g: np.ndarray):
        return (g * mask,)

    return make_op_result(np.where(mask, x.data, x.dtype.type(0)), (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function with output strictly in (0, 1)."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    # Keep the open-interval contract even where float rounding saturates.
    info = np.finfo(d.dtype)
    np.clip(out, info.tiny, np.nextafter(d.dtype.type(1), d.dtype.type(0)), out=out)

    def bwd(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return make_op_result(out, (x,), bwd)


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy between predictions in (0,1) and 0/1 targets.

    Predictions are clamped into [1e-7, 1 - 1e-7] before the logarithms;
    the loss is therefore always finite and non-negative. Targets must
    be exactly 0 or 1, else a ValueError is raised.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    p = pred.data
    if p.shape != t.shape:
        raise ValueError(f"bce_loss: shape mismatch pred {p.shape} vs target {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        bad = t[(t != 0) & (t != 1)].flat[0]
        raise ValueError(f"bce_loss: target values must be 0 or 1, found {bad!r}")

    dt = p.dtype.type
    eps = dt(BCE_EPSILON)
    hi = dt(1) - eps
    q = np.clip(p, eps, hi)
    t = t.astype(p.dtype, copy=False)
    n = p.size
    loss = -(t * np.log(q) + (1.0 - t) * np.log1p(-q)).sum() / n

    def bwd(g: np.ndarray):
        # Zero gradient where the clamp is active.
        inside = (p >= eps) & (p <= hi)
        grad_p = g * inside * (q - t) / (q * (1.0 - q)) / n
        return (grad_p.astype(p.dtype, copy=False),)

    return make_op_result(np.asarray(loss, dtype=p.dtype), (pred,), bwd)
