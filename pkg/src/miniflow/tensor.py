"""Dense-array conventions and the small neural op set used by the flow stack.

Arrays are plain numpy ndarrays. Images, features and flows are [C, H, W],
channel-major, row-major within a channel. Internally most kernels run batched
as [B, C, H, W]; the public functions take the unbatched layout and wrap B=1.
Parameters may also be flat [n]. Precision follows the inputs: training runs
in float32, gradient checks and oracles in float64.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an operand dimension disagrees with the op contract."""


def _require(cond, what):
    if not cond:
        raise ShapeError(what)


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2d convolution (cross-correlation, zero padding)."""

    kh: int
    kw: int
    cin: int
    cout: int
    stride: int = 1
    pad: int = 0

    def out_extent(self, h, w):
        oh = (h + 2 * self.pad - self.kh) // self.stride + 1
        ow = (w + 2 * self.pad - self.kw) // self.stride + 1
        _require(oh >= 1 and ow >= 1,
                 f"output spatial extent {oh}x{ow} from input {h}x{w}: must be >= 1")
        return oh, ow


# ---------------------------------------------------------------------------
# batched kernels

def im2col(x, kh, kw, stride, pad):
    """[B,Cin,H,W] -> column matrix [B*OH*OW, kh*kw*Cin] plus (OH, OW).

    Column order along the reduced axis is kernel rows, kernel columns, then
    input channels: the array pivots to channels-last first so the window
    copy moves contiguous channel runs instead of gathering single floats.
    """
    b, c, h, w = x.shape
    xl = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    if pad:
        xp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
        xp[:, pad:pad + h, pad:pad + w] = xl
    else:
        xp = xl
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # [B,H',W',C,kh,kw]
    win = win[:, ::stride, ::stride]
    oh, ow = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape(b * oh * ow, kh * kw * c), (oh, ow)


def _wmat(w):
    """Weight as [Cout, kh*kw*Cin] in im2col column order."""
    cout, cin, kh, kw = w.shape
    return w.transpose(0, 2, 3, 1).reshape(cout, kh * kw * cin)


def conv2d_b(x, w, bias, stride=1, pad=0):
    """Batched convolution. x [B,Cin,H,W], w [Cout,Cin,kh,kw], bias [Cout] or None.

    Returns (out, saved) where saved feeds the weight gradient: the column
    matrix in general, the raw input for the 1x1 fast path.
    """
    b, _, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    _require(x.shape[1] == cin, f"input channels: got {x.shape[1]}, weights expect {cin}")
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        out = np.matmul(w.reshape(cout, cin), x.reshape(b, cin, h * wd))
        if bias is not None:
            out += bias[:, None]
        return out.reshape(b, cout, h, wd), x
    cols, (oh, ow) = im2col(x, kh, kw, stride, pad)
    out = cols @ _wmat(w).T
    if bias is not None:
        out += bias
    return (np.ascontiguousarray(out.reshape(b, oh, ow, cout).transpose(0, 3, 1, 2)),
            cols)


def conv2d_weight_grad(saved, g, wshape):
    """dW [Cout,Cin,kh,kw] from conv2d_b's saved value and cotangent g."""
    cout, cin, kh, kw = wshape
    if kh == 1 and kw == 1 and saved.ndim == 4:
        b = g.shape[0]
        g2 = g.reshape(b, cout, -1)
        x2 = saved.reshape(b, cin, -1)
        return np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(wshape)
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    dw = gmat.T @ saved  # [Cout, kh*kw*Cin]
    return dw.reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)


def conv2d_input_grad(g, w, stride, pad, in_hw):
    """dX [B,Cin,H,W] from cotangent g [B,Cout,OH,OW].

    Stride-1 path is a transposed convolution (one GEMM); strided path
    scatters columns back with bincount so accumulation order is fixed.
    """
    b, cout, oh, ow = g.shape
    _, cin, kh, kw = w.shape
    h, wd = in_hw
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        dx = np.matmul(w.reshape(cout, cin).T, g.reshape(b, cout, oh * ow))
        return dx.reshape(b, cin, h, wd)
    if stride == 1 and kh - 1 - pad >= 0 and kw - 1 - pad >= 0:
        wflip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # [Cin,Cout,kh,kw]
        out, _ = conv2d_b(g, np.ascontiguousarray(wflip), None,
                          stride=1, pad=kh - 1 - pad)
        return out
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    gcols = gmat @ _wmat(w)  # [B*OH*OW, kh*kw*Cin]
    hp, wp = h + 2 * pad, wd + 2 * pad
    # flat target index of every column entry inside the padded input
    iy = (np.arange(oh) * stride)[:, None] + np.arange(kh)[None, :]  # [OH,kh]
    ix = (np.arange(ow) * stride)[:, None] + np.arange(kw)[None, :]  # [OW,kw]
    # entry (b, oy, ox, ky, kx, c) -> ((b*Cin + c)*HP + iy[oy,ky])*WP + ix[ox,kx]
    idx = ((np.arange(b)[:, None, None, None, None, None] * cin
            + np.arange(cin)[None, None, None, None, None, :]) * hp
           + iy[None, :, None, :, None, None]) * wp \
        + ix[None, None, :, None, :, None]
    flat = np.bincount(idx.reshape(-1),
                       weights=gcols.reshape(-1).astype(np.float64, copy=False),
                       minlength=b * cin * hp * wp)
    dxp = flat.reshape(b, cin, hp, wp).astype(g.dtype, copy=False)
    return dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp


def avg_pool2d_b(x, k):
    b, c, h, w = x.shape
    _require(h % k == 0, f"height {h} not divisible by pool kernel {k}")
    _require(w % k == 0, f"width {w} not divisible by pool kernel {k}")
    return x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))


def avg_pool2d_grad(g, k):
    return np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)


def sigmoid(x):
    # exp of a non-positive argument only, so no overflow on either branch
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_POINTWISE = {
    "sigmoid": (sigmoid, lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(x.dtype)),
    "exp": (np.exp, lambda x, y: y),
}


def pointwise(x, fn):
    """Elementwise sigmoid/tanh/relu/exp."""
    if fn not in _POINTWISE:
        raise ValueError(f"unknown pointwise fn {fn!r}")
    return _POINTWISE[fn][0](np.asarray(x))


def pointwise_grad(x, y, fn):
    """Local derivative given input x and forward output y."""
    return _POINTWISE[fn][1](x, y)


def concat_channels(inputs):
    """Stack [..,Ci,H,W] tensors along the channel axis, argument order kept."""
    _require(len(inputs) >= 1, "concat_channels needs at least one input")
    hw = inputs[0].shape[-2:]
    for i, t in enumerate(inputs):
        _require(t.shape[-2:] == hw,
                 f"input {i} spatial extent {t.shape[-2:]} != {hw}")
    return np.concatenate(inputs, axis=-3)


def softmax_channel(x):
    """Per-pixel softmax over the channel axis (max-subtracted)."""
    m = x.max(axis=-3, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-3, keepdims=True)


# ---------------------------------------------------------------------------
# public unbatched surface

def conv2d(x, w, bias, spec: ConvSpec):
    """Convolution per spec on a [Cin,H,W] input; returns [Cout,H',W']."""
    _require(x.ndim == 3, f"input rank {x.ndim}, expected 3")
    _require(w.shape == (spec.cout, spec.cin, spec.kh, spec.kw),
             f"weight shape {w.shape}, spec expects {(spec.cout, spec.cin, spec.kh, spec.kw)}")
    _require(x.shape[0] == spec.cin,
             f"input channels: got {x.shape[0]}, spec expects {spec.cin}")
    _require(bias.shape == (spec.cout,),
             f"bias shape {bias.shape}, spec expects ({spec.cout},)")
    spec.out_extent(x.shape[1], x.shape[2])
    out, _ = conv2d_b(x[None], w, bias, spec.stride, spec.pad)
    return out[0]


def avg_pool2d(x, k):
    _require(x.ndim == 3, f"input rank {x.ndim}, expected 3")
    return avg_pool2d_b(x[None], k)[0]
