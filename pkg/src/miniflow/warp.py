"""Backward bilinear sampling and forward splatting, with analytic adjoints.

Coordinate convention: pixel centers sit at integer coordinates; a source
pixel (x, y) with flow (u, v) maps to the continuous target (x+u, y+v).
Sampling gathers from the four integer neighbors of the target; splatting
scatters to them with the same tent weights w = max(0, 1-|dx|) * max(0, 1-|dy|),
which is nonzero only for the enclosing four, so only those are visited.

Raw kernels work batched on [B,C,H,W]; the public functions take the
unbatched [C,H,W] layout. Taped wrappers (suffix _op) operate on autodiff
Vars and return the validity mask as a plain ndarray since coverage is
piecewise constant and carries no gradient.

Scatter accumulation is deterministic: every reduction goes through
np.bincount over flat target indices built in row-major source order.
"""

import numpy as np

from . import autodiff as ad
from .tensor import ShapeError, _require

EPS_HOLE = 1.0e-12

# corner order: (+0,+0), (+1,+0), (+0,+1), (+1,+1)
_CORNERS = ((0, 0), (1, 0), (0, 1), (1, 1))


def _check_pair(values, flow):
    _require(flow.shape[-3] == 2, f"flow channels: got {flow.shape[-3]}, expected 2")
    _require(values.shape[-2:] == flow.shape[-2:],
             f"spatial extent mismatch: values {values.shape[-2:]} vs flow {flow.shape[-2:]}")


class _Geometry:
    """Per-corner targets, weights and in-bounds flags for one flow field."""

    __slots__ = ("cidx", "inb", "w", "dx", "dy", "n", "bhw", "dtype")

    def __init__(self, flow):
        b, _, h, w = flow.shape
        tx = (np.arange(w, dtype=flow.dtype) + flow[:, 0]).reshape(b, -1)
        ty = (np.arange(h, dtype=flow.dtype)[:, None] + flow[:, 1]).reshape(b, -1)
        x0 = np.floor(tx)
        y0 = np.floor(ty)
        self.dx = tx - x0
        self.dy = ty - y0
        self.n = b * h * w
        self.bhw = (b, h, w)
        self.dtype = flow.dtype
        base = (np.arange(b, dtype=np.int64) * h * w)[:, None]
        self.cidx = np.empty((4, b, h * w), dtype=np.int64)
        self.inb = np.empty((4, b, h * w), dtype=bool)
        self.w = np.empty((4, b, h * w), dtype=flow.dtype)
        wx = (1.0 - self.dx, self.dx)
        wy = (1.0 - self.dy, self.dy)
        for i, (ox, oy) in enumerate(_CORNERS):
            cx = x0 + ox
            cy = y0 + oy
            ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            ix = np.clip(cx, 0, w - 1).astype(np.int64)
            iy = np.clip(cy, 0, h - 1).astype(np.int64)
            self.cidx[i] = base + iy * w + ix
            self.inb[i] = ok
            self.w[i] = wx[ox] * wy[oy] * ok
        self.cidx = self.cidx.reshape(4, -1)
        self.inb = self.inb.reshape(4, -1)
        self.w = self.w.reshape(4, -1)
        self.dx = self.dx.reshape(-1)
        self.dy = self.dy.reshape(-1)

    def flow_grad(self, q):
        """Maps per-corner terms q [4,N] (in-bounds-zeroed) to (du, dv) [N]."""
        du = (1.0 - self.dy) * (q[1] - q[0]) + self.dy * (q[3] - q[2])
        dv = (1.0 - self.dx) * (q[2] - q[0]) + self.dx * (q[3] - q[1])
        return du, dv


def _flatten(values):
    """[B,C,H,W] -> [C, B*H*W] view-ish matrix for gather/scatter."""
    b, c, h, w = values.shape
    return np.ascontiguousarray(values.transpose(1, 0, 2, 3)).reshape(c, b * h * w)


def _unflatten(mat, bhw):
    b, h, w = bhw
    return mat.reshape(-1, b, h, w).transpose(1, 0, 2, 3)


def _scatter(cidx, weights, n):
    """Deterministic sum-scatter of weights [4, C, N] (or [4, N]) into n bins."""
    if weights.ndim == 2:
        return np.bincount(np.broadcast_to(cidx, weights.shape).reshape(-1),
                           weights=weights.reshape(-1), minlength=n)
    c = weights.shape[1]
    offs = np.arange(c, dtype=np.int64)[None, :, None] * n
    idx = (cidx[:, None, :] + offs).reshape(-1)
    flat = np.bincount(idx, weights=weights.reshape(-1), minlength=c * n)
    return flat.reshape(c, n)


# ---------------------------------------------------------------------------
# sampling

def bilinear_sample_b(values, flow, geo=None):
    _check_pair(values, flow)
    geo = geo or _Geometry(flow)
    v2 = _flatten(values)
    out = np.zeros_like(v2)
    for i in range(4):
        out += v2[:, geo.cidx[i]] * geo.w[i]
    mask = geo.w.sum(axis=0)[None]
    return _unflatten(out, geo.bhw), _unflatten(mask, geo.bhw), geo


def bilinear_sample_vjp(values, geo, g, needs):
    """VJP for (values, flow). g is the output cotangent [B,C,H,W]."""
    g2 = _flatten(g)
    dvals = dflow = None
    if needs[0]:
        dvals = _unflatten(
            _scatter(geo.cidx, geo.w[:, None, :] * g2[None], geo.n).astype(g2.dtype),
            geo.bhw)
    if needs[1]:
        v2 = _flatten(values)
        q = np.empty((4, geo.n), dtype=g2.dtype)
        for i in range(4):
            q[i] = (g2 * v2[:, geo.cidx[i]]).sum(axis=0) * geo.inb[i]
        du, dv = geo.flow_grad(q)
        dflow = _unflatten(np.stack([du, dv]), geo.bhw)
    return dvals, dflow


# ---------------------------------------------------------------------------
# splatting

def _splat_fw(values, flow, mode, z):
    _check_pair(values, flow)
    if mode == "softmax":
        _require(z is not None, "softmax splatting requires z")
        _require(z.shape[-3] == 1, f"z channels: got {z.shape[-3]}, expected 1")
    elif z is not None:
        raise ShapeError(f"z given but mode is {mode!r}")
    v2 = _flatten(values)
    if mode == "nearest":
        return _splat_nearest(v2, flow), None, None
    geo = _Geometry(flow)
    if mode == "softmax":
        z2 = z.reshape(-1)
        # per-target max of z keeps the exponentials in (0,1]; the normalized
        # ratio is invariant to the shift, so values and gradients are exact
        m = np.full(geo.n, -np.inf, dtype=z2.dtype)
        for i in range(4):
            sel = geo.inb[i]
            np.maximum.at(m, geo.cidx[i][sel], z2[sel])
        e = np.empty((4, geo.n), dtype=v2.dtype)
        for i in range(4):
            e[i] = np.exp(np.minimum(z2 - m[geo.cidx[i]], 0.0)) * geo.inb[i]
        f = e * geo.w
    else:
        e = None
        f = geo.w
    num = _scatter(geo.cidx, f[:, None, :] * v2[None], geo.n).astype(v2.dtype)
    den = _scatter(geo.cidx, f, geo.n).astype(v2.dtype)
    cover = den >= EPS_HOLE
    if mode == "summation":
        out = np.where(cover, num, 0.0)
    else:
        out = np.where(cover, num / np.where(cover, den, 1.0), 0.0)
    mask = cover.astype(v2.dtype)[None]
    saved = (v2, f, e, den, cover, out)
    return (_unflatten(out, geo.bhw), _unflatten(mask, geo.bhw)), geo, saved


def _splat_nearest(v2, flow):
    """Rounded-target copy (floor(t + 0.5) per axis); conflicts resolved by
    the last writer in row-major source order, made explicit through
    unique-of-reversed rather than relying on numpy assignment order."""
    b, _, h, w = flow.shape
    tx = (np.arange(w, dtype=flow.dtype) + flow[:, 0]).reshape(-1)
    ty = (np.arange(h, dtype=flow.dtype)[:, None] + flow[:, 1]).reshape(-1)
    rx = np.floor(tx + 0.5)
    ry = np.floor(ty + 0.5)
    inb = (rx >= 0) & (rx < w) & (ry >= 0) & (ry < h)
    base = np.repeat(np.arange(b, dtype=np.int64) * (h * w), h * w)
    src = np.flatnonzero(inb)
    tgt = base[src] + ry[src].astype(np.int64) * w + rx[src].astype(np.int64)
    uniq, pos = np.unique(tgt[::-1], return_index=True)
    last_src = src[::-1][pos]
    out = np.zeros_like(v2)
    out[:, uniq] = v2[:, last_src]
    mask = np.zeros((1, b * h * w), dtype=v2.dtype)
    mask[0, uniq] = 1.0
    return _unflatten(out, (b, h, w)), _unflatten(mask, (b, h, w))


def _splat_vjp(mode, geo, saved, g, needs):
    """VJP for (values, flow, z). Hole targets carry zero cotangent."""
    v2, f, e, den, cover, out = saved
    g2 = _flatten(g)
    if mode == "summation":
        dnum = g2 * cover
        dden = None
    else:
        safe = np.where(cover, den, 1.0)
        dnum = (g2 / safe) * cover
        dden = -(dnum * out).sum(axis=0)
    dvals = dflow = dz = None
    if needs[0]:
        acc = np.zeros_like(v2)
        for i in range(4):
            acc += dnum[:, geo.cidx[i]] * f[i]
        dvals = _unflatten(acc, geo.bhw)
    want_flow = needs[1]
    want_z = mode == "softmax" and len(needs) > 2 and needs[2]
    if want_flow or want_z:
        q = np.empty((4, geo.n), dtype=g2.dtype)
        for i in range(4):
            q[i] = (dnum[:, geo.cidx[i]] * v2).sum(axis=0)
            if dden is not None:
                q[i] += dden[geo.cidx[i]]
            q[i] *= geo.inb[i]
        if want_flow:
            r = q * e if e is not None else q
            du, dv = geo.flow_grad(r)
            dflow = _unflatten(np.stack([du, dv]), geo.bhw)
        if want_z:
            dz = _unflatten((f * q).sum(axis=0)[None], geo.bhw)
    return dvals, dflow, dz


# ---------------------------------------------------------------------------
# public unbatched surface

def bilinear_sample(values, flow):
    """Backward warp: read values at flow-displaced positions.

    Returns (output, mask); out-of-image neighbors read as zero and reduce
    the mask, so mask(x,y) is the total in-bounds weight in [0,1].
    """
    out, mask, _ = bilinear_sample_b(values[None], flow[None])
    return out[0], mask[0]


def splat(values, flow, mode, z=None):
    """Forward warp in one of {summation, average, softmax, nearest}.

    Targets aggregating less than 1e-12 total weight are holes: output zero,
    mask zero. Out-of-image deposits are discarded. Returns (output, mask).
    """
    if mode not in ("summation", "average", "softmax", "nearest"):
        raise ValueError(f"unknown splat mode {mode!r}")
    (out, mask), _, _ = _splat_fw(values[None], flow[None], mode,
                                  None if z is None else z[None])
    return out[0], mask[0]


def interior_flow(rng, h, w, b=1):
    """Random flow whose every source keeps its full bilinear support in bounds.

    Target coordinates land in [0.1, extent-1.1] with fractional parts in
    [0.1, 0.9]. Finite-difference checks need such flows: a source thrown
    fully out of the image has exactly-zero derivatives, where central
    differences measure nothing but loss rounding noise, and fractional parts
    near integers sit on the weight kinks.
    """
    def draw(extent, base):
        t = rng.uniform(0.05, extent - 1.05, size=(b, h, w))
        fr = t - np.floor(t)
        t = np.where(fr < 0.1, t + 0.1, np.where(fr > 0.9, t - 0.1, t))
        return t - base

    fx = draw(w, np.arange(w)[None, None, :])
    fy = draw(h, np.arange(h)[None, :, None])
    return np.stack([fx, fy], axis=1)


def importance_z(feat_prev, feat_cur, flow, alpha):
    """Similarity of each source to the content it lands on, scaled by alpha.

    s(x,y) = <feat_prev(x,y), sample(feat_cur, flow)(x,y)> / sqrt(D); Z = alpha*s.
    """
    _require(feat_prev.shape == feat_cur.shape,
             f"feature shapes differ: {feat_prev.shape} vs {feat_cur.shape}")
    d = feat_prev.shape[-3]
    g, _, _ = bilinear_sample_b(feat_cur[None], flow[None])
    s = (feat_prev[None] * g).sum(axis=1, keepdims=True) / np.sqrt(d)
    return (float(np.asarray(alpha).reshape(())) * s)[0]


def chain_splat(feature, flows):
    """Left-fold of average splatting over flows, oldest first.

    The validity mask is itself transported through each stage (splatted like
    a value channel) and multiplied by the stage's coverage, so a hole keeps
    counting as a hole after later stages move it around.
    """
    if len(flows) == 0:
        raise ValueError("chain_splat needs at least one flow")
    out = feature
    mask = np.ones((1,) + feature.shape[-2:], dtype=feature.dtype)
    for fl in flows:
        out, cover = splat(out, fl, "average")
        moved, _ = splat(mask, fl, "average")
        mask = moved * cover
    return out, mask


# ---------------------------------------------------------------------------
# taped wrappers

def sample_op(values, flow):
    """Taped bilinear sample on [B,C,H,W] Vars; returns (Var, mask ndarray)."""
    out, mask, geo = bilinear_sample_b(values.val, flow.val)
    vals = values.val

    def vjp(g, needs):
        return bilinear_sample_vjp(vals, geo, g, needs)

    return values.tape.apply(out, (values, flow), vjp, "bilinear_sample"), mask


def splat_op(values, flow, mode, z=None, grad="full"):
    """Taped splat on [B,C,H,W] Vars; returns (Var, mask ndarray).

    grad selects the differentiability ablation: 'full' backpropagates into
    values, flow and z; 'values_only' treats the geometry (flow, z) as
    constant; 'none' blocks everything. nearest mode is never differentiable.
    """
    if grad not in ("full", "values_only", "none"):
        raise ValueError(f"unknown splat grad mode {grad!r}")
    (out, mask), geo, saved = _splat_fw(values.val, flow.val, mode,
                                        None if z is None else z.val)
    if mode == "nearest" or grad == "none":
        parents = (values, flow) if z is None else (values, flow, z)
        blocked = values.tape.apply(out, parents,
                                    lambda g, needs: (None,) * len(needs),
                                    f"splat_{mode}")
        return blocked, mask

    def vjp(g, needs):
        if grad == "values_only":
            needs = (needs[0],) + (False,) * (len(needs) - 1)
        dv, dfl, dz = _splat_vjp(mode, geo, saved, g, needs)
        return (dv, dfl) if len(needs) == 2 else (dv, dfl, dz)

    parents = (values, flow) if z is None else (values, flow, z)
    return values.tape.apply(out, parents, vjp, f"splat_{mode}"), mask


def importance_z_op(feat_prev, feat_cur, flow, alpha):
    """Taped importance metric; alpha is a (1,)-shaped parameter Var."""
    d = feat_prev.val.shape[-3]
    sampled, _ = sample_op(feat_cur, flow)
    s = ad.channel_sum(ad.mul(feat_prev, sampled)) * (1.0 / np.sqrt(d))
    return ad.smul(alpha, s)


def chain_splat_op(feature, flows):
    """Taped left-fold of average splats; mask handling as in chain_splat."""
    if len(flows) == 0:
        raise ValueError("chain_splat needs at least one flow")
    out = feature
    mask = np.ones((feature.val.shape[0], 1) + feature.val.shape[-2:],
                   dtype=feature.val.dtype)
    for fl in flows:
        out, cover = splat_op(out, fl, "average")
        (moved, _), _, _ = _splat_fw(mask, fl.val, "average", None)
        mask = moved * cover
    return out, mask
