"""Iterative toy optical-flow estimator.

A RAFT-style single-resolution backbone shrunk to desk scale: feature and
context encoders at 1/f resolution, an all-pairs correlation pyramid, and a
convolutional GRU that refines the flow over n iterations. Multi-frame runs
can forward-splat the previous pair's motion feature into the current one
under several embedding modes; `final_to_all` feeds one aligned tensor to
every iteration.

All model functions operate on tape Vars so gradients reach every parameter;
parameter dicts map dotted names to float32 arrays. The two predictors
(`two.*` for the reserved two-frame path, `multi.*` for embedding modes) own
disjoint GRU/flow-head/motion-encoder parameters and share the encoders.
"""

import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor as tz
from . import warp
from .tensor import ShapeError, _require

EMBED_MODES = ("none", "final_to_all", "one_to_one", "final_to_final", "warm_start")
EMBED_SPLATS = ("average", "softmax")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 48
    context_dim: int = 24
    hidden_dim: int = 40
    iters: int = 3
    pyramid_levels: int = 4
    radius: int = 3
    downsample: int = 4
    embed_mode: str = "final_to_all"
    embed_splat: str = "average"
    # motion encoder branch widths; +2 raw flow channels ride along the output
    mot_corr: tuple = (40, 24)
    mot_flow: tuple = (16, 12)
    mot_merge: int = 30
    flow_head: int = 64
    mask_head: int = 64

    def __post_init__(self):
        if self.pyramid_levels != 4:
            raise ValueError("pyramid levels are fixed at 4")
        if self.radius < 1 or self.iters < 1:
            raise ValueError("radius and iters must be >= 1")
        if self.downsample not in (4, 8):
            raise ValueError(f"downsample factor {self.downsample} not in (4, 8)")
        if self.embed_mode not in EMBED_MODES:
            raise ValueError(f"unknown embed mode {self.embed_mode!r}")
        if self.embed_splat not in EMBED_SPLATS:
            raise ValueError(f"unknown embed splat {self.embed_splat!r}")

    @property
    def cm(self):
        """Motion feature channels including the verbatim flow pair."""
        return self.mot_merge + 2

    @property
    def corr_channels(self):
        return self.pyramid_levels * (2 * self.radius + 1) ** 2


# ---------------------------------------------------------------------------
# parameters

def _encoder_widths(cfg):
    stages = int(round(math.log2(cfg.downsample)))
    lo, hi = cfg.feature_dim // 2, cfg.feature_dim - 8
    if stages == 1:
        return [hi]
    return [lo + round(i * (hi - lo) / (stages - 1)) for i in range(stages)]


def param_shapes(cfg):
    """Every parameter name with its shape; the single source of truth."""
    shapes = {}

    def conv(name, cout, cin, k):
        shapes[name + ".w"] = (cout, cin, k, k)
        shapes[name + ".b"] = (cout,)

    widths = _encoder_widths(cfg)
    for pre, out_dim in (("enc", cfg.feature_dim),
                         ("cenc", cfg.hidden_dim + cfg.context_dim)):
        cin = 3
        for i, wd in enumerate(widths):
            conv(f"{pre}.s{i + 1}", wd, cin, 7 if i == 0 else 3)
            conv(f"{pre}.r{i + 1}a", wd, wd, 3)
            conv(f"{pre}.r{i + 1}b", wd, wd, 3)
            cin = wd
        conv(f"{pre}.proj", out_dim, cin, 1)

    mc1, mc2 = cfg.mot_corr
    mf1, mf2 = cfg.mot_flow
    for p in ("two", "multi"):
        conv(f"{p}.mot.corr1", mc1, cfg.corr_channels, 1)
        conv(f"{p}.mot.corr2", mc2, mc1, 3)
        conv(f"{p}.mot.flow1", mf1, 2, 7)
        conv(f"{p}.mot.flow2", mf2, mf1, 3)
        conv(f"{p}.mot.merge", cfg.mot_merge, mc2 + mf2, 3)
        xch = cfg.cm + cfg.context_dim
        if p == "multi":
            xch += cfg.cm + 1  # aligned feature plus its validity mask
        conv(f"{p}.gru.z", cfg.hidden_dim, cfg.hidden_dim + xch, 3)
        conv(f"{p}.gru.r", cfg.hidden_dim, cfg.hidden_dim + xch, 3)
        conv(f"{p}.gru.h", cfg.hidden_dim, cfg.hidden_dim + xch, 3)
        conv(f"{p}.flow1", cfg.flow_head, cfg.hidden_dim, 3)
        conv(f"{p}.flow2", 2, cfg.flow_head, 3)
        conv(f"{p}.mask1", cfg.mask_head, cfg.hidden_dim, 3)
        conv(f"{p}.mask2", 9 * cfg.downsample ** 2, cfg.mask_head, 1)
    shapes["multi.alpha"] = (1,)
    return shapes


def init_params(cfg, seed=0):
    """He fan-in weights, zero biases, alpha 1; each tensor drawn from its own
    name-keyed stream so shared names are bitwise-equal across configs.

    The flow/mask output projections start at zero so the untrained model is
    exactly the zero-flow predictor under smooth upsampling; the residual
    updates then learn structure instead of first unlearning noise."""
    out = {}
    for name, shape in param_shapes(cfg).items():
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
        if name == "multi.alpha":
            out[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".b") or name in ("two.flow2.w", "multi.flow2.w",
                                             "two.mask2.w", "multi.mask2.w"):
            out[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = math.sqrt(2.0 / fan_in)
            out[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return out


def load_params(tape, params, trainable=True):
    """Put an ndarray parameter dict on a tape; consts for inference."""
    if trainable:
        return {k: tape.leaf(v, name=k) for k, v in params.items()}
    return {k: tape.const(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# encoders

def _conv(P, name, x, stride=1, pad=0):
    return ad.conv2d(x, P[name + ".w"], P[name + ".b"], stride=stride, pad=pad)


def _resblock(P, name, x):
    y = ad.relu(_conv(P, name + "a", x, pad=1))
    y = _conv(P, name + "b", y, pad=1)
    return ad.relu(ad.add(x, y))


def _encode(image, P, cfg, pre):
    h0, w0 = image.shape[-2:]
    f = cfg.downsample
    _require(h0 % f == 0 and w0 % f == 0,
             f"image extent {h0}x{w0} not divisible by downsample factor {f}")
    x = image
    for i in range(len(_encoder_widths(cfg))):
        k = 7 if i == 0 else 3
        x = ad.relu(_conv(P, f"{pre}.s{i + 1}", x, stride=2, pad=k // 2))
        x = _resblock(P, f"{pre}.r{i + 1}", x)
    return _conv(P, f"{pre}.proj", x)


def encode_features(image, P, cfg):
    """[B,3,H0,W0] -> [B,D,H0/f,W0/f]."""
    return _encode(image, P, cfg, "enc")


def encode_context(image, P, cfg):
    """Initial GRU hidden state (tanh) and static context (relu)."""
    both = _encode(image, P, cfg, "cenc")
    h = ad.tanh(ad.slice_channels(both, 0, cfg.hidden_dim))
    ctx = ad.relu(ad.slice_channels(both, cfg.hidden_dim,
                                    cfg.hidden_dim + cfg.context_dim))
    return h, ctx


# ---------------------------------------------------------------------------
# correlation

def corr_volume_op(f1, f2):
    """All-pairs similarity [B, H*W, H, W]: entry (p,q) = <f1(p), f2(q)>/sqrt(D)."""
    _require(f1.shape == f2.shape,
             f"feature shapes differ: {f1.shape} vs {f2.shape}")
    b, d, h, w = f1.shape
    scale = 1.0 / math.sqrt(d)
    a = f1.val.reshape(b, d, h * w)
    c = f2.val.reshape(b, d, h * w)
    vol = np.matmul(a.transpose(0, 2, 1), c) * scale

    def vjp(g, needs):
        gm = g.reshape(b, h * w, h * w)
        da = dc = None
        if needs[0]:
            da = (np.matmul(gm, c.transpose(0, 2, 1)).transpose(0, 2, 1)
                  * scale).reshape(f1.shape)
        if needs[1]:
            dc = (np.matmul(a, gm) * scale).reshape(f1.shape)
        return da, dc

    return f1.tape.apply(vol.reshape(b, h * w, h, w), (f1, f2), vjp, "corr_volume")


def build_correlation_pyramid(f1, f2, levels=4):
    """Level 0 all-pairs volume, then 2x target-plane pooling per level."""
    h, w = f1.shape[-2:]
    div = 2 ** (levels - 1)
    _require(h % div == 0 and w % div == 0,
             f"feature extent {h}x{w} not divisible by {div}")
    pyr = [corr_volume_op(f1, f2)]
    for _ in range(levels - 1):
        pyr.append(ad.avg_pool2d(pyr[-1], 2))
    return pyr


def lookup_correlation(pyr, flow, r):
    """Sample each pyramid level on a (2r+1)^2 grid around the flow target.

    Returns [B, levels*(2r+1)^2, H, W]; channels are level-major, then the
    tap grid in row-major (dy, dx) order. Out-of-plane reads are zero. The
    flow gradient picks up the 1/2^level coordinate scaling of each level.
    """
    flow_v = flow.val
    b, _, h, w = flow_v.shape
    _require(pyr[0].shape == (b, h * w, h, w),
             f"pyramid plane count {pyr[0].shape} does not match flow {flow_v.shape}")
    t_side = 2 * r + 1
    t = t_side * t_side
    offs = np.arange(-r, r + 1, dtype=flow_v.dtype)
    offy = np.repeat(offs, t_side)[None, :, None]   # [1,T,1]
    offx = np.tile(offs, t_side)[None, :, None]
    gx = np.arange(w, dtype=flow_v.dtype)[None, :]
    gy = np.arange(h, dtype=flow_v.dtype)[:, None]
    px_pix = (gx + flow_v[:, 0]).reshape(b, 1, h * w)  # target x per source pixel
    py_pix = (gy + flow_v[:, 1]).reshape(b, 1, h * w)

    corner_x = np.array([0, 1, 0, 1])[:, None, None, None]
    corner_y = np.array([0, 0, 1, 1])[:, None, None, None]
    outs = []
    saved = []
    for lvl, level in enumerate(pyr):
        s = float(2 ** lvl)
        hl, wl = level.shape[-2:]
        cx = px_pix / s + offx  # [B,T,P]
        cy = py_pix / s + offy
        x0 = np.floor(cx)
        y0 = np.floor(cy)
        fx = cx - x0
        fy = cy - y0
        ix = x0.astype(np.int64)[None] + corner_x  # [4,B,T,P]
        iy = y0.astype(np.int64)[None] + corner_y
        inb = (ix >= 0) & (ix < wl) & (iy >= 0) & (iy < hl)
        flat = np.clip(iy, 0, hl - 1) * wl + np.clip(ix, 0, wl - 1)
        lv = level.val.reshape(b, h * w, hl * wl)
        idx = flat.transpose(1, 3, 0, 2).reshape(b, h * w, 4 * t)
        vals = (np.take_along_axis(lv, idx, axis=2)
                .reshape(b, h * w, 4, t).transpose(2, 0, 3, 1))
        vals = np.where(inb, vals, 0.0)
        wx = np.stack([1.0 - fx, fx])  # [2,B,T,P]
        wy = np.stack([1.0 - fy, fy])
        wc = np.stack([wx[0] * wy[0], wx[1] * wy[0], wx[0] * wy[1], wx[1] * wy[1]])
        outs.append((wc * vals).sum(axis=0).reshape(b, t, h, w))
        saved.append((s, hl, wl, vals, inb, flat, wx, wy, wc))

    def vjp(g, needs):
        dlevels = [None] * len(pyr)
        du = np.zeros((b, h * w), dtype=flow_v.dtype)
        dv = np.zeros((b, h * w), dtype=flow_v.dtype)
        need_flow = needs[-1]
        for lvl in range(len(pyr)):
            if not (needs[lvl] or need_flow):
                continue
            s, hl, wl, vals, inb, flat, wx, wy, wc = saved[lvl]
            gl = g[:, lvl * t:(lvl + 1) * t].reshape(b, t, h * w)
            if needs[lvl]:
                size = b * h * w * hl * wl
                base = (np.arange(b)[:, None, None] * (h * w)
                        + np.arange(h * w)[None, None, :]) * (hl * wl)
                acc = np.bincount((base[None] + flat).ravel(),
                                  weights=(wc * inb * gl[None]).ravel(),
                                  minlength=size)
                dlevels[lvl] = acc.reshape(b, h * w, hl, wl).astype(flow_v.dtype)
            if need_flow:
                dcx = (wy[0] * (vals[1] - vals[0]) + wy[1] * (vals[3] - vals[2]))
                dcy = (wx[0] * (vals[2] - vals[0]) + wx[1] * (vals[3] - vals[1]))
                du += ((dcx * gl).sum(axis=1)) / s
                dv += ((dcy * gl).sum(axis=1)) / s
        dflow = None
        if need_flow:
            dflow = np.stack([du.reshape(b, h, w), dv.reshape(b, h, w)], axis=1)
        return tuple(dlevels) + (dflow,)

    out_all = np.concatenate(outs, axis=1)
    return flow.tape.apply(out_all, tuple(pyr) + (flow,), vjp, "lookup_correlation")


# ---------------------------------------------------------------------------
# predictor blocks

def encode_motion_feature(corr, flow, P, prefix):
    """(correlation taps, current flow) -> motion feature with the raw flow
    appended verbatim as the last two channels."""
    c = ad.relu(_conv(P, f"{prefix}.mot.corr1", corr))
    c = ad.relu(_conv(P, f"{prefix}.mot.corr2", c, pad=1))
    f = ad.relu(_conv(P, f"{prefix}.mot.flow1", flow, pad=3))
    f = ad.relu(_conv(P, f"{prefix}.mot.flow2", f, pad=1))
    m = ad.relu(_conv(P, f"{prefix}.mot.merge",
                      ad.concat_channels([c, f]), pad=1))
    return ad.concat_channels([m, flow])


def gru_update(h, x, P, prefix):
    """h' = (1-z) h + z tanh(Conv([r h, x])) with z, r from Conv([h, x])."""
    hx = ad.concat_channels([h, x])
    z = ad.sigmoid(_conv(P, f"{prefix}.gru.z", hx, pad=1))
    rr = ad.sigmoid(_conv(P, f"{prefix}.gru.r", hx, pad=1))
    cand = ad.tanh(_conv(P, f"{prefix}.gru.h",
                         ad.concat_channels([ad.mul(rr, h), x]), pad=1))
    return ad.add(ad.mul(ad.rsub_const(1.0, z), h), ad.mul(z, cand))


def _flow_head(h, P, prefix):
    return _conv(P, f"{prefix}.flow2",
                 ad.relu(_conv(P, f"{prefix}.flow1", h, pad=1)), pad=1)


def _mask_head(h, P, prefix):
    return _conv(P, f"{prefix}.mask2",
                 ad.relu(_conv(P, f"{prefix}.mask1", h, pad=1)))


def convex_upsample(flow, logits, f):
    """Fine flow as convex combinations of the coarse 3x3 neighborhood.

    logits [B,9*f*f,H,W]: per coarse pixel, 9 weights for each of the f*f
    sub-positions (softmaxed over the 9); output is scaled by f for the unit
    change from coarse to fine pixels. Border neighborhoods clamp to the
    image, so a constant field upsamples to the same constant times f.
    """
    b, c2, h, w = flow.shape
    _require(c2 == 2, f"flow channels: got {c2}, expected 2")
    _require(logits.shape == (b, 9 * f * f, h, w),
             f"logit shape {logits.shape}, expected {(b, 9 * f * f, h, w)}")
    lg = logits.val.reshape(b, 9, f * f, h, w)
    m = lg.max(axis=1, keepdims=True)
    e = np.exp(lg - m)
    wn = e / e.sum(axis=1, keepdims=True)          # [B,9,S,H,W]
    padded = np.pad(flow.val, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    nb = win.reshape(b, 2, h, w, 9).transpose(0, 1, 4, 2, 3)  # [B,2,9,H,W]
    fine = np.einsum("bkshw,bckhw->bcshw", wn, nb) * f

    def vjp(g, needs):
        gs = (g.reshape(b, 2, h, f, w, f).transpose(0, 1, 3, 5, 2, 4)
              .reshape(b, 2, f * f, h, w))
        dflow = dlogits = None
        if needs[0]:
            dnb = np.einsum("bkshw,bcshw->bckhw", wn, gs) * f
            acc = np.zeros((b, 2, h + 2, w + 2), dtype=g.dtype)
            for k in range(9):
                dy, dx = divmod(k, 3)
                acc[:, :, dy:dy + h, dx:dx + w] += dnb[:, :, k]
            # fold the replicated border rows/columns back onto their sources
            acc[:, :, 1] += acc[:, :, 0]
            acc[:, :, h] += acc[:, :, h + 1]
            acc[:, :, :, 1] += acc[:, :, :, 0]
            acc[:, :, :, w] += acc[:, :, :, w + 1]
            dflow = acc[:, :, 1:1 + h, 1:1 + w]
        if needs[1]:
            ds = np.einsum("bckhw,bcshw->bkshw", nb, gs) * f
            dlg = wn * (ds - (ds * wn).sum(axis=1, keepdims=True))
            dlogits = dlg.reshape(b, 9 * f * f, h, w)
        return dflow, dlogits

    out = (fine.reshape(b, 2, f, f, h, w).transpose(0, 1, 4, 2, 5, 3)
           .reshape(b, 2, h * f, w * f))
    return flow.tape.apply(out, (flow, logits), vjp, "convex_upsample")


# ---------------------------------------------------------------------------
# iterative estimation

def _aligned_feature(mf, flow_low, feat_prev, feat_cur, P, cfg):
    """Forward-splat a motion feature along its flow; mask channel appended."""
    if cfg.embed_splat == "softmax":
        z = warp.importance_z_op(feat_prev, feat_cur, flow_low, P["multi.alpha"])
        a, mask = warp.splat_op(mf, flow_low, "softmax", z=z)
    else:
        a, mask = warp.splat_op(mf, flow_low, "average")
    return ad.concat_channels([a, mf.tape.const(mask)])


def _run_pair(pyr, h, ctx, P, cfg, prefix, iters, embeds=None, init_flow=None):
    """The n-iteration refinement loop for one frame pair.

    embeds: optional per-iteration aligned feature Vars (multi predictor).
    Returns per-iteration upsampled flows, motion features (each encoded from
    the pre-update flow) and post-update low-resolution flows.
    """
    tape = ctx.tape
    b, _, hh, ww = ctx.shape
    o = init_flow
    if o is None:
        o = tape.const(np.zeros((b, 2, hh, ww), dtype=ctx.val.dtype))
    ups, mfs, lows = [], [], []
    for i in range(iters):
        corr = lookup_correlation(pyr, o, cfg.radius)
        mf = encode_motion_feature(corr, o, P, prefix)
        parts = [mf, ctx]
        if embeds is not None:
            parts.append(embeds[i])
        h = gru_update(h, ad.concat_channels(parts), P, prefix)
        o = ad.add(o, _flow_head(h, P, prefix))
        ups.append(convex_upsample(o, _mask_head(h, P, prefix), cfg.downsample))
        mfs.append(mf)
        lows.append(o)
    return ups, mfs, lows


def estimate_two_frame(img_t, img_t1, cfg, P, iters=None):
    """Flow from zero initialization with the reserved two-frame predictor.

    Returns (per-iteration upsampled flows, final motion feature, final
    low-resolution flow).
    """
    _require(img_t.shape == img_t1.shape,
             f"frame shapes differ: {img_t.shape} vs {img_t1.shape}")
    iters = cfg.iters if iters is None else iters
    f1 = encode_features(img_t, P, cfg)
    f2 = encode_features(img_t1, P, cfg)
    pyr = build_correlation_pyramid(f1, f2, cfg.pyramid_levels)
    h, ctx = encode_context(img_t, P, cfg)
    ups, mfs, lows = _run_pair(pyr, h, ctx, P, cfg, "two", iters)
    return ups, mfs[-1], lows[-1]


def estimate_sequence(frames, cfg, P, iters=None, all_iterations=False):
    """Flow for every consecutive pair with mode-dependent history hand-off.

    The first pair always runs the reserved two-frame predictor. Under the
    embedding modes each later pair runs the multi predictor and consumes the
    previous pair's motion feature splatted along its final (or per-iteration)
    flow; warm_start instead splats the previous flow as initialization.
    Returns one upsampled flow per pair, or the full per-iteration list per
    pair with all_iterations.
    """
    if len(frames) < 2:
        raise ValueError(f"need at least 2 frames, got {len(frames)}")
    iters = cfg.iters if iters is None else iters
    feats = [encode_features(f, P, cfg) for f in frames]
    results = []
    prev = None  # previous pair's (motion features, low-res flows)
    for t in range(len(frames) - 1):
        pyr = build_correlation_pyramid(feats[t], feats[t + 1], cfg.pyramid_levels)
        h, ctx = encode_context(frames[t], P, cfg)
        first = prev is None
        mode = cfg.embed_mode
        if first or mode == "none":
            ups, mfs, lows = _run_pair(pyr, h, ctx, P, cfg, "two", iters)
        elif mode == "warm_start":
            init, _ = warp.splat_op(prev[1][-1], prev[1][-1], "average")
            ups, mfs, lows = _run_pair(pyr, h, ctx, P, cfg, "two", iters,
                                       init_flow=init)
        else:
            pmfs, plows = prev
            if mode == "final_to_all":
                a = _aligned_feature(pmfs[-1], plows[-1], feats[t - 1], feats[t],
                                     P, cfg)
                embeds = [a] * iters
            elif mode == "one_to_one":
                _require(len(pmfs) >= iters,
                         f"one_to_one needs {iters} stored iterations, have {len(pmfs)}")
                embeds = [_aligned_feature(pmfs[i], plows[i], feats[t - 1],
                                           feats[t], P, cfg)
                          for i in range(iters)]
            else:  # final_to_final: blank embedding until the last iteration
                b, _, hh, ww = ctx.shape
                blank = ctx.tape.const(
                    np.zeros((b, cfg.cm + 1, hh, ww), dtype=ctx.val.dtype))
                a = _aligned_feature(pmfs[-1], plows[-1], feats[t - 1], feats[t],
                                     P, cfg)
                embeds = [blank] * (iters - 1) + [a]
            ups, mfs, lows = _run_pair(pyr, h, ctx, P, cfg, "multi", iters,
                                       embeds=embeds)
        prev = (mfs, lows)
        results.append(ups if all_iterations else ups[-1])
    return results


# ---------------------------------------------------------------------------
# loss

@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.85
    first_frame: bool = True

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma {self.gamma} outside (0, 1]")


def sequence_loss(preds_prev, preds_cur, gt_prev, gt_cur, cfg: LossConfig):
    """Exponentially weighted L1 over iterations, late iterations weighted up.

    L = sum_i gamma^(n-i) mean|gt_prev - preds_prev[i]|
      + sum_i gamma^(n-i) mean|gt_cur - preds_cur[i]| (i is 1-based);
    with first-frame supervision off only the second sum contributes.
    """
    n = len(preds_cur)
    if cfg.first_frame and len(preds_prev) != n:
        raise ValueError(
            f"prediction lengths differ: {len(preds_prev)} vs {n}")
    tape = preds_cur[0].tape

    def weighted(preds, gt):
        g = tape.const(np.asarray(gt))
        total = None
        for i, p in enumerate(preds):
            term = ad.scale(ad.l1_mean(p, g), cfg.gamma ** (n - 1 - i))
            total = term if total is None else ad.add(total, term)
        return total

    loss = weighted(preds_cur, gt_cur)
    if cfg.first_frame:
        loss = ad.add(loss, weighted(preds_prev, gt_prev))
    return loss
