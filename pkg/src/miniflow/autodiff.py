"""Reverse-mode tape over the closed op set, plus the training optimizer.

A Tape records an append-only list of nodes; each node keeps references to its
parent nodes and a hand-derived vector-Jacobian closure. Leaves may be named,
which registers them as parameters. backward() walks the node list once in
reverse with serial, ordered accumulation, so repeated backward passes over
the same tape are bitwise identical.

Taped ops are free functions on Var operands (the tape is implicit in the
operands). Gradients that are not needed are not computed: each vjp receives a
`needs` tuple aligned with its parents.
"""

import math
import struct

import numpy as np

from . import tensor as tz


class NumericalError(ArithmeticError):
    """Non-finite value produced where the contract requires finiteness."""


class Var:
    """A node handle on a tape. `val` is the forward value (ndarray)."""

    __slots__ = ("tape", "idx", "val")

    def __init__(self, tape, idx, val):
        self.tape = tape
        self.idx = idx
        self.val = val

    @property
    def shape(self):
        return self.val.shape

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


class _Node:
    __slots__ = ("parents", "vjp", "req", "name")

    def __init__(self, parents, vjp, req, name):
        self.parents = parents
        self.vjp = vjp
        self.req = req
        self.name = name


class Tape:
    def __init__(self, check_finite=False):
        self.nodes = []
        self.params = {}  # name -> Var
        self.check_finite = check_finite

    def leaf(self, value, name=None, trainable=None):
        value = np.asarray(value)
        if trainable is None:
            trainable = name is not None
        v = Var(self, len(self.nodes), value)
        self.nodes.append(_Node((), None, trainable, name or "leaf"))
        if name is not None:
            if name in self.params:
                raise ValueError(f"duplicate parameter name {name!r}")
            self.params[name] = v
        return v

    def const(self, value):
        return self.leaf(value, trainable=False)

    def apply(self, value, parents, vjp, name):
        value = np.asarray(value)
        if self.check_finite and not np.isfinite(value).all():
            raise NumericalError(f"non-finite output of op {name!r}")
        req = any(self.nodes[p.idx].req for p in parents)
        v = Var(self, len(self.nodes), value)
        self.nodes.append(_Node(tuple(p.idx for p in parents), vjp if req else None,
                                req, name))
        return v

    def backward(self, loss):
        """Gradients of a scalar loss w.r.t. every registered parameter.

        Unreached parameters get zero gradients of matching shape.
        """
        if loss.val.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.val.shape}")
        grads = [None] * len(self.nodes)
        grads[loss.idx] = np.ones_like(loss.val)
        leaf_grads = {}
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            grads[i] = None  # free as we go
            if g is None or not node.req:
                continue
            if node.vjp is None:
                # a leaf; all consumers have higher indices so g is complete
                leaf_grads[i] = g
                continue
            needs = tuple(self.nodes[p].req for p in node.parents)
            pgrads = node.vjp(g, needs)
            for pidx, pg in zip(node.parents, pgrads):
                if pg is None or not self.nodes[pidx].req:
                    continue
                if grads[pidx] is None:
                    grads[pidx] = pg
                else:
                    grads[pidx] = grads[pidx] + pg
        out = {}
        for name, v in self.params.items():
            g = leaf_grads.get(v.idx)
            out[name] = g if g is not None else np.zeros_like(v.val)
        return out


# ---------------------------------------------------------------------------
# taped ops: tensor primitives

def conv2d(x, w, b, stride=1, pad=0):
    """Taped convolution on [B,Cin,H,W] (or [Cin,H,W], auto-batched)."""
    unbatched = x.val.ndim == 3
    xv = x.val[None] if unbatched else x.val
    out, cols = tz.conv2d_b(xv, w.val, b.val if b is not None else None, stride, pad)
    in_hw = xv.shape[2:]
    wval = w.val

    def vjp(g, needs):
        if unbatched:
            g = g[None]
        dx = tz.conv2d_input_grad(g, wval, stride, pad, in_hw) if needs[0] else None
        dw = tz.conv2d_weight_grad(cols, g, wval.shape) if needs[1] else None
        db = g.sum(axis=(0, 2, 3)) if len(needs) > 2 and needs[2] else None
        if unbatched and dx is not None:
            dx = dx[0]
        return (dx, dw, db) if len(needs) > 2 else (dx, dw)

    parents = (x, w) if b is None else (x, w, b)
    return x.tape.apply(out[0] if unbatched else out, parents, vjp, "conv2d")


def avg_pool2d(x, k):
    unbatched = x.val.ndim == 3
    xv = x.val[None] if unbatched else x.val
    out = tz.avg_pool2d_b(xv, k)

    def vjp(g, needs):
        if unbatched:
            g = g[None]
        dx = tz.avg_pool2d_grad(g, k)
        return (dx[0] if unbatched else dx,)

    return x.tape.apply(out[0] if unbatched else out, (x,), vjp, "avg_pool2d")


def pointwise(x, fn):
    y = tz.pointwise(x.val, fn)
    xv = x.val

    def vjp(g, needs):
        return (g * tz.pointwise_grad(xv, y, fn),)

    return x.tape.apply(y, (x,), vjp, fn)


def sigmoid(x):
    return pointwise(x, "sigmoid")


def tanh(x):
    return pointwise(x, "tanh")


def relu(x):
    return pointwise(x, "relu")


def concat_channels(inputs):
    out = tz.concat_channels([v.val for v in inputs])
    sizes = [v.val.shape[-3] for v in inputs]
    offs = np.cumsum([0] + sizes)

    def vjp(g, needs):
        return tuple(
            g[..., offs[i]:offs[i + 1], :, :] if needs[i] else None
            for i in range(len(sizes)))

    return inputs[0].tape.apply(out, tuple(inputs), vjp, "concat_channels")


def slice_channels(x, a, b):
    xv = x.val
    out = xv[..., a:b, :, :]

    def vjp(g, needs):
        dx = np.zeros_like(xv)
        dx[..., a:b, :, :] = g
        return (dx,)

    return x.tape.apply(out, (x,), vjp, "slice_channels")


def softmax_channel(x):
    y = tz.softmax_channel(x.val)

    def vjp(g, needs):
        dot = (g * y).sum(axis=-3, keepdims=True)
        return (y * (g - dot),)

    return x.tape.apply(y, (x,), vjp, "softmax_channel")


def standardize(x, eps=1.0e-5):
    """Zero-mean, unit-variance per channel over the spatial axes.

    Correlation volumes read feature alignment out of dot products; a shared
    per-channel offset inflates every product by the same amount and buries
    the match signal, so the feature encoder ends by removing it.
    """
    xv = x.val
    mu = xv.mean(axis=(-2, -1), keepdims=True)
    inv = 1.0 / np.sqrt(xv.var(axis=(-2, -1), keepdims=True) + eps)
    y = (xv - mu) * inv

    def vjp(g, needs):
        gm = g.mean(axis=(-2, -1), keepdims=True)
        gy = (g * y).mean(axis=(-2, -1), keepdims=True)
        return (inv * (g - gm - y * gy),)

    return x.tape.apply(y, (x,), vjp, "standardize")


def _same_shape(x, y, op):
    # silent broadcasting would hand mis-shaped cotangents to upstream vjps
    if x.val.shape != y.val.shape:
        raise tz.ShapeError(f"{op}: operand shapes {x.val.shape} and {y.val.shape} differ")


def add(x, y):
    _same_shape(x, y, "add")

    def vjp(g, needs):
        return (g if needs[0] else None, g if needs[1] else None)

    return x.tape.apply(x.val + y.val, (x, y), vjp, "add")


def mul(x, y):
    _same_shape(x, y, "mul")
    xv, yv = x.val, y.val

    def vjp(g, needs):
        return (g * yv if needs[0] else None, g * xv if needs[1] else None)

    return x.tape.apply(xv * yv, (x, y), vjp, "mul")


def scale(x, c):
    """x * c for a python scalar c."""
    def vjp(g, needs):
        return (g * c,)

    return x.tape.apply(x.val * c, (x,), vjp, "scale")


def rsub_const(c, x):
    """c - x for a python scalar c."""
    def vjp(g, needs):
        return (-g,)

    return x.tape.apply(c - x.val, (x,), vjp, "rsub_const")


def smul(a, x):
    """Scalar parameter a (shape (1,) or ()) times tensor x."""
    av, xv = a.val, x.val

    def vjp(g, needs):
        da = np.sum(g * xv).reshape(av.shape) if needs[0] else None
        dx = g * av if needs[1] else None
        return (da, dx)

    return x.tape.apply(av * xv, (a, x), vjp, "smul")


def sum_all(x):
    xv = x.val

    def vjp(g, needs):
        return (np.broadcast_to(g, xv.shape).astype(xv.dtype, copy=False),)

    return x.tape.apply(np.sum(xv), (x,), vjp, "sum_all")


def channel_sum(x):
    """Sum over the channel axis, keepdims; [.., C, H, W] -> [.., 1, H, W]."""
    xv = x.val

    def vjp(g, needs):
        return (np.broadcast_to(g, xv.shape).astype(xv.dtype, copy=False),)

    return x.tape.apply(xv.sum(axis=-3, keepdims=True), (x,), vjp, "channel_sum")


def l1_mean(pred, target):
    """mean |pred - target|; target may be a const Var. Subgradient 0 at ties."""
    d = pred.val - target.val
    n = d.size

    def vjp(g, needs):
        s = np.sign(d) * (g / n)
        return (s if needs[0] else None, -s if needs[1] else None)

    return pred.tape.apply(np.mean(np.abs(d)), (pred, target), vjp, "l1_mean")


# ---------------------------------------------------------------------------
# finite differences

def finite_diff_check(build, point, h=1.0e-6, sample=None, select="largest"):
    """Max relative error between tape gradients and central differences.

    build(tape, vars) must construct a scalar loss Var from the dict of leaf
    Vars created from `point` (name -> float64 ndarray). With sample=None every
    coordinate of every input is checked; an integer checks that many per
    input, selected either as the largest-|gradient| coordinates (default) or
    uniformly ('random'). Largest-first matters for big composite graphs:
    central differences at h=1e-6 carry an absolute noise floor around
    eps*|loss|/h, so coordinates whose true derivative sits below that floor
    are unmeasurable by this method and say nothing about the adjoints.
    Error metric per coordinate: |analytic - fd| / max(|analytic|, |fd|, 1e-7).
    """
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    tape = Tape(check_finite=True)
    leaves = {k: tape.leaf(v.copy(), name=k) for k, v in point.items()}
    loss = build(tape, leaves)
    grads = tape.backward(loss)

    def value_at(pt):
        t = Tape(check_finite=False)  # the first pass already validated
        lv = {k: t.leaf(v.copy(), name=k) for k, v in pt.items()}
        return float(build(t, lv).val)

    rng = np.random.default_rng(0)
    worst = 0.0
    for name, base in point.items():
        flat = base.reshape(-1)
        n = flat.size
        if sample is None or n <= sample:
            coords = range(n)
        elif select == "largest":
            mags = np.abs(grads[name].reshape(-1))
            coords = sorted(np.argsort(mags)[-sample:].tolist())
        else:
            coords = sorted(rng.choice(n, size=sample, replace=False).tolist())
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            up = value_at(point)
            flat[c] = keep - h
            dn = value_at(point)
            flat[c] = keep
            fd = (up - dn) / (2.0 * h)
            an = float(grads[name].reshape(-1)[c])
            err = abs(an - fd) / max(abs(an), abs(fd), 1.0e-7)
            worst = max(worst, err)
    return worst


def finite_diff_direction(build, point, h=1.0e-6, directions=1, seed=0):
    """Directional-derivative check: perturb every input jointly along a
    random tangent and compare the loss difference quotient to the projection
    of the tape gradient onto that tangent.

    Four loss evaluations per direction regardless of input count, which is
    what makes whole-model graphs checkable; a wrong cotangent anywhere in
    the graph changes the projection. The tangent is normalized to unit
    global L2 norm so the perturbation's reach inside the graph stays
    h-sized; an unnormalized tangent over many inputs would move internal
    quantities far enough to cross the piecewise boundaries of the warp ops.
    A tangent concentrated on the largest-gradient coordinates has the same
    problem, which rules out differencing along the gradient itself. The
    quotient uses the fourth-order stencil (+-h, +-2h): composite graphs
    carry third derivatives large enough that the plain central-difference
    truncation term alone exceeds ppm accuracy. Same error metric as
    finite_diff_check.
    """
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    tape = Tape(check_finite=True)
    leaves = {k: tape.leaf(v.copy(), name=k) for k, v in point.items()}
    loss = build(tape, leaves)
    grads = tape.backward(loss)

    def value_at(pt):
        t = Tape(check_finite=False)
        lv = {k: t.leaf(v.copy(), name=k) for k, v in pt.items()}
        return float(build(t, lv).val)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(directions):
        tangent = {k: rng.standard_normal(v.shape) for k, v in point.items()}
        norm = math.sqrt(sum(float(np.vdot(t, t)) for t in tangent.values()))
        tangent = {k: t / norm for k, t in tangent.items()}
        analytic = sum(float(np.vdot(grads[k], tangent[k])) for k in point)

        def at(step):
            return value_at({k: point[k] + step * tangent[k] for k in point})

        fd = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)
        err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1.0e-7)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# optimizer

class OneCycle:
    """Linear warmup to max_rate over the first warmup fraction of steps,
    then linear decay down to max_rate/div. Rates are strictly positive."""

    def __init__(self, max_rate, total_steps, warmup=0.05, div=25.0):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        self.max_rate = float(max_rate)
        self.total = int(total_steps)
        self.warm = max(1, round(self.total * warmup))
        self.lo = self.max_rate / div

    def rate(self, step):
        if not 0 <= step < self.total:
            raise ValueError(f"step {step} outside [0, {self.total})")
        if step < self.warm:
            return self.lo + (self.max_rate - self.lo) * (step + 1) / self.warm
        tail = max(1, self.total - self.warm)
        return self.max_rate + (self.lo - self.max_rate) * (step - self.warm + 1) / tail


class AdamW:
    """Decoupled weight decay Adam with bias-corrected moments."""

    def __init__(self, params, schedule, beta1=0.9, beta2=0.999,
                 eps=1.0e-8, weight_decay=0.0):
        self.params = params  # name -> ndarray, updated in place
        self.schedule = schedule
        self.b1, self.b2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        lr = self.schedule.rate(self.t)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(
                    f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p -= lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p)


def clip_grad_norm(grads, max_norm):
    """Scales the gradient dict in place so its global L2 norm is <= max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm:
        s = np.float32(max_norm / norm)
        for g in grads.values():
            g *= s
    return norm


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"SPLATCKPT1"


def save_checkpoint(path, params):
    """Flat binary container; parameters written in sorted-name order."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        for name in sorted(params):
            data = np.ascontiguousarray(params[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic in {path}")
    pos = len(CKPT_MAGIC)
    out = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            out[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as e:
        raise ValueError(f"truncated or corrupt checkpoint {path}: {e}") from e
    if pos != len(blob):
        raise ValueError(f"trailing bytes in checkpoint {path}")
    return out
