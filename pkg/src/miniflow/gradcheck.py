"""Finite-difference verification battery for the differentiable operators.

Each named check draws fresh random instances per seed, runs
finite_diff_check (double precision, central differences), and reports the
worst relative error over all seeds. Instances are constructed away from the
non-differentiable points of their ops: flows stay interior with sampling
fractions clear of the bilinear floor kinks, and splat targets keep their
aggregate weight far above the hole threshold.

The sequence_loss entry differentiates the whole estimator, loss included,
on 16x16 feature maps (64x64 frames): three frames through the multi-frame
path with softmax splat embedding, so the splat, the importance weighting
(alpha included) and both predictors sit in one graph. It is measured as a
joint directional derivative (every parameter and frame perturbed along one
random tangent), which keeps two loss evaluations per seed and projects any
wrong cotangent in the graph onto the measured number. A reduced-width config
keeps the instance cheap; widths do not change which adjoints compose.
"""

import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import flowcore as fc
from . import warp

_HW = (5, 6)


def _weighted_sum(tape, out, key):
    w = tape.const(np.random.default_rng(key).standard_normal(out.shape))
    return ad.sum_all(ad.mul(out, w))


def _bilinear_sample(rng):
    point = {"values": rng.standard_normal((1, 3) + _HW),
             "flow": warp.interior_flow(rng, *_HW)}

    def build(tape, leaves):
        out, _ = warp.sample_op(leaves["values"], leaves["flow"])
        return _weighted_sum(tape, out, 0)

    return build, point, None


def _splat(mode):
    def make(rng):
        point = {"values": rng.standard_normal((1, 3) + _HW),
                 "flow": warp.interior_flow(rng, *_HW)}

        def build(tape, leaves):
            out, _ = warp.splat_op(leaves["values"], leaves["flow"], mode)
            return _weighted_sum(tape, out, 1)

        # average-mode normalization leaves some coordinates with gradients
        # at the fd noise floor; measure the ones that carry signal
        return build, point, 16 if mode == "average" else None

    return make


def _splat_softmax(rng):
    point = {"values": rng.standard_normal((1, 3) + _HW),
             "fprev": rng.standard_normal((1, 4) + _HW),
             "fcur": rng.standard_normal((1, 4) + _HW),
             "flow": warp.interior_flow(rng, *_HW),
             "alpha": np.array([0.7 + 0.6 * rng.random()])}

    def build(tape, leaves):
        z = warp.importance_z_op(leaves["fprev"], leaves["fcur"],
                                 leaves["flow"], leaves["alpha"])
        out, _ = warp.splat_op(leaves["values"], leaves["flow"],
                               "softmax", z=z)
        return _weighted_sum(tape, out, 2)

    # sampled: the tiniest coordinates of this chain sit at the fd noise floor
    return build, point, 16


def _conv2d(rng):
    stride = int(rng.integers(1, 3))  # both input-gradient paths over seeds
    point = {"x": rng.standard_normal((1, 3, 6, 7)),
             "w": rng.standard_normal((4, 3, 3, 3)) * 0.5,
             "b": rng.standard_normal(4) * 0.2}

    def build(tape, leaves):
        out = ad.conv2d(leaves["x"], leaves["w"], leaves["b"],
                        stride=stride, pad=1)
        return _weighted_sum(tape, out, 3)

    return build, point, None


def _gru_update(rng):
    hidden, xch, hw = 2, 3, 4
    point = {"h": rng.standard_normal((1, hidden, hw, hw)) * 0.8,
             "x": rng.standard_normal((1, xch, hw, hw))}
    for gate in ("z", "r", "h"):
        point[f"g.gru.{gate}.w"] = (
            rng.standard_normal((hidden, hidden + xch, 3, 3)) * 0.4)
        point[f"g.gru.{gate}.b"] = rng.standard_normal(hidden) * 0.2

    def build(tape, leaves):
        out = fc.gru_update(leaves["h"], leaves["x"], leaves, "g")
        return _weighted_sum(tape, out, 4)

    return build, point, 16


def _kink_safe_flow(rng, h, w, margin=0.02, span=3.0):
    """Flow whose sampling fraction stays clear of integers at all 4 levels."""
    gx, gy = np.meshgrid(np.arange(w, dtype=float),
                         np.arange(h, dtype=float), indexing="xy")
    flow = np.empty((1, 2, h, w))
    for c, grid in ((0, gx), (1, gy)):
        vals = np.zeros((h, w))
        todo = np.ones((h, w), bool)
        while todo.any():
            cand = rng.uniform(-span, span, size=(h, w))
            ok = np.ones((h, w), bool)
            for lvl in range(4):
                fr = ((grid + cand) / 2 ** lvl) % 1.0
                ok &= (fr > margin) & (fr < 1.0 - margin)
            vals = np.where(todo & ok, cand, vals)
            todo &= ~ok
        flow[0, c] = vals
    return flow


def _lookup_correlation(rng):
    h = w = 8
    point = {f"lv{i}": rng.standard_normal((1, h * w, h >> i, w >> i))
             for i in range(4)}
    point["flow"] = _kink_safe_flow(rng, h, w)

    def build(tape, leaves):
        pyr = [leaves[f"lv{i}"] for i in range(4)]
        out = fc.lookup_correlation(pyr, leaves["flow"], 2)
        return _weighted_sum(tape, out, 5)

    return build, point, 4


def _convex_upsample(rng):
    point = {"flow": rng.standard_normal((1, 2, 3, 4)),
             "logits": rng.standard_normal((1, 9 * 4, 3, 4))}

    def build(tape, leaves):
        out = fc.convex_upsample(leaves["flow"], leaves["logits"], 2)
        return _weighted_sum(tape, out, 6)

    return build, point, 16


_E2E_CFG = fc.ModelConfig(feature_dim=16, context_dim=6, hidden_dim=8,
                          iters=2, radius=1, embed_splat="softmax",
                          mot_corr=(8, 6), mot_flow=(6, 4), mot_merge=8,
                          flow_head=8, mask_head=8)


def _sequence_loss_e2e(rng):
    cfg = _E2E_CFG
    point = {k: v.astype(np.float64)
             for k, v in fc.init_params(cfg, seed=int(rng.integers(1 << 30))).items()}
    for name, v in point.items():
        # zero biases put the first iteration's flow-branch preactivations
        # exactly on the relu kink (the flow starts at zero); a generic
        # position keeps every kink clear of the evaluation point
        if name.endswith(".b"):
            point[name] = rng.standard_normal(v.shape) * 0.1
    for i in range(3):
        point[f"frame{i}"] = rng.standard_normal((1, 3, 64, 64)) * 0.5
    gts = [rng.standard_normal((1, 2, 64, 64)) for _ in range(2)]

    def build(tape, leaves):
        frames = [leaves[f"frame{i}"] for i in range(3)]
        res = fc.estimate_sequence(frames, cfg, leaves, all_iterations=True)
        return fc.sequence_loss(res[0], res[1], gts[0], gts[1],
                                fc.LossConfig())

    return build, point, "joint"


BATTERY = {
    "bilinear_sample": _bilinear_sample,
    "splat_summation": _splat("summation"),
    "splat_average": _splat("average"),
    "splat_softmax": _splat_softmax,
    "conv2d": _conv2d,
    "gru_update": _gru_update,
    "lookup_correlation": _lookup_correlation,
    "convex_upsample": _convex_upsample,
    "sequence_loss": _sequence_loss_e2e,
}


@dataclass
class CheckResult:
    name: str
    seeds: int
    max_err: float
    seconds: float

    def line(self, tol):
        word = "pass" if self.max_err <= tol else "FAIL"
        return (f"{word}  {self.name:<20s} max_rel_err={self.max_err:.3e}"
                f"  seeds={self.seeds}  {self.seconds:.2f}s")


def run_check(name, seeds=20, h=1.0e-6):
    make = BATTERY[name]
    start = time.perf_counter()
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(
            np.random.SeedSequence([zlib.crc32(name.encode()), seed]))
        build, point, sample = make(rng)
        if sample == "joint":
            err = ad.finite_diff_direction(build, point, h=h, seed=seed)
        else:
            err = ad.finite_diff_check(build, point, h=h, sample=sample)
        worst = max(worst, err)
    return CheckResult(name, seeds, worst, time.perf_counter() - start)


def run_battery(names=None, seeds=20, h=1.0e-6):
    if names:
        unknown = [n for n in names if n not in BATTERY]
        if unknown:
            raise KeyError(f"unknown checks: {unknown}")
    return [run_check(n, seeds, h) for n in (names or BATTERY)]
