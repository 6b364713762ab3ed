"""Toy training loop and evaluation harness for the occlusion experiment.

Training samples random crops of pre-rendered sequences and optimizes the
exponentially weighted sequence loss with AdamW under a one-cycle schedule.
Everything is single-threaded and seed-keyed, so a (dataset, config, seed)
triple always produces a bitwise-identical parameter trajectory.
"""

from dataclasses import dataclass
import zlib

import numpy as np

from . import autodiff as ad
from . import flowcore as fc
from . import metrics


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    crop: int = 32
    max_rate: float = 2.0e-4
    weight_decay: float = 1.0e-5
    clip: float = 1.0
    gamma: float = 0.85
    seed: int = 0

    def validate(self, model_cfg):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.crop % model_cfg.downsample != 0:
            raise ValueError(
                f"crop {self.crop} not divisible by downsample {model_cfg.downsample}")


def sample_batch(rng, seqs, batch, crop):
    """Random (sequence, window) crops; returns (frames per time, gt per pair).

    Draw order per item is fixed (index, y0, x0) so the stream is part of
    the determinism contract.
    """
    k = seqs[0].frames.shape[0]
    frames = [[] for _ in range(k)]
    gts = [[] for _ in range(k - 1)]
    for _ in range(batch):
        seq = seqs[int(rng.integers(len(seqs)))]
        h, w = seq.frames.shape[-2:]
        y0 = int(rng.integers(h - crop + 1))
        x0 = int(rng.integers(w - crop + 1))
        for t in range(k):
            frames[t].append(seq.frames[t, :, y0:y0 + crop, x0:x0 + crop])
        for t in range(k - 1):
            gts[t].append(seq.gt_flow[t, :, y0:y0 + crop, x0:x0 + crop])
    return ([np.stack(f) for f in frames],
            [np.stack(g).astype(np.float32) for g in gts])


def train_toy(seqs, model_cfg, train_cfg: TrainConfig, progress=None):
    """Train from a fresh init; returns (params, per-step loss list).

    Parameters that a mode never touches (the multi-frame stack under mode
    `none`) receive zero gradients so weight decay still applies uniformly.
    """
    train_cfg.validate(model_cfg)
    if len(seqs) < 1:
        raise ValueError("training needs at least one sequence")
    if seqs[0].frames.shape[0] < 3:
        raise ValueError("training sequences need at least 3 frames")
    params = fc.init_params(model_cfg, seed=train_cfg.seed)
    curve = []
    if train_cfg.steps == 0:
        return params, curve
    schedule = ad.OneCycle(train_cfg.max_rate, train_cfg.steps)
    opt = ad.AdamW(params, schedule, weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(
        np.random.SeedSequence([train_cfg.seed, zlib.crc32(b"batch-stream")]))
    loss_cfg = fc.LossConfig(gamma=train_cfg.gamma, first_frame=True)
    zero_grads = None
    for step in range(train_cfg.steps):
        frames, gts = sample_batch(rng, seqs, train_cfg.batch, train_cfg.crop)
        tape = ad.Tape()
        loaded = fc.load_params(tape, params, trainable=True)
        fvars = [tape.const(f) for f in frames]
        preds = fc.estimate_sequence(fvars, model_cfg, loaded, all_iterations=True)
        loss = fc.sequence_loss(preds[-2], preds[-1], gts[-2], gts[-1], loss_cfg)
        grads = tape.backward(loss)
        if zero_grads is None:
            zero_grads = [n for n in params if n not in grads]
        for name in zero_grads:
            grads[name] = np.zeros_like(params[name])
        ad.clip_grad_norm(grads, train_cfg.clip)
        opt.step(grads)
        curve.append(float(loss.val))
        if progress is not None:
            progress(step, curve[-1])
    return params, curve


def evaluate_model(params, model_cfg, seqs, iters=6, batch=10):
    """Final-pair flow at full resolution for every sequence.

    Sequences are batched through the forward pass; each gets a RegionReport
    for its last frame pair (the one with multi-frame history available).
    """
    reports = []
    for start in range(0, len(seqs), batch):
        chunk = seqs[start:start + batch]
        k = chunk[0].frames.shape[0]
        tape = ad.Tape()
        loaded = fc.load_params(tape, params, trainable=False)
        fvars = [tape.const(np.stack([s.frames[t] for s in chunk]))
                 for t in range(k)]
        preds = fc.estimate_sequence(fvars, model_cfg, loaded, iters=iters)
        final = preds[-1].val
        for b, seq in enumerate(chunk):
            reports.append(metrics.evaluate_flow(
                final[b], seq.gt_flow[-1], seq.occ_mask[-1]))
    return reports


def pooled_median(reports, field):
    """Median of a per-sequence metric, skipping absent regions."""
    values = [getattr(r, field) for r in reports if getattr(r, field) is not None]
    if not values:
        return None
    return float(np.median(values))


def summarize_reports(reports):
    """Aggregate over sequences: pixel-weighted means plus per-sequence medians."""
    out = {}
    for field, count_field in (("epe_all", "count_all"), ("epe_noc", "count_noc"),
                               ("epe_occ", "count_occ"), ("fl_all", "count_all")):
        num = den = 0.0
        for r in reports:
            v = getattr(r, field)
            if v is not None:
                n = getattr(r, count_field)
                num += v * n
                den += n
        out[f"mean_{field}"] = (num / den) if den else None
        out[f"median_{field}"] = pooled_median(reports, field)
    out["sequences"] = len(reports)
    return out


def write_loss_csv(path, curve):
    """step,loss header then one row per training step."""
    with open(path, "w", encoding="ascii") as f:
        f.write("step,loss\n")
        for step, value in enumerate(curve):
            f.write(f"{step},{value:.8f}\n")


def write_manifest(path, entries):
    """key=value lines, sorted by key; values rendered with repr-free str."""
    with open(path, "w", encoding="ascii") as f:
        for key in sorted(entries):
            f.write(f"{key}={entries[key]}\n")
