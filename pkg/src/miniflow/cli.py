"""Command-line surface: warping, gradient checks, data, training, eval.

Exit codes are a stable contract: 0 success, 2 usage (bad flags, unknown
config keys, missing preconditions), 3 input parse failure, 4 numerical
failure. Every option can also come from a key=value config file; explicit
flags win over the file, the file wins over built-in defaults, and each run
echoes the configuration it resolved.
"""

import argparse
import pathlib
import sys

import numpy as np

from . import __version__
from . import autodiff as ad
from . import flowcore as fc
from . import flowio, gradcheck, metrics, synth, train, warp


class UsageError(Exception):
    """Bad invocation: maps to exit code 2."""


# (name, type, default, help); required options use default=REQUIRED
REQUIRED = object()

_OPTIONS = {
    "splat": [
        ("image", str, REQUIRED, "input image (.ppm) or array (.npy, [C,H,W])"),
        ("flow", str, REQUIRED, "flow field (.flo)"),
        ("mode", str, "average", "summation | average | softmax | nearest"),
        ("z", str, None, "importance map (.npy [H,W]); required for softmax"),
        ("output", str, REQUIRED, "output image (.ppm) or array (.npy)"),
        ("mask-output", str, None, "where to write the validity mask (.pgm/.npy)"),
    ],
    "sample": [
        ("image", str, REQUIRED, "input image (.ppm) or array (.npy, [C,H,W])"),
        ("flow", str, REQUIRED, "flow field (.flo)"),
        ("output", str, REQUIRED, "output image (.ppm) or array (.npy)"),
        ("mask-output", str, None, "where to write the in-bounds weight mask"),
    ],
    "gradcheck": [
        ("op", str, "all", "battery entry name, or 'all'"),
        ("seeds", int, 20, "random instances per entry"),
        ("tolerance", float, 1.0e-5, "max relative error accepted"),
    ],
    "gen-scenes": [
        ("output", str, REQUIRED, "dataset directory to create"),
        ("count", int, 100, "number of sequences"),
        ("base-seed", int, 0, "seed of the first sequence"),
        ("frames", int, 3, "frames per sequence"),
    ],
    "train-toy": [
        ("dataset", str, REQUIRED, "dataset directory from gen-scenes"),
        ("output", str, REQUIRED, "run directory for checkpoint/curve/manifest"),
        ("mode", str, "none", "embedding mode (none, final_to_all, ...)"),
        ("seed", int, 0, "initialization and batch-stream seed"),
        ("steps", int, 2000, "optimizer steps"),
        ("batch", int, 4, "sequences per step"),
        ("crop", int, 32, "training crop size"),
    ],
    "eval": [
        ("dataset", str, REQUIRED, "dataset directory"),
        ("output", str, REQUIRED, "report directory"),
        ("checkpoint", str, None, "trained checkpoint (omit with --use-gt)"),
        ("mode", str, "none", "embedding mode the checkpoint was trained with"),
        ("iters", int, 6, "refinement iterations at eval time"),
        ("use-gt", bool, False, "score the ground truth against itself"),
    ],
    "viz-flow": [
        ("flow", str, REQUIRED, "flow field (.flo)"),
        ("output", str, REQUIRED, "color rendering (.ppm)"),
        ("max-norm", float, None, "saturation normal(default: 99th percentile)"),
    ],
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="miniflow",
        description="multi-frame optical flow toolbox")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)
    for command, options in _OPTIONS.items():
        sub = subs.add_parser(command)
        sub.add_argument("--config", type=str, default=None,
                         help="key=value file; flags override it")
        for name, typ, default, help_text in options:
            if typ is bool:
                sub.add_argument(f"--{name}", action="store_const", const=True,
                                 default=None, help=help_text)
            else:
                sub.add_argument(f"--{name}", type=typ, default=None,
                                 help=help_text)
    return parser


def _parse_config_file(path):
    entries = {}
    try:
        text = pathlib.Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ValueError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _resolve(args):
    """Merge CLI > config file > defaults; reject unknown config keys."""
    options = _OPTIONS[args.command]
    known = {name for name, _, _, _ in options}
    file_entries = {}
    if args.config is not None:
        file_entries = _parse_config_file(args.config)
        unknown = set(file_entries) - known
        if unknown:
            raise UsageError(
                f"unknown config keys for {args.command}: {sorted(unknown)}")
    resolved = {}
    for name, typ, default, _ in options:
        cli_value = getattr(args, name.replace("-", "_"))
        if cli_value is not None:
            resolved[name] = cli_value
        elif name in file_entries:
            raw = file_entries[name]
            resolved[name] = (raw.lower() in ("1", "true", "yes")
                              if typ is bool else typ(raw))
        else:
            resolved[name] = default
    missing = [n for n, v in resolved.items() if v is REQUIRED]
    if missing:
        raise UsageError(f"{args.command} requires --" + ", --".join(missing))
    print(f"resolved config ({args.command}):")
    for name in sorted(resolved):
        value = resolved[name]
        print(f"  {name}={'' if value is None else value}")
    return resolved


# -- file helpers -------------------------------------------------------------

def _load_image(path):
    """Returns (float64 [C,H,W], writer kind): ppm maps to [0,1]."""
    p = str(path)
    if p.endswith(".npy"):
        arr = np.load(p)
        if arr.ndim != 3:
            raise ValueError(f"{path}: expected [C,H,W] array, got {arr.shape}")
        return arr.astype(np.float64), "npy"
    if p.endswith(".ppm"):
        return flowio.read_ppm(p).astype(np.float64) / 255.0, "ppm"
    raise ValueError(f"{path}: unsupported image extension (use .ppm or .npy)")


def _write_image(path, arr, kind):
    if str(path).endswith(".npy"):
        np.save(str(path), arr)
    elif kind == "ppm":
        data = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
        if data.shape[0] == 3:
            flowio.write_ppm(path, data)
        else:
            flowio.write_pgm(path, data[0] if data.ndim == 3 else data)
    else:
        np.save(str(path) if str(path).endswith(".npy") else str(path) + ".npy", arr)


def _load_dataset_dir(path):
    root = pathlib.Path(path)
    if not root.is_dir():
        raise ValueError(f"dataset directory {path} does not exist")
    seq_dirs = sorted(p for p in root.iterdir()
                      if p.is_dir() and p.name.startswith("seq_"))
    if not seq_dirs:
        raise ValueError(f"dataset directory {path} holds no seq_* directories")
    return [synth.load_sequence(p) for p in seq_dirs]


# -- subcommands --------------------------------------------------------------

def cmd_splat(cfg):
    values, kind = _load_image(cfg["image"])
    flow = flowio.read_flo(cfg["flow"]).astype(np.float64)
    if cfg["mode"] == "softmax" and cfg["z"] is None:
        raise UsageError("mode softmax requires --z")
    z = None
    if cfg["z"] is not None:
        z = np.load(cfg["z"]).astype(np.float64)
    out, mask = warp.splat(values, flow, cfg["mode"], z=z)
    _write_image(cfg["output"], out, kind)
    if cfg["mask-output"]:
        _write_image(cfg["mask-output"], mask, kind)
    return 0


def cmd_sample(cfg):
    values, kind = _load_image(cfg["image"])
    flow = flowio.read_flo(cfg["flow"]).astype(np.float64)
    out, mask = warp.bilinear_sample(values, flow)
    _write_image(cfg["output"], out, kind)
    if cfg["mask-output"]:
        _write_image(cfg["mask-output"], mask, kind)
    return 0


def cmd_gradcheck(cfg):
    if cfg["op"] == "all":
        names = None
    elif cfg["op"] in gradcheck.BATTERY:
        names = [cfg["op"]]
    else:
        raise UsageError(
            f"unknown op {cfg['op']!r}; known: {', '.join(sorted(gradcheck.BATTERY))}")
    results = gradcheck.run_battery(names=names, seeds=cfg["seeds"])
    ok = True
    for result in results:
        print(result.line(cfg["tolerance"]))
        ok = ok and result.max_err <= cfg["tolerance"]
    return 0 if ok else 4


def cmd_gen_scenes(cfg):
    ranges = synth.SceneRanges(frames=cfg["frames"])
    seqs = synth.generate_dataset(cfg["count"], cfg["base-seed"], ranges)
    synth.save_dataset(cfg["output"], seqs)
    print(f"wrote {len(seqs)} sequences under {cfg['output']}")
    return 0


def cmd_train_toy(cfg):
    seqs = _load_dataset_dir(cfg["dataset"])
    model_cfg = fc.ModelConfig(embed_mode=cfg["mode"])
    train_cfg = train.TrainConfig(steps=cfg["steps"], seed=cfg["seed"],
                                  batch=cfg["batch"], crop=cfg["crop"])
    params, curve = train.train_toy(seqs, model_cfg, train_cfg)
    out = pathlib.Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(out / "checkpoint.ckpt", params)
    train.write_loss_csv(out / "loss.csv", curve)
    manifest = {f"config.{k}": v for k, v in cfg.items() if k != "mask-output"}
    manifest["command"] = "train-toy"
    manifest["version"] = __version__
    manifest["sequences"] = len(seqs)
    manifest["final_loss"] = f"{curve[-1]:.8f}" if curve else "nan"
    train.write_manifest(out / "manifest.txt", manifest)
    print(f"wrote checkpoint, loss.csv, manifest.txt under {out}")
    return 0


def cmd_eval(cfg):
    seqs = _load_dataset_dir(cfg["dataset"])
    out = pathlib.Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["use-gt"]:
        reports = [metrics.evaluate_flow(s.gt_flow[-1], s.gt_flow[-1],
                                         s.occ_mask[-1]) for s in seqs]
    else:
        if cfg["checkpoint"] is None:
            raise UsageError("eval requires --checkpoint (or --use-gt)")
        params = ad.load_checkpoint(cfg["checkpoint"])
        model_cfg = fc.ModelConfig(embed_mode=cfg["mode"])
        reports = train.evaluate_model(params, model_cfg, seqs,
                                       iters=cfg["iters"])
    for i, report in enumerate(reports):
        (out / f"seq_{i:05d}.txt").write_text(
            metrics.format_report_text(report), encoding="ascii")
        (out / f"seq_{i:05d}.kv").write_text(
            metrics.format_report_kv(report), encoding="ascii")
    agg = train.summarize_reports(reports)
    lines = [f"{k}={'absent' if v is None else v}" for k, v in sorted(agg.items())]
    (out / "aggregate.kv").write_text("\n".join(lines) + "\n", encoding="ascii")
    print("\n".join(lines))
    return 0


def cmd_viz_flow(cfg):
    flow = flowio.read_flo(cfg["flow"])
    img = flowio.flow_to_color(flow, max_norm=cfg["max-norm"])
    flowio.write_ppm(cfg["output"], np.rint(img * 255.0).astype(np.uint8))
    return 0


_DISPATCH = {
    "splat": cmd_splat,
    "sample": cmd_sample,
    "gradcheck": cmd_gradcheck,
    "gen-scenes": cmd_gen_scenes,
    "train-toy": cmd_train_toy,
    "eval": cmd_eval,
    "viz-flow": cmd_viz_flow,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        return _DISPATCH[args.command](cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except ad.NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except (OSError, ValueError) as e:
        print(f"input error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
