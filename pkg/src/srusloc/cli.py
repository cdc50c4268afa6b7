"""`srusloc` command line: simulate / train / infer / eval / render.

Exit codes: 0 success, 1 usage error, 2 data or format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import __version__, formats
from .clutterfilt import BlockGeometry, SvdError
from .evalkit import aggregate, evaluate, f1_score, localization_error, match_detections
from .fieldsim import (DEFAULT_SNR_LEVELS_DB, DatasetConfig, SceneConfig,
                       build_dataset)
from .grid import GridSpec
from .network import NetConfig, load_checkpoint
from .srusform import FormConfig, WindowPlan, form_srus
from .training import LossWeights, OptimConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    grid: GridSpec = field(default_factory=GridSpec)
    scene: SceneConfig = field(default_factory=SceneConfig)
    snr_levels: list = field(default_factory=lambda: list(DEFAULT_SNR_LEVELS_DB))
    net: NetConfig = field(default_factory=NetConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    window: WindowPlan = field(default_factory=lambda: WindowPlan(m=3))
    filter: FormConfig = field(default_factory=FormConfig)
    eval: dict = field(default_factory=lambda: {"radius_um": 51.5, "threshold": 0.5})
    dataset: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    master_seed: int = 0

    def echo(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "scene": self.scene.__dict__,
            "snr_levels": self.snr_levels,
            "net": self.net.to_dict(),
            "optim": self.optim.__dict__,
            "loss": self.loss.__dict__,
            "window": {"m": self.window.m, "stride": self.window.stride},
            "filter": {"enabled": self.filter.apply_filter,
                       "block_h": self.filter.block.block_h,
                       "block_w": self.filter.block.block_w,
                       "overlap": self.filter.block.overlap,
                       "max_sv": self.filter.max_sv,
                       "threshold": self.filter.threshold},
            "eval": self.eval,
            "dataset": self.dataset,
            "paths": self.paths,
            "master_seed": self.master_seed,
        }


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    extra = set(section) - known
    if extra:
        raise ConfigError(f"unknown keys in section '{name}': {sorted(extra)}")
    try:
        kwargs = dict(section)
        for f in fields(cls):
            if f.name in kwargs and isinstance(kwargs[f.name], list):
                kwargs[f.name] = tuple(kwargs[f.name])
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid section '{name}': {e}") from e


_OPTIM_KEYS = {"lr", "momentum", "weight_decay", "epochs", "batch_size", "seed"}
_LOSS_KEYS = {"w_detect", "w_x", "w_z", "pos_weight"}
_FILTER_KEYS = {"enabled", "block_h", "block_w", "overlap", "max_sv", "threshold",
                "scales_px", "tau", "log_compress"}
_EVAL_KEYS = {"radius_um", "threshold"}
_DATASET_KEYS = {"count", "stacks_per_scene", "augment_hflip", "clutter_filter",
                 "noise_rel", "morphology_seed"}
_SECTIONS = {"grid", "scene", "snr_levels", "net", "optim", "window", "filter",
             "eval", "dataset", "paths", "master_seed"}


def load_config(path: str | None) -> PipelineConfig:
    doc = {}
    if path is not None:
        with open(path) as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from e
    extra = set(doc) - _SECTIONS
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    cfg = PipelineConfig()
    if "grid" in doc:
        cfg.grid = _build(GridSpec, doc["grid"], "grid")
    if "scene" in doc:
        cfg.scene = _build(SceneConfig, doc["scene"], "scene")
    if "snr_levels" in doc:
        cfg.snr_levels = list(doc["snr_levels"])
    if "net" in doc:
        cfg.net = _build(NetConfig, doc["net"], "net")
    if "optim" in doc:
        sec = doc["optim"]
        extra = set(sec) - _OPTIM_KEYS - _LOSS_KEYS
        if extra:
            raise ConfigError(f"unknown keys in section 'optim': {sorted(extra)}")
        cfg.optim = _build(OptimConfig, {k: v for k, v in sec.items()
                                         if k in _OPTIM_KEYS}, "optim")
        cfg.loss = _build(LossWeights, {k: v for k, v in sec.items()
                                        if k in _LOSS_KEYS}, "optim")
    if "window" in doc:
        cfg.window = _build(WindowPlan, doc["window"], "window")
    if "filter" in doc:
        sec = doc["filter"]
        extra = set(sec) - _FILTER_KEYS
        if extra:
            raise ConfigError(f"unknown keys in section 'filter': {sorted(extra)}")
        try:
            cfg.filter = FormConfig(
                apply_filter=sec.get("enabled", True),
                block=BlockGeometry(sec.get("block_h", 76), sec.get("block_w", 76),
                                    sec.get("overlap", 0)),
                max_sv=sec.get("max_sv", 400),
                threshold=sec.get("threshold", 0.5),
                scales_px=tuple(sec.get("scales_px", (1.0, 2.0, 3.0))),
                tau=sec.get("tau", 0.5),
                log_compress=sec.get("log_compress", False))
        except ValueError as e:
            raise ConfigError(f"invalid section 'filter': {e}") from e
    if "eval" in doc:
        extra = set(doc["eval"]) - _EVAL_KEYS
        if extra:
            raise ConfigError(f"unknown keys in section 'eval': {sorted(extra)}")
        cfg.eval.update(doc["eval"])
    if "dataset" in doc:
        extra = set(doc["dataset"]) - _DATASET_KEYS
        if extra:
            raise ConfigError(f"unknown keys in section 'dataset': {sorted(extra)}")
        cfg.dataset = dict(doc["dataset"])
    if "paths" in doc:
        cfg.paths = dict(doc["paths"])
    if "master_seed" in doc:
        cfg.master_seed = int(doc["master_seed"])
    return cfg


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.master_seed
    ds = DatasetConfig(
        out_dir=args.out,
        count=args.count if args.count is not None else cfg.dataset.get("count", 12),
        snr_levels_db=tuple(cfg.snr_levels),
        m=cfg.window.m,
        grid=cfg.grid,
        scene=cfg.scene,
        master_seed=seed,
        morphology_seed=(args.morphology_seed if args.morphology_seed is not None
                         else cfg.dataset.get("morphology_seed", 0)),
        stacks_per_scene=cfg.dataset.get("stacks_per_scene", 16),
        augment_hflip=cfg.dataset.get("augment_hflip", True),
        clutter_filter=cfg.dataset.get("clutter_filter", True),
        noise_rel=cfg.dataset.get("noise_rel", 0.3),
        overwrite=args.overwrite)
    manifest_path = build_dataset(ds)
    with open(manifest_path) as f:
        manifest = json.load(f)
    print(f"wrote {manifest['count']} stacks (m={manifest['m']}, "
          f"snr levels {manifest['snr_levels_db']} dB, seed {seed}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    manifest = formats.read_manifest(args.dataset)
    if int(manifest["m"]) != cfg.net.m:
        raise ConfigError(f"dataset has m={manifest['m']} but network config "
                          f"has m={cfg.net.m}")
    optim = cfg.optim
    if args.epochs is not None:
        optim = OptimConfig(lr=optim.lr, momentum=optim.momentum,
                            weight_decay=optim.weight_decay, epochs=args.epochs,
                            batch_size=optim.batch_size,
                            seed=args.seed if args.seed is not None else optim.seed)
    elif args.seed is not None:
        optim = OptimConfig(lr=optim.lr, momentum=optim.momentum,
                            weight_decay=optim.weight_decay, epochs=optim.epochs,
                            batch_size=optim.batch_size, seed=args.seed)
    log_path = args.log or (args.out + ".log.jsonl")
    _, records = train(args.dataset, cfg.net, optim, cfg.loss,
                       checkpoint_path=args.out, log_path=log_path)
    print(f"trained {optim.epochs} epochs; final loss {records[-1]['loss']:.6f}; "
          f"checkpoint {args.out}; log {log_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    frames = formats.read_iqf(args.stack)
    grid = cfg.grid
    if frames.shape[1] != grid.height_px or frames.shape[2] != grid.width_px:
        # fall back to a grid matching the stack at the configured pitch
        grid = GridSpec(width_px=frames.shape[2], height_px=frames.shape[1],
                        pitch_um=cfg.grid.pitch_um,
                        wavelength_um=cfg.grid.wavelength_um,
                        upsample_k=model.cfg.k_bins)
    plan = WindowPlan(m=model.cfg.m, stride=cfg.window.stride)
    form_cfg = FormConfig(
        apply_filter=cfg.filter.apply_filter and frames.shape[0] >= 2,
        block=cfg.filter.block, max_sv=cfg.filter.max_sv,
        threshold=args.threshold if args.threshold is not None else cfg.filter.threshold,
        scales_px=cfg.filter.scales_px, tau=cfg.filter.tau,
        log_compress=cfg.filter.log_compress)
    t0 = time.monotonic()
    raw, enhanced, log = form_srus(frames, grid, model, plan, form_cfg)
    elapsed = time.monotonic() - t0
    ms_per_frame = 1000.0 * elapsed / max(1, len(log))
    sidecar = {
        "grid": grid.to_dict(),
        "k": grid.upsample_k,
        "total_counts": float(raw.counts.sum()),
        "per_frame": log,
        "ms_per_frame": ms_per_frame,
        "config_echo": cfg.echo(),
    }
    formats.write_srus_image(args.out, raw.counts, sidecar)
    if args.points:
        # fine-grid cell centers, repeated by count, recover the decoded
        # localizations exactly
        K = grid.upsample_k
        pts = []
        for fi, fj in np.argwhere(raw.counts > 0):
            x = (fj + 0.5) * grid.pitch_um / K
            z = (fi + 0.5) * grid.pitch_um / K
            pts += [[x, z]] * int(raw.counts[fi, fj])
        stack_id = os.path.splitext(os.path.basename(args.stack))[0]
        doc = {"frames": [{"id": stack_id, "points": pts}]}
        with open(args.points, "w") as f:
            json.dump(doc, f, indent=1)
    base, ext = os.path.splitext(args.out)
    formats.write_srus_image(base + "_enhanced" + ext,
                             enhanced.counts, {"grid": grid.to_dict(),
                                               "k": grid.upsample_k,
                                               "kind": "enhanced"})
    print(f"{len(log)} windows, {sidecar['total_counts']:.0f} localizations, "
          f"{ms_per_frame:.2f} ms/frame (CPU; hardware-dependent)")
    return EXIT_OK


def _load_points(path: str) -> dict:
    """Predictions JSON: {"frames": [{"id": str|int, "points": [[x,z],...]}]}."""
    with open(path) as f:
        doc = json.load(f)
    if "frames" not in doc:
        raise formats.FormatError(f"{path}: missing 'frames' array")
    out = {}
    for rec in doc["frames"]:
        out[str(rec["id"])] = [tuple(map(float, p)) for p in rec["points"]]
    return out


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    radius = args.radius if args.radius is not None else cfg.eval.get("radius_um", 51.5)
    pred = _load_points(args.pred)
    if os.path.isdir(args.gt):
        manifest = formats.read_manifest(args.gt)
        gt = {rec["file"]: [tuple(p) for p in rec["gt"]]
              for rec in manifest["stacks"]}
        sets = {rec["file"]: f"snr_{rec['snr_db']}" for rec in manifest["stacks"]}
    else:
        gt = _load_points(args.gt)
        sets = {k: "all" for k in gt}
    common = sorted(set(pred) & set(gt))
    if not common:
        raise formats.FormatError("no frame ids shared between predictions and ground truth")
    by_set = {}
    for fid in common:
        by_set.setdefault(sets.get(fid, "all"), []).append(fid)
    per_set = []
    for name in sorted(by_set):
        tp = fp = fn = 0
        dists = []
        for fid in by_set[name]:
            m = match_detections(pred[fid], gt[fid], radius)
            tp += m.tp
            fp += m.fp
            fn += m.fn
            dists += [p[2] for p in m.pairs]
        from .evalkit import MatchResult
        metrics = f1_score(MatchResult([], tp, fp, fn))
        if dists:
            arr = np.array(dists)
            metrics.mean_loc_error_um = float(arr.mean())
            metrics.std_loc_error_um = float(arr.std())
        per_set.append({"set": name, "n_frames": len(by_set[name]),
                        "tp": tp, "fp": fp, "fn": fn,
                        "precision": metrics.precision, "recall": metrics.recall,
                        "f1": metrics.f1,
                        "mean_loc_error_um": metrics.mean_loc_error_um,
                        "std_loc_error_um": metrics.std_loc_error_um})
    from .evalkit import Metrics
    agg = aggregate([Metrics(precision=s["precision"], recall=s["recall"],
                             f1=s["f1"], mean_loc_error_um=s["mean_loc_error_um"],
                             std_loc_error_um=s["std_loc_error_um"])
                     for s in per_set])
    report = {
        "per_set": per_set,
        "aggregate": agg,
        "config_echo": {"radius_um": radius, "std_convention": "population",
                        "note": "match radius is a pipeline choice; absolute "
                                "comparisons against published scores carry "
                                "a matching-rule caveat"},
    }
    out = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(out)
    print(out)
    return EXIT_OK


def _hot_colormap(v: np.ndarray) -> np.ndarray:
    """v in [0,1] -> RGB uint8 (black-red-yellow-white ramp)."""
    r = np.clip(3 * v, 0, 1)
    g = np.clip(3 * v - 1, 0, 1)
    b = np.clip(3 * v - 2, 0, 1)
    return (np.stack([r, g, b], axis=-1) * 255).round().astype(np.uint8)


def cmd_render(args) -> int:
    from PIL import Image
    counts, sidecar = formats.read_srus_image(args.input)
    img = np.log1p(counts) if args.log else counts
    peak = img.max()
    v = img / peak if peak > 0 else img
    if args.colormap == "hot":
        out = Image.fromarray(_hot_colormap(v), mode="RGB")
    elif args.bits == 16:
        out = Image.fromarray((v * 65535).round().astype(np.uint16))
    else:
        out = Image.fromarray((v * 255).round().astype(np.uint8), mode="L")
    out.save(args.out)
    print(f"rendered {counts.shape[1]}x{counts.shape[0]} image to {args.out} "
          f"(log={args.log}, colormap={args.colormap}, bits={args.bits})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srusloc",
                                description="Super-resolution ultrasound "
                                            "localization pipeline")
    p.add_argument("--version", action="version", version=f"srusloc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="build a synthetic labeled dataset")
    s.add_argument("--config", help="pipeline config JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--morphology-seed", type=int, dest="morphology_seed")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train the detector on a dataset")
    s.add_argument("--config", help="pipeline config JSON")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="form an SRUS image from an IQ stack")
    s.add_argument("--config", help="pipeline config JSON")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--stack", required=True, help=".iqf file")
    s.add_argument("--out", required=True, help="output 16-bit PNG")
    s.add_argument("--threshold", type=float)
    s.add_argument("--points", help="also write decoded localizations JSON")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--config", help="pipeline config JSON")
    s.add_argument("--pred", required=True, help="predictions JSON")
    s.add_argument("--gt", required=True, help="dataset dir or GT JSON")
    s.add_argument("--radius", type=float, help="match radius in um")
    s.add_argument("--out", help="metrics JSON output path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="render an SRUS image for display")
    s.add_argument("--input", required=True, help="SRUS PNG with JSON sidecar")
    s.add_argument("--out", required=True)
    log_group = s.add_mutually_exclusive_group()
    log_group.add_argument("--log", dest="log", action="store_true", default=False)
    log_group.add_argument("--no-log", dest="log", action="store_false")
    s.add_argument("--colormap", choices=["gray", "hot"], default="gray")
    s.add_argument("--bits", type=int, choices=[8, 16], default=8)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, formats.FormatError, FileExistsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (SvdError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
