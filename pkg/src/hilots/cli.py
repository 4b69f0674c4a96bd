"""Command-line entry point: ``hilots <command> [flags]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import PRESETS, RunConfig, parse_config_text
from .data import (IGNORE, SequenceDataset, SplitSpec, generate_synthetic_dataset, load_bin_frame,
                   load_dataset, load_label_file, make_split, map_labels, save_dataset, unmap_labels,
                   write_label_file)
from .evaluate import ConfusionMatrix, format_iou_table, miou, render_error_map
from .geom import range_threshold, voxelize_frame
from .model import init_params, predict
from .trainer import WindowCache, train

log = logging.getLogger("hilots")

COMMANDS = ("voxelize", "train", "infer", "eval", "gradcheck", "synth")
GRADCHECK_TOL = 1e-4


class CliError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--preset", choices=PRESETS)
    common.add_argument("--ratio", type=float, help="supervised frame ratio in (0, 1]")
    common.add_argument("--seed", type=int)
    common.add_argument("--data", help="dataset root (SemanticKITTI layout) or a .bin file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--ckpt", help="checkpoint path")
    common.add_argument("--iters", type=int, help="training iterations")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hilots", description="Temporal semi-supervised LiDAR segmentation.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("voxelize", parents=[common], help="grid occupancy statistics for a frame")
    sub.add_parser("train", parents=[common], help="mean-teacher training")
    sub.add_parser("infer", parents=[common], help="teacher predictions as .label files")
    ev = sub.add_parser("eval", parents=[common], help="per-class IoU and mIoU of prediction files")
    ev.add_argument("--pred", required=True, help="prediction root (same layout as --data)")
    ev.add_argument("--maps", action="store_true", help="also write error maps into --out")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    sub.add_parser("synth", parents=[common], help="write the synthetic benchmark to --out")
    return p


def resolve_config(args) -> RunConfig:
    file_values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file {path} not found")
        file_values = parse_config_text(path.read_text(), str(path))
    preset = args.preset or file_values.get("preset", "desk")
    if preset not in PRESETS:
        raise CliError(f"unknown preset {preset!r}")
    cfg = RunConfig.for_preset(preset)
    file_values.pop("preset", None)
    flags = {k: getattr(args, k) for k in ("ratio", "seed", "data", "out", "ckpt", "iters")
             if getattr(args, k) is not None}
    extra = {}
    for item in args.set:
        k, eq, v = item.partition("=")
        if not eq:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        extra[k.strip()] = v.strip()
    try:
        return cfg.updated(file_values).updated(extra).updated(flags)
    except (KeyError, ValueError) as e:
        raise CliError(str(e.args[0] if e.args else e)) from None


def _dataset(cfg: RunConfig) -> SequenceDataset:
    if cfg.data:
        root = Path(cfg.data)
        if not root.is_dir():
            raise CliError(f"data directory {root} not found")
        return load_dataset(root)
    return generate_synthetic_dataset(cfg.n_sequences, cfg.scene_spec())


def _seq_indices(ds: SequenceDataset, spec: str, default: list[int]) -> list[int]:
    if not spec:
        return default
    ids = [s.seq_id for s in ds.sequences]
    out = []
    for sid in spec.split(","):
        sid = sid.strip()
        if sid not in ids:
            raise CliError(f"sequence {sid!r} not in dataset (have {ids})")
        out.append(ids.index(sid))
    return out


def _split_sequences(cfg: RunConfig, ds: SequenceDataset) -> tuple[list[int], list[int]]:
    n = len(ds.sequences)
    if cfg.data:
        default_train, default_val = list(range(n)), []
    else:
        n_val = max(1, n // 4) if n > 1 else 0
        default_train, default_val = list(range(n - n_val)), list(range(n - n_val, n))
    return (_seq_indices(ds, cfg.train_sequences, default_train),
            _seq_indices(ds, cfg.val_sequences, default_val))


def cmd_voxelize(cfg: RunConfig, args) -> int:
    mcfg = cfg.model_config()
    if cfg.data and Path(cfg.data).is_file():
        frame = load_bin_frame(cfg.data)
    else:
        frame = _dataset(cfg).sequences[0].frames[0].load()
    grid, mapping = voxelize_frame(frame, mcfg.grid)
    occ = grid.occupied_cells
    rho = mcfg.grid.cell_centers(occ)[:, 0]
    far = rho >= range_threshold(mcfg.grid, mcfg.heu.far_fraction)
    counts = mapping.counts
    print(f"grid {mcfg.grid.shape}  cells {mcfg.grid.n_cells}")
    print(f"points {len(frame)}  in range {int(mapping.in_range.sum())}")
    print(f"occupied cells {len(occ)}  ({100.0 * len(occ) / mcfg.grid.n_cells:.2f}%)")
    print(f"far cells {int(far.sum())}  near cells {int((~far).sum())}")
    if len(counts):
        print(f"points per occupied cell: mean {counts.mean():.2f}  max {counts.max()}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _dataset(cfg)
    mcfg, tcfg = cfg.model_config(), cfg.train_config()
    tr_idx, va_idx = _split_sequences(cfg, ds)
    train_ds = ds.subset(tr_idx)
    labeled, unlabeled = make_split(train_ds, SplitSpec(cfg.ratio, cfg.seed))
    if not labeled:
        raise CliError("the split produced no labelled frames")
    out = Path(cfg.out or "runs/latest")
    out.mkdir(parents=True, exist_ok=True)
    print(f"training on {len(tr_idx)} sequences: {len(labeled)} labelled, {len(unlabeled)} unlabelled frames")
    result = train(train_ds, labeled, unlabeled, mcfg, tcfg, log_path=out / "train.log", ckpt_dir=out)
    last = result.records[-1]
    print(last.line())
    print(f"wrote {out / 'final.hilo'}")
    if va_idx:
        from .evaluate import evaluate
        val = ds.subset(va_idx)
        res = evaluate(result.state.teacher, val, val.frame_keys(), mcfg)
        iou, mean = miou(res.overall)
        print(format_iou_table(iou, mean, list(ds.class_names)))
        print(f"far mIoU {100 * res.far_miou:.1f}  near mIoU {100 * res.near_miou:.1f}")
    return 0


def _load_ckpt(cfg: RunConfig):
    if not cfg.ckpt:
        raise CliError("--ckpt is required")
    path = Path(cfg.ckpt)
    if not path.is_file():
        raise CliError(f"checkpoint {path} not found")
    try:
        return T.load_checkpoint(path)
    except ValueError as e:
        raise CliError(f"bad checkpoint {path}: {e}") from None


def cmd_infer(cfg: RunConfig, args) -> int:
    params = _load_ckpt(cfg)
    if not cfg.out:
        raise CliError("--out is required")
    ds = _dataset(cfg)
    mcfg = cfg.model_config()
    if not params.same_layout(init_params(mcfg)):
        raise CliError(f"checkpoint {cfg.ckpt} does not match the configured model")
    cache = WindowCache(ds, mcfg)
    out = Path(cfg.out)
    n = 0
    for s, f in ds.frame_keys():
        pw = cache.window((s, f), with_labels=False)
        pred = predict(params, pw, mcfg)
        seq = ds.sequences[s]
        path = out / "sequences" / seq.seq_id / "labels" / f"{seq.frames[f].frame_id:06d}.label"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_label_file(path, unmap_labels(pred, ds.label_map))
        n += 1
    with open(out / "dataset.cfg", "w") as fh:
        fh.write(f"n_classes={ds.n_classes}\nclass_names={','.join(ds.class_names)}\nlabel_map={ds.label_map}\n")
    print(f"wrote {n} prediction files under {out}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if not cfg.data:
        raise CliError("--data (ground-truth root) is required")
    truth_ds = load_dataset(cfg.data)
    pred_root = Path(args.pred)
    if not pred_root.is_dir():
        raise CliError(f"prediction directory {pred_root} not found")
    k = truth_ds.n_classes
    cm = ConfusionMatrix.zeros(k)
    n = 0
    for seq in truth_ds.sequences:
        for fr in seq.frames:
            truth = fr.load_labels()
            if truth is None:
                continue
            ppath = pred_root / "sequences" / seq.seq_id / "labels" / f"{fr.frame_id:06d}.label"
            if not ppath.is_file():
                raise CliError(f"missing prediction {ppath}")
            pred = map_labels(load_label_file(ppath), truth_ds.label_map)
            if len(pred) != len(truth):
                raise CliError(f"{ppath}: {len(pred)} labels for {len(truth)} points")
            pred = np.where(pred == IGNORE, 0, pred)  # unmappable ids count as class 0
            cm.update(truth, pred)
            if args.maps and cfg.out:
                img = Path(cfg.out) / f"{seq.seq_id}_{fr.frame_id:06d}.ppm"
                img.parent.mkdir(parents=True, exist_ok=True)
                render_error_map(fr.load(), pred, truth, img)
            n += 1
    if n == 0:
        raise CliError("no labelled frames found under --data")
    iou, mean = miou(cm)
    print(format_iou_table(iou, mean, list(truth_ds.class_names)))
    print(f"frames {n}  points {cm.total}  mIoU {mean:.6f}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .gradcheck import run_suite

    worst = 0.0
    for r in run_suite(cfg.seed):
        worst = max(worst, r.max_rel_err)
        status = "ok" if r.max_rel_err < GRADCHECK_TOL else "FAIL"
        print(f"{r.name:<18} rel err {r.max_rel_err:.3e}  kink margin {r.margin:.2e}  "
              f"values {r.n_values:5d}  {status}")
    print(f"max rel err {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return 0 if worst < GRADCHECK_TOL else 1


def cmd_synth(cfg: RunConfig, args) -> int:
    if not cfg.out:
        raise CliError("--out is required")
    ds = generate_synthetic_dataset(cfg.n_sequences, cfg.scene_spec())
    save_dataset(ds, cfg.out)
    n = sum(len(s) for s in ds.sequences)
    print(f"wrote {len(ds.sequences)} sequences, {n} frames to {cfg.out}")
    return 0


HANDLERS = {
    "voxelize": cmd_voxelize, "train": cmd_train, "infer": cmd_infer,
    "eval": cmd_eval, "gradcheck": cmd_gradcheck, "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](cfg, args)
    except CliError as e:
        print(f"hilots {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"hilots {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
