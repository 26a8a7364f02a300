"""myot2 command line: fit | train | infer | eval | bullseye | phantom | bench-noise."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io as fmt
from .evaluation import (BullseyeReport, aha_bullseye, bullseye_diff, centroid, default_rings,
                         evaluate_pairs, render_svg)
from .model import ModelConfig
from .relaxometry import (FitConfig, T2Map, center_crop, fit_t2_volume, normalize_minmax,
                          resolve_threads)
from .synth import add_gaussian_noise, gen_phantom, random_phantom_spec

log = logging.getLogger("myot2")


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _model_config(args) -> ModelConfig:
    d = dict(getattr(args, "model", None) or {})
    if getattr(args, "ablation", None):
        d["ablation"] = args.ablation
    return ModelConfig.from_dict(d) if d else ModelConfig()


def _train_config(args):
    from .training import TrainConfig

    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       augment=args.augment, augment_mode=args.augment_mode, noise_std=getattr(args, "noise", 0.0))


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit(args) -> int:
    vol = fmt.read_mev(args.input)
    vol = normalize_minmax(vol)
    if args.crop:
        vol = center_crop(vol, args.crop)
    cfg = FitConfig(mode=args.mode, t2_bounds=(args.t2_min, args.t2_max))
    threads = resolve_threads(args.threads)
    start = time.perf_counter()
    t2 = fit_t2_volume(vol, cfg, threads=threads)
    seconds = time.perf_counter() - start
    fmt.write_t2f(args.out, t2)
    pixels = vol.slices * vol.height * vol.width
    timing = {"pixels": pixels, "threads": threads, "seconds": seconds}
    _write_json(args.timing or Path(args.out) / "timing.json", timing)
    log.info("fit %d pixels on %d threads in %.3f s", pixels, threads, seconds)
    return 0


def cmd_phantom(args) -> int:
    out = Path(args.out)
    for i in range(args.count):
        spec = random_phantom_spec(args.seed + i, side=args.side, slices=args.slices)
        sample = gen_phantom(spec)
        if args.noise > 0:
            from dataclasses import replace

            sample = replace(sample, volume=add_gaussian_noise(sample.volume, args.noise,
                                                               args.seed + i))
        fmt.write_sample(out / f"subject_{i:03d}", sample)
    log.info("wrote %d phantoms to %s", args.count, out)
    return 0


def cmd_train(args) -> int:
    from .training import load_dataset, prepare_samples, save_checkpoint, train, training_samples

    names, samples = load_dataset(args.data)
    mcfg = _model_config(args)
    tcfg = _train_config(args)
    base = training_samples(samples, tcfg)
    data = prepare_samples(base, mcfg.side, tcfg.noise_std, seed=tcfg.seed + 1)
    log_path = args.log or Path(args.out) / "train_log.jsonl"

    def progress(entry):
        log.info("epoch %d  L_MT %.5f  w1 %.4f  w2 %.4f", entry["epoch"], entry["L_MT"],
                 entry["w1"], entry["w2"])

    res = train(data, mcfg, tcfg, log_path=log_path, progress=progress)
    save_checkpoint(args.out, res.model, res.epochs_run, tcfg.seed,
                    extra={"train": tcfg.to_dict(), "subjects": names})
    return 0


def _volume_inputs(path) -> list[tuple[str, Path]]:
    path = Path(path)
    if (path / "meta.json").is_file():
        return [(path.name, path)]
    if (path / "mev" / "meta.json").is_file():
        return [(path.name, path / "mev")]
    return [(p.name, p / "mev") for p in fmt.list_subjects(path)]


def cmd_infer(args) -> int:
    from .training import infer_volume, load_checkpoint

    model, _ = load_checkpoint(args.ckpt)
    inputs = _volume_inputs(args.input)
    if not inputs:
        raise ValueError(f"{args.input}: no volumes found")
    out = Path(args.out)
    single = len(inputs) == 1 and (Path(args.input) / "meta.json").is_file()
    for name, mev in inputs:
        labels, t2 = infer_volume(model, fmt.read_mev(mev))
        dest = out if single else out / name
        if labels is not None:
            fmt.write_lbl(dest / "lbl", labels)
        if t2 is not None:
            fmt.write_t2f(dest / "t2f", t2)
    return 0


def _subject_dirs(root) -> dict[str, Path]:
    root = Path(root)
    if not root.is_dir():
        raise fmt.FormatError(f"{root}: not a directory")
    return {p.name: p for p in sorted(root.iterdir())
            if p.is_dir() and ((p / "lbl").is_dir() or (p / "t2f").is_dir())}


def cmd_eval(args) -> int:
    from .relaxometry import center_crop_array

    pred, truth = _subject_dirs(args.pred), _subject_dirs(args.truth)
    if set(pred) != set(truth) or not pred:
        raise ValueError(f"unmatched subjects: only in pred {sorted(set(pred) - set(truth))}, "
                         f"only in truth {sorted(set(truth) - set(pred))}")
    names = sorted(pred)
    pl, pt, tl, tt = [], [], [], []
    for n in names:
        p, t = pred[n], truth[n]
        lab = fmt.read_lbl(p / "lbl") if (p / "lbl").is_dir() else None
        t2 = fmt.read_t2f(p / "t2f").values if (p / "t2f").is_dir() else None
        tlab = fmt.read_lbl(t / "lbl")
        tt2 = fmt.read_t2f(t / "t2f").values
        ref = lab if lab is not None else t2
        if ref is not None and ref.shape[-1] < tlab.shape[-1]:
            # predictions come from the center-cropped frame
            tlab = center_crop_array(tlab, ref.shape[-1])
            tt2 = center_crop_array(tt2, ref.shape[-1])
        pl.append(lab)
        pt.append(t2)
        tl.append(tlab)
        tt.append(np.clip(tt2, 0.0, 200.0))
    report = evaluate_pairs(names, pl, pt, tl, tt, mask_source=args.mask_source)
    _write_json(args.out, report)
    return 0


def cmd_bullseye(args) -> int:
    t2 = fmt.read_t2f(args.t2).values
    labels = fmt.read_lbl(args.labels)
    if t2.shape != labels.shape:
        raise ValueError(f"T2 map {t2.shape} and labels {labels.shape} differ in shape")
    rings = args.rings.split(",") if args.rings else default_rings(labels.shape[0])
    lv = [centroid(lab == 1) for lab in labels]
    rv = [centroid(lab == 3) for lab in labels]
    report = aha_bullseye(t2, labels == 2, lv, rv, rings)
    out = report.to_dict()
    shown = report
    if args.diff:
        other = BullseyeReport.from_dict(json.loads(Path(args.diff).read_text())["report"])
        d = bullseye_diff(report, other)
        out = {"report": out, "diff": d.to_dict()}
        shown = d
    else:
        out = {"report": out}
    _write_json(args.out_json, out)
    if args.out_svg:
        vmin, vmax = args.vmin, args.vmax
        if args.diff and args.vmin == 0.0 and args.vmax == 100.0:
            vmin, vmax = -20.0, 20.0
        Path(args.out_svg).write_text(render_svg(shown, vmin, vmax,
                                                 "T2 residual (ms)" if args.diff else "T2 (ms)"))
    return 0


def cmd_bench_noise(args) -> int:
    from .training import bench_noise, load_dataset

    _, train_samples = load_dataset(args.data)
    if args.test:
        _, test_samples = load_dataset(args.test)
    else:
        if len(train_samples) < 2:
            raise ValueError("need at least two subjects to hold one out")
        cut = max(1, len(train_samples) // 4)
        train_samples, test_samples = train_samples[:-cut], train_samples[-cut:]
    levels = [float(v) for v in args.levels.split(",")]

    def progress(tag, entry):
        log.info("%s epoch %d  L_MT %.5f", tag, entry["epoch"], entry["L_MT"])

    table = bench_noise(train_samples, test_samples, _model_config(args), _train_config(args),
                        levels, progress=progress)
    _write_json(args.out, table)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--ablation", choices=("full", "seg_only", "quant_only"), default=None)
    p.add_argument("--no-augment", dest="augment", action="store_false",
                   help="train on the subjects as given instead of augmented variants")
    p.add_argument("--augment-mode", choices=("all8", "cycle"), default="all8",
                   help="all8: all 8 variants per subject; cycle: one variant per subject")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="myot2", description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $MYOT2_THREADS, else all cores)")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file of option defaults; key 'model' holds the model config")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="per-pixel NLLS T2 map of a multi-echo volume")
    p.add_argument("--input", required=True, help="MEV directory")
    p.add_argument("--out", required=True, help="T2F directory")
    p.add_argument("--mode", choices=("joint_s0", "fixed_s0_first_echo"), default="joint_s0")
    p.add_argument("--crop", type=int, default=None, help="center-crop side length")
    p.add_argument("--t2-min", type=float, default=1.0)
    p.add_argument("--t2-max", type=float, default=200.0)
    p.add_argument("--timing", default=None, help="timing JSON path (default OUT/timing.json)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train the dual-task network")
    p.add_argument("--data", required=True, help="dataset directory of subjects")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--log", default=None, help="JSON-lines log (default OUT/train_log.jsonl)")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise STD on inputs")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment and quantify with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True, help="MEV directory, subject, or dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="Dice, Bland-Altman and Pearson against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True, help="metrics JSON")
    p.add_argument("--mask-source", choices=("truth", "pred"), default="truth")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bullseye", help="AHA segment means as JSON and SVG")
    p.add_argument("--t2", required=True, help="T2F directory")
    p.add_argument("--labels", required=True, help="LBL directory")
    p.add_argument("--rings", default=None, help="comma list, one ring per slice")
    p.add_argument("--out-json", required=True)
    p.add_argument("--out-svg", default=None)
    p.add_argument("--diff", default=None, help="bullseye JSON to subtract")
    p.add_argument("--vmin", type=float, default=0.0)
    p.add_argument("--vmax", type=float, default=100.0)
    p.set_defaults(func=cmd_bullseye)

    p = sub.add_parser("phantom", help="write synthetic phantom subjects")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--slices", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("bench-noise", help="retrain and evaluate at several noise levels")
    p.add_argument("--data", required=True)
    p.add_argument("--test", default=None, help="held-out dataset (default: last quarter of --data)")
    p.add_argument("--levels", default="0.01,0.03,0.05")
    p.add_argument("--out", required=True, help="table JSON")
    _add_train_flags(p)
    p.set_defaults(func=cmd_bench_noise)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, _ = pre.parse_known_args(argv)
    if known.config is None:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(known.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"--config {known.config}: {exc}")
    if not isinstance(cfg, dict):
        parser.error("--config must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for sp in sub_action.choices.values():
        sp.set_defaults(**cfg)
    parser.set_defaults(**{k: v for k, v in cfg.items() if k in ("seed", "threads")})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, sys.argv[1:] if argv is None else list(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"myot2 {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
