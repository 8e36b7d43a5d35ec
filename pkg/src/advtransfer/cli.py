"""Command line entry point: ``advtransfer <subcommand> ...``.

Every failure exits nonzero after printing one JSON object on stderr, e.g.
``{"error": "DatasetFormatError", "message": "...", "path": "...", "offset": 16}``.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from advtransfer import config as cfgmod
from advtransfer.advtrain import AdvTrainConfig, adv_train, clean_train, write_log
from advtransfer.attacks import attack_options, eval_steps, run_attack, sample_targets
from advtransfer.data import load_dataset, save_dataset, synth_dataset
from advtransfer.errors import DatasetFormatError, GridCellError, InvalidArgument
from advtransfer.geometry import Family
from advtransfer.harness import (
    DataSpec,
    DefenseSpec,
    GridSpec,
    base_ladder,
    calibrate_range,
    dump_gallery,
    fmt_eps,
    run_grid,
    trained_model,
    write_grid_outputs,
)
from advtransfer.io import atomic_write_text, write_tensor
from advtransfer.jpeg import DEFAULT_QUALITY, constants_report
from advtransfer.model import accuracy, load_checkpoint, reference_cnn, save_checkpoint

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_GRID = 4
EXIT_OTHER = 1


def _config(args):
    return cfgmod.load_config(args.config) if getattr(args, "config", None) else {}


def _train_data(args, cfg):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    return cfgmod.data_spec(cfg, "train", {"seed": 0}).load()


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_synth(args):
    data = synth_dataset(args.classes, args.per_class, (args.size, args.size), args.seed)
    save_dataset(data, args.out)
    print(json.dumps({"out": str(args.out), "count": len(data), "classes": data.num_classes}))


def cmd_train(args):
    cfg = _config(args)
    data = _train_data(args, cfg)
    seeds = cfgmod.seeds(cfg, args.seed)
    model = reference_cnn(data.images.shape[1:], data.num_classes, np.random.default_rng(seeds["model_seed"]))
    trained, logs = clean_train(model, data, cfgmod.schedule(cfg), seeds["train_seed"])
    out = Path(args.out)
    save_checkpoint(trained, out / "model.pbm")
    atomic_write_text(
        out / "train_log.csv",
        "epoch,lr,loss,train_acc\n" + "".join(f"{e.epoch},{e.lr:.6f},{e.loss:.6f},{e.accuracy:.6f}\n" for e in logs),
    )
    print(json.dumps({"model": str(out / "model.pbm"), "train_accuracy": accuracy(trained, data)}))


def cmd_advtrain(args):
    cfg = _config(args)
    data = _train_data(args, cfg)
    seeds = cfgmod.seeds(cfg, args.seed)
    model = reference_cnn(data.images.shape[1:], data.num_classes, np.random.default_rng(seeds["model_seed"]))
    quality = int(cfg.get("jpeg.quality", DEFAULT_QUALITY))
    conf = AdvTrainConfig(
        args.family, args.eps_max, args.steps, cfgmod.schedule(cfg), seeds["train_seed"], quality=quality
    )
    trained, rows = adv_train(model, data, conf)
    out = Path(args.out)
    save_checkpoint(trained, out / "model.pbm")
    write_log(rows, out / "train_log.csv")
    print(json.dumps({"model": str(out / "model.pbm"), "final_adv_acc": rows[-1]["adv_acc"]}))


def cmd_attack(args):
    model = load_checkpoint(args.model)
    data = load_dataset(args.data, model.num_classes)
    if args.limit is not None:
        data = data.subset(slice(0, args.limit))
    family = Family(args.family)
    steps = args.steps or eval_steps(family)
    rng = np.random.default_rng(args.seed or 0)
    targets = sample_targets(data.labels, data.num_classes, rng)
    res = run_attack(model, data.images, targets, family, args.eps, steps, rng, **attack_options(family, args.quality))
    out = Path(args.out)
    write_tensor(out / "adversarial.bin", res.x_adv)
    if args.dump_flow:
        if family != Family.ELASTIC:
            raise InvalidArgument("--dump-flow needs the elastic family")
        write_tensor(out / "field_W.bin", res.aux["field"])
        write_tensor(out / "flow_V.bin", res.aux["flow"])
    summary = {
        "family": str(family),
        "eps": args.eps,
        "steps": steps,
        "accuracy": float(np.mean(res.pred == data.labels)),
        "target_success": float(np.mean(res.success)),
        "max_residual": float(np.max(res.residual)),
    }
    atomic_write_text(out / "attack.json", json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


def _grid_spec(args):
    if args.manifest:
        spec = GridSpec.from_manifest(json.loads(Path(args.manifest).read_text()))
    else:
        spec = cfgmod.grid_spec(_config(args), args.seed)
    if args.workers is not None:
        spec.workers = args.workers
    return spec


def cmd_grid(args):
    spec = _grid_spec(args)
    cfg = _config(args) if not args.manifest else {}
    cache = args.cache or cfg.get("cache") or str(Path(args.out) / "cache")

    def progress(row, col, acc):
        if args.verbose:
            _log(f"{row} vs {col}: {acc:.4f}")

    grid = run_grid(spec, cache, progress)
    write_grid_outputs(grid, spec, args.out)
    print(json.dumps({"grid": str(Path(args.out) / "grid.csv"), "rows": len(grid.rows), "columns": len(grid.columns)}))


def cmd_calibrate(args):
    cfg = _config(args)
    spec = cfgmod.grid_spec({k: v for k, v in cfg.items() if k != "calibration"}, args.seed)
    cache = args.cache or cfg.get("cache") or str(Path(args.out) / "cache")
    families = [Family(f) for f in (args.families or [str(a.family) for a in spec.attacks])]
    train_data, eval_data = spec.train_data.load(), spec.eval_data.load()
    clean, _ = trained_model(DefenseSpec(), spec, cache, train_data)
    reports = []
    for fam in families:
        _log(f"calibrating {fam}")
        rep = calibrate_range(
            fam, base_ladder(fam), train_data, eval_data, clean, spec, cache, **cfgmod.calibration_options(cfg)
        )
        reports.append(rep)
        _log(rep.to_text())
    out = Path(args.out)
    blob = {"reports": [r.to_dict() for r in reports], "ok": all(r.ok for r in reports)}
    atomic_write_text(out / "calibration.json", json.dumps(blob, indent=2) + "\n")
    atomic_write_text(out / "calibration.txt", "\n".join(r.to_text() for r in reports))
    print(json.dumps({"ok": blob["ok"], "ladders": {str(r.family): [fmt_eps(e) for e in r.ladder] for r in reports}}))
    if not blob["ok"]:
        failed = [str(r.family) for r in reports if not r.ok]
        raise CalibrationFailed(f"calibration failed for {', '.join(failed)}")


class CalibrationFailed(RuntimeError):
    pass


def cmd_gallery(args):
    model = load_checkpoint(args.model)
    data = load_dataset(args.data, model.num_classes)
    images = data.images[: args.count]
    paths = dump_gallery(model, images, args.families, args.eps, args.out, seed=args.seed or 0, quality=args.quality)
    print(json.dumps({"out": str(args.out), "files": len(paths)}))


def build_parser():
    p = argparse.ArgumentParser(prog="advtransfer", description="Adversarial robustness transfer experiments.")
    p.add_argument(
        "--jpeg-constants",
        nargs="?",
        const=DEFAULT_QUALITY,
        type=int,
        metavar="QUALITY",
        help="print the JPEG quantization tables and color constants and exit",
    )
    sub = p.add_subparsers(dest="command")

    def common(sp, config=True):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override every seed")
        if config:
            sp.add_argument("--config", help="key=value experiment config")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    common(sp, config=False)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--per-class", type=int, default=200)
    sp.add_argument("--size", type=int, default=32)
    sp.set_defaults(func=cmd_synth, seed=0)

    sp = sub.add_parser("train", help="clean training")
    common(sp)
    sp.add_argument("--data", help="dataset directory (default: synthetic data from the config)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("advtrain", help="adversarial training")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--family", required=True, choices=[str(f) for f in Family])
    sp.add_argument("--eps-max", type=float, required=True)
    sp.add_argument("--steps", type=int, default=None, help="attack steps per batch (default: training count)")
    sp.set_defaults(func=cmd_advtrain)

    sp = sub.add_parser("attack", help="attack a dataset with one model")
    common(sp, config=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--family", required=True, choices=[str(f) for f in Family])
    sp.add_argument("--eps", type=float, required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--limit", type=int, default=None, help="attack only the first N images")
    sp.add_argument("--quality", type=int, default=DEFAULT_QUALITY)
    sp.add_argument("--dump-flow", action="store_true", help="also write the elastic W and V fields")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("grid", help="train every row and evaluate every column")
    common(sp)
    sp.add_argument("--manifest", help="rerun from a manifest.json instead of a config")
    sp.add_argument("--cache", help="checkpoint cache directory (default: OUT/cache)")
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("calibrate", help="calibrate eps ladders")
    common(sp)
    sp.add_argument("--cache")
    sp.add_argument("--families", nargs="+", choices=[str(f) for f in Family])
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("gallery", help="write clean and attacked images as PPM")
    common(sp, config=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--families", nargs="+", required=True, choices=[str(f) for f in Family])
    sp.add_argument("--eps", nargs="+", type=float, required=True)
    sp.add_argument("--count", type=int, default=4)
    sp.add_argument("--quality", type=int, default=DEFAULT_QUALITY)
    sp.set_defaults(func=cmd_gallery)
    return p


def _error_line(exc):
    info = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("path", "offset", "line", "row", "column"):
        val = getattr(exc, attr, None)
        if val is not None:
            info[attr] = str(val) if isinstance(val, Path) else val
    return json.dumps(info)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jpeg_constants is not None:
        try:
            sys.stdout.write(constants_report(args.jpeg_constants))
        except InvalidArgument as exc:
            print(_error_line(exc), file=sys.stderr)
            return EXIT_USAGE
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "UsageError", "message": "no subcommand given"}), file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except (DatasetFormatError, FileNotFoundError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_DATA
    except GridCellError as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_GRID
    except (InvalidArgument, ValueError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        print(_error_line(exc), file=sys.stderr)
        return EXIT_OTHER
    return 0


if __name__ == "__main__":
    sys.exit(main())
