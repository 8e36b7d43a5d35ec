"""End-to-end desk-scale experiment: calibrate every family, then run the grid.

Results live under ``work_dir/<digest>/`` where the digest covers the config
and every module that influences a number in the grid, so edits to the
numerical code never reuse stale results while reruns of unchanged code are
free.
"""

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

from advtransfer import config as cfgmod
from advtransfer.harness import (
    AccuracyGrid,
    CalibrationReport,
    DefenseSpec,
    GridSpec,
    base_ladder,
    calibrate_range,
    run_grid,
    trained_model,
    write_grid_outputs,
)
from advtransfer.io import atomic_write_text

NUMERIC_MODULES = (
    "tensor",
    "model",
    "geometry",
    "attacks",
    "jpeg",
    "elastic",
    "advtrain",
    "data",
    "harness",
)


def source_digest(cfg):
    h = hashlib.sha256(json.dumps(cfg, sort_keys=True).encode())
    here = Path(__file__).parent
    for name in NUMERIC_MODULES:
        h.update((here / f"{name}.py").read_bytes())
    return h.hexdigest()[:16]


@dataclass
class DeskRun:
    spec: GridSpec
    reports: list
    grid: AccuracyGrid
    timings: dict
    root: Path

    @property
    def grid_cpu_seconds(self):
        return sum(self.timings["train"].values()) + self.timings["eval"]


def _log(log, msg):
    if log is not None:
        log(msg)


def calibrate_all(spec, cache, cfg, log=None):
    train, val = spec.train_data.load(), spec.eval_data.load()
    clean, _ = trained_model(DefenseSpec(), spec, cache, train)
    reports = []
    for att in spec.attacks:
        _log(log, f"calibrating {att.family}")
        rep = calibrate_range(
            att.family, base_ladder(att.family), train, val, clean, spec, cache, **cfgmod.calibration_options(cfg)
        )
        _log(log, rep.to_text())
        reports.append(rep)
    return reports


def calibrated_spec(spec, reports):
    """Grid spec whose ladders are the calibrated ones and whose rows are the
    clean model plus one model per family trained at the top of its ladder."""
    d = spec.to_dict()
    d["attacks"] = [{"family": str(r.family), "ladder": list(r.ladder)} for r in reports]
    d["defenses"] = [{"family": None, "eps_max": 0.0}] + [
        {"family": str(r.family), "eps_max": r.ladder[-1]} for r in reports
    ]
    return GridSpec.from_dict(d)


def run_desk(cfg, work_dir, log=None):
    """Calibrate, build the grid spec and run it, reusing finished stages."""
    cfg = {k: v for k, v in cfg.items() if k not in ("calibration", "cache")}
    root = Path(work_dir) / source_digest(cfg)
    cache = root / "models"
    base = cfgmod.grid_spec(cfg)

    cal_path = root / "calibration.json"
    if cal_path.exists():
        blob = json.loads(cal_path.read_text())
        reports = [CalibrationReport.from_dict(d) for d in blob["reports"]]
        cal_seconds = blob["cpu_seconds"]
    else:
        start = time.process_time()
        reports = calibrate_all(base, cache, cfg, log)
        cal_seconds = time.process_time() - start
        blob = {"reports": [r.to_dict() for r in reports], "cpu_seconds": cal_seconds}
        atomic_write_text(cal_path, json.dumps(blob, indent=2) + "\n")
        atomic_write_text(root / "calibration.txt", "\n".join(r.to_text() for r in reports))

    spec = calibrated_spec(base, reports)
    grid_dir = root / "grid"
    timing_path = grid_dir / "timings.json"
    if timing_path.exists():
        grid = AccuracyGrid.read(grid_dir / "grid.csv")
        timings = json.loads(timing_path.read_text())
    else:
        timings = {}

        def progress(row, col, acc):
            _log(log, f"{row} vs {col}: {acc:.4f}")

        grid = run_grid(spec, cache, progress, timings)
        timings["calibration"] = cal_seconds
        write_grid_outputs(grid, spec, grid_dir)
        atomic_write_text(timing_path, json.dumps(timings, indent=2) + "\n")
    return DeskRun(spec, reports, grid, timings, root)
