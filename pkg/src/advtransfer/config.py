"""Plain-text experiment configuration.

One ``key = value`` pair per line; ``#`` starts a comment; blank lines are
ignored; list values are comma separated. Recognized keys:

    train.path | train.classes | train.per_class | train.size | train.seed
    eval.path | eval.classes | eval.per_class | eval.size | eval.seed | eval.batch
    schedule.epochs | schedule.batch_size | schedule.base_lr | schedule.warmup_epochs
    schedule.decay_epochs | schedule.decay_factor | schedule.momentum | schedule.weight_decay
    seed.model | seed.train | seed.eval
    jpeg.quality
    attacks            families evaluated as grid columns
    defenses           grid rows: ``clean``, a family (trained at the top of its
                       ladder) or ``family@eps``
    ladder.<family>    explicit eps ladder
    calibration        calibration.json whose ladders fill in missing ladder.<family>
    calibrate.comparable | calibrate.substantial | calibrate.growth | calibrate.refine
    cache              checkpoint cache directory
    workers            evaluation processes
"""

import json
from dataclasses import fields
from pathlib import Path

from advtransfer.errors import InvalidArgument
from advtransfer.geometry import Family
from advtransfer.harness import AttackSpec, DataSpec, DefenseSpec, GridSpec, base_ladder
from advtransfer.model import TrainSchedule

DATA_KEYS = {"path": str, "classes": int, "per_class": int, "size": int, "seed": int}
SCHEDULE_TYPES = {f.name: f.type for f in fields(TrainSchedule)}
TOP_KEYS = {
    "seed.model",
    "seed.train",
    "seed.eval",
    "jpeg.quality",
    "attacks",
    "defenses",
    "calibration",
    "calibrate.comparable",
    "calibrate.substantial",
    "calibrate.growth",
    "calibrate.refine",
    "cache",
    "workers",
    "eval.batch",
}


class ConfigError(InvalidArgument):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = [str(path)] if path is not None else []
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


def _known(key):
    if key in TOP_KEYS:
        return True
    head, _, tail = key.partition(".")
    if head in ("train", "eval") and tail in DATA_KEYS:
        return True
    if head == "schedule" and tail in SCHEDULE_TYPES:
        return True
    if head == "ladder":
        return tail in {str(f) for f in Family}
    return False


def parse_config(text, path=None):
    """Parse ``key = value`` text into an ordered dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", path, lineno)
        if not _known(key):
            raise ConfigError(f"unknown key {key!r}", path, lineno)
        if key in out:
            raise ConfigError(f"duplicate key {key!r}", path, lineno)
        out[key] = value
    return out


PATH_KEYS = ("train.path", "eval.path", "calibration", "cache")


def load_config(path):
    """Read a config file; relative paths in it are taken relative to the file."""
    path = Path(path)
    cfg = parse_config(path.read_text(), path)
    for key in PATH_KEYS:
        if key in cfg and not Path(cfg[key]).is_absolute():
            cfg[key] = str(path.parent / cfg[key])
    return cfg


def as_list(value):
    return [v.strip() for v in value.split(",") if v.strip()]


def family(name):
    try:
        return Family(name.strip())
    except ValueError:
        raise ConfigError(f"unknown attack family {name.strip()!r}") from None


def _num(value, kind, key):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None


def data_spec(cfg, prefix, default):
    kw = {}
    for name, kind in DATA_KEYS.items():
        key = f"{prefix}.{name}"
        if key in cfg:
            kw[name] = cfg[key] if kind is str else _num(cfg[key], kind, key)
    return DataSpec(**{**default, **kw})


def schedule(cfg):
    kw = {}
    for name in SCHEDULE_TYPES:
        key = f"schedule.{name}"
        if key not in cfg:
            continue
        if name == "decay_epochs":
            kw[name] = tuple(_num(v, int, key) for v in as_list(cfg[key]))
        elif name in ("epochs", "batch_size", "warmup_epochs"):
            kw[name] = _num(cfg[key], int, key)
        else:
            kw[name] = _num(cfg[key], float, key)
    return TrainSchedule(**kw)


def ladders(cfg, families):
    """Eps ladder per family: explicit keys first, then the calibration file,
    then the unscaled base ladder."""
    calibrated = {}
    if "calibration" in cfg:
        blob = json.loads(Path(cfg["calibration"]).read_text())
        for entry in blob.get("reports", []):
            calibrated[Family(entry["family"])] = entry["ladder"]
    out = {}
    for fam in families:
        fam = Family(fam)
        key = f"ladder.{fam}"
        if key in cfg:
            out[fam] = [_num(v, float, key) for v in as_list(cfg[key])]
        elif fam in calibrated:
            out[fam] = calibrated[fam]
        else:
            out[fam] = base_ladder(fam)
    return out


def seeds(cfg, override=None):
    if override is not None:
        return {"model_seed": override, "train_seed": override, "eval_seed": override}
    return {
        "model_seed": _num(cfg.get("seed.model", "0"), int, "seed.model"),
        "train_seed": _num(cfg.get("seed.train", "0"), int, "seed.train"),
        "eval_seed": _num(cfg.get("seed.eval", "0"), int, "seed.eval"),
    }


def grid_spec(cfg, seed=None):
    """Build a :class:`GridSpec` from a parsed config."""
    families = [family(f) for f in as_list(cfg.get("attacks", ",".join(str(f) for f in Family)))]
    ladder = ladders(cfg, families)
    defenses = []
    for item in as_list(cfg.get("defenses", "clean," + ",".join(str(f) for f in families))):
        if item == "clean":
            defenses.append(DefenseSpec())
        elif "@" in item:
            fam, _, eps = item.partition("@")
            defenses.append(DefenseSpec(family(fam), _num(eps, float, "defenses")))
        else:
            fam = family(item)
            top = ladder[fam] if fam in ladder else ladders(cfg, [fam])[fam]
            defenses.append(DefenseSpec(fam, top[-1]))
    return GridSpec(
        defenses=defenses,
        attacks=[AttackSpec(f, tuple(ladder[f])) for f in families],
        train_data=data_spec(cfg, "train", {"seed": 0}),
        eval_data=data_spec(cfg, "eval", {"per_class": 50, "seed": 1}),
        schedule=schedule(cfg),
        quality=_num(cfg.get("jpeg.quality", "75"), int, "jpeg.quality"),
        eval_batch=_num(cfg.get("eval.batch", "100"), int, "eval.batch"),
        workers=_num(cfg.get("workers", "1"), int, "workers"),
        **seeds(cfg, seed),
    )


def calibration_options(cfg):
    opts = {}
    for name, kind in (("comparable", float), ("substantial", float), ("growth", float), ("refine", int)):
        key = f"calibrate.{name}"
        if key in cfg:
            opts[name] = _num(cfg[key], kind, key)
    return opts
