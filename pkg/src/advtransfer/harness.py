"""Experiment orchestration: the attack-vs-defense accuracy grid, range
calibration, grid slicing and attacked-image galleries.

Grid rows are trained models (a clean-training row plus one adversarially
trained row per defense); columns are (attack family, eps) pairs. Trained
models are cached on disk under a hash of everything that determines them.
"""

import concurrent.futures
import csv
import hashlib
import io
import json
import math
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from advtransfer import __version__
from advtransfer.advtrain import AdvTrainConfig, adv_train, clean_train, log_csv
from advtransfer.attacks import attack_options, eval_steps, evaluate_accuracy, run_attack, sample_targets, train_steps
from advtransfer.data import load_dataset, synth_dataset
from advtransfer.errors import GridCellError, InvalidArgument
from advtransfer.geometry import TABLE1, Family, geometric_ladder
from advtransfer.io import atomic_write_text, write_ppm
from advtransfer.jpeg import DEFAULT_QUALITY, quant_tables
from advtransfer.model import TrainSchedule, accuracy, load_checkpoint, reference_cnn, save_checkpoint

DECIMALS = 6
FAMILY_ORDER = list(Family)


def fmt_eps(eps):
    return format(float(eps), ".6g")


def column_label(family, eps):
    return f"{Family(family)}@{fmt_eps(eps)}"


def parse_label(label):
    """Split ``family@eps`` into (Family, float); ``clean`` gives (None, 0.0)."""
    if label == "clean":
        return None, 0.0
    fam, _, eps = label.partition("@")
    return Family(fam), float(eps)


@dataclass(frozen=True)
class DataSpec:
    """A dataset directory, or synthetic data when ``path`` is None."""

    path: str = None
    classes: int = 4
    per_class: int = 200
    size: int = 32
    seed: int = 0

    def load(self):
        if self.path is not None:
            return load_dataset(self.path)
        return synth_dataset(self.classes, self.per_class, (self.size, self.size), self.seed)


@dataclass(frozen=True)
class DefenseSpec:
    """A grid row: clean training when ``family`` is None."""

    family: Family = None
    eps_max: float = 0.0

    def __post_init__(self):
        if self.family is not None:
            object.__setattr__(self, "family", Family(self.family))
        if self.eps_max < 0:
            raise InvalidArgument("eps_max must be non-negative")

    @property
    def label(self):
        return "clean" if self.family is None else column_label(self.family, self.eps_max)


@dataclass(frozen=True)
class AttackSpec:
    """A block of grid columns: one family evaluated along an eps ladder."""

    family: Family
    ladder: tuple

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        ladder = tuple(float(e) for e in self.ladder)
        if not ladder:
            raise InvalidArgument(f"empty eps ladder for {self.family}")
        if ladder[0] < 0 or any(b <= a for a, b in zip(ladder, ladder[1:])):
            raise InvalidArgument(f"eps ladder for {self.family} must be non-negative and strictly increasing")
        object.__setattr__(self, "ladder", ladder)

    @property
    def labels(self):
        return [column_label(self.family, e) for e in self.ladder]


@dataclass
class GridSpec:
    defenses: list
    attacks: list
    train_data: DataSpec = field(default_factory=DataSpec)
    eval_data: DataSpec = field(default_factory=lambda: DataSpec(per_class=50, seed=1))
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    model_seed: int = 0
    train_seed: int = 0
    eval_seed: int = 0
    quality: int = DEFAULT_QUALITY
    eval_batch: int = 100
    workers: int = 1

    def __post_init__(self):
        self.defenses = [d if isinstance(d, DefenseSpec) else DefenseSpec(**d) for d in self.defenses]
        self.attacks = [a if isinstance(a, AttackSpec) else AttackSpec(**a) for a in self.attacks]
        if not self.defenses or not self.attacks:
            raise InvalidArgument("a grid needs at least one row and one column")
        labels = [d.label for d in self.defenses]
        if len(set(labels)) != len(labels):
            raise InvalidArgument("duplicate defense rows")
        cols = self.column_labels
        if len(set(cols)) != len(cols):
            raise InvalidArgument("duplicate attack columns")

    @property
    def row_labels(self):
        return [d.label for d in self.defenses]

    @property
    def columns(self):
        return [(a.family, e) for a in self.attacks for e in a.ladder]

    @property
    def column_labels(self):
        return [column_label(f, e) for f, e in self.columns]

    def to_dict(self):
        return {
            "defenses": [
                {"family": None if d.family is None else str(d.family), "eps_max": d.eps_max} for d in self.defenses
            ],
            "attacks": [{"family": str(a.family), "ladder": list(a.ladder)} for a in self.attacks],
            "train_data": asdict(self.train_data),
            "eval_data": asdict(self.eval_data),
            "schedule": asdict(self.schedule),
            "model_seed": self.model_seed,
            "train_seed": self.train_seed,
            "eval_seed": self.eval_seed,
            "quality": self.quality,
            "eval_batch": self.eval_batch,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sched = dict(d.pop("schedule", {}))
        if "decay_epochs" in sched:
            sched["decay_epochs"] = tuple(sched["decay_epochs"])
        return cls(
            defenses=d.pop("defenses"),
            attacks=d.pop("attacks"),
            train_data=DataSpec(**d.pop("train_data", {})),
            eval_data=DataSpec(**d.pop("eval_data", {})),
            schedule=TrainSchedule(**sched),
            **{k: d[k] for k in ("model_seed", "train_seed", "eval_seed", "quality", "eval_batch", "workers") if k in d},
        )

    def manifest(self):
        """Everything needed to rerun the grid, plus the derived constants it used."""
        q = quant_tables(self.quality)
        return {
            "format": "advtransfer-grid-manifest/1",
            "version": __version__,
            "spec": self.to_dict(),
            "steps": {str(f): {"train": train_steps(f), "eval": eval_steps(f)} for f in Family},
            "step_rule": "eps/sqrt(steps)",
            "jpeg": {"quality": self.quality, "luma": q[0].tolist(), "chroma": q[1].tolist()},
            "rows": self.row_labels,
            "columns": self.column_labels,
        }

    @classmethod
    def from_manifest(cls, manifest):
        return cls.from_dict(manifest["spec"])


class AccuracyGrid:
    """Accuracies in [0, 1], rounded to six decimals so CSV round trips are exact."""

    def __init__(self, rows, columns, values):
        values = np.round(np.asarray(values, dtype=np.float64), DECIMALS)
        if values.shape != (len(rows), len(columns)):
            raise InvalidArgument(f"grid values {values.shape} do not match {len(rows)}x{len(columns)} labels")
        if np.any(values < 0) or np.any(values > 1):
            raise InvalidArgument("accuracies must lie in [0, 1]")
        self.rows = list(rows)
        self.columns = list(columns)
        self.values = values

    def __eq__(self, other):
        return (
            isinstance(other, AccuracyGrid)
            and self.rows == other.rows
            and self.columns == other.columns
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return f"AccuracyGrid({len(self.rows)}x{len(self.columns)})"

    def value(self, row, column):
        return float(self.values[self.rows.index(row), self.columns.index(column)])

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model"] + self.columns)
        for label, row in zip(self.rows, self.values):
            writer.writerow([label] + [f"{v:.{DECIMALS}f}" for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        reader = list(csv.reader(io.StringIO(text)))
        if not reader or reader[0][:1] != ["model"]:
            raise InvalidArgument("grid CSV must start with a 'model' header")
        columns = reader[0][1:]
        rows, values = [], []
        for line in reader[1:]:
            if not line:
                continue
            rows.append(line[0])
            values.append([float(v) for v in line[1:]])
        return cls(rows, columns, np.array(values).reshape(len(rows), len(columns)))

    def write(self, path):
        atomic_write_text(path, self.to_csv())

    @classmethod
    def read(cls, path):
        return cls.from_csv(Path(path).read_text())


# --- training with a checkpoint cache ---------------------------------------


def defense_key(defense, spec):
    """Hash of everything that determines a trained row model."""
    payload = {
        "defense": {"family": None if defense.family is None else str(defense.family), "eps_max": defense.eps_max},
        "train_data": asdict(spec.train_data),
        "schedule": asdict(spec.schedule),
        "model_seed": spec.model_seed,
        "train_seed": spec.train_seed,
        "quality": spec.quality if defense.family == Family.JPEG else None,
        "train_steps": None if defense.family is None else train_steps(defense.family),
        "version": __version__,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:20]


def train_defense(defense, spec, train_data=None):
    """Train one grid row from scratch; returns (model, log CSV text)."""
    data = train_data if train_data is not None else spec.train_data.load()
    init = reference_cnn(data.images.shape[1:], data.num_classes, np.random.default_rng(spec.model_seed))
    if defense.family is None:
        model, logs = clean_train(init, data, spec.schedule, spec.train_seed)
        text = "epoch,lr,loss,train_acc\n" + "".join(
            f"{e.epoch},{e.lr:.6f},{e.loss:.6f},{e.accuracy:.6f}\n" for e in logs
        )
        return model, text
    cfg = AdvTrainConfig(defense.family, defense.eps_max, schedule=spec.schedule, seed=spec.train_seed, quality=spec.quality)
    model, rows = adv_train(init, data, cfg)
    return model, log_csv(rows)


def trained_model(defense, spec, cache_dir, train_data=None):
    """Load the row model from ``cache_dir`` or train and cache it.

    The sidecar ``<key>.json`` records the CPU seconds the training took.
    """
    cache_dir = Path(cache_dir)
    key = defense_key(defense, spec)
    path = cache_dir / f"{key}.pbm"
    if path.exists():
        return load_checkpoint(path), path
    start = time.process_time()
    model, log = train_defense(defense, spec, train_data)
    meta = {"label": defense.label, "spec": spec.to_dict(), "train_cpu_seconds": time.process_time() - start}
    atomic_write_text(cache_dir / f"{key}.log.csv", log)
    atomic_write_text(cache_dir / f"{key}.json", json.dumps(meta, indent=2))
    save_checkpoint(model, path)
    return model, path


# --- evaluation ---------------------------------------------------------------


def eval_rng(seed, family):
    """Generator shared by every cell of a family's column block.

    All rows and all eps values of one family start from the same stream, so
    targets and random starts are paired across budgets and models.
    """
    return np.random.default_rng([int(seed), FAMILY_ORDER.index(Family(family))])


def evaluate_cell(model, data, family, eps, seed, quality=DEFAULT_QUALITY, batch_size=100):
    return evaluate_accuracy(
        model, data, family, eps, eval_rng(seed, family), batch_size=batch_size, **attack_options(family, quality)
    )


def _eval_job(ckpt_path, data_spec, family, eps, seed, quality, batch_size):
    model = load_checkpoint(ckpt_path)
    return evaluate_cell(model, data_spec.load(), family, eps, seed, quality, batch_size)


def training_seconds(defense, spec, cache_dir):
    """CPU seconds recorded when the cached row model was trained."""
    meta = Path(cache_dir) / f"{defense_key(defense, spec)}.json"
    return float(json.loads(meta.read_text()).get("train_cpu_seconds", 0.0))


def run_grid(spec, cache_dir=None, progress=None, timings=None):
    """Train (or load) every row model and evaluate every column attack.

    ``progress(row, column, accuracy)`` is called as cells finish. Failures
    raise :class:`GridCellError` naming the cell. A ``timings`` dict receives
    the CPU seconds of each row's training (as recorded in the cache) and of
    the serial evaluation.
    """
    if cache_dir is None:
        with tempfile.TemporaryDirectory() as tmp:
            return run_grid(spec, tmp, progress, timings)
    train_data = spec.train_data.load()
    eval_data = spec.eval_data.load()
    paths = {}
    for defense in spec.defenses:
        try:
            _, paths[defense.label] = trained_model(defense, spec, cache_dir, train_data)
        except Exception as exc:
            raise GridCellError(defense.label, "(training)", exc) from exc
    if timings is not None:
        timings["train"] = {d.label: training_seconds(d, spec, cache_dir) for d in spec.defenses}
    start = time.process_time()
    cells = [(r, c) for r in range(len(spec.defenses)) for c in range(len(spec.columns))]
    values = np.zeros((len(spec.defenses), len(spec.columns)))
    rows, cols = spec.row_labels, spec.column_labels

    def record(r, c, acc):
        values[r, c] = acc
        if progress is not None:
            progress(rows[r], cols[c], acc)

    if spec.workers <= 1:
        models = {}
        for r, c in cells:
            family, eps = spec.columns[c]
            try:
                model = models.get(r)
                if model is None:
                    models.clear()
                    model = models[r] = load_checkpoint(paths[rows[r]])
                acc = evaluate_cell(model, eval_data, family, eps, spec.eval_seed, spec.quality, spec.eval_batch)
            except Exception as exc:
                raise GridCellError(rows[r], cols[c], exc) from exc
            record(r, c, acc)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=spec.workers) as pool:
            futures = {
                pool.submit(
                    _eval_job,
                    paths[rows[r]],
                    spec.eval_data,
                    *spec.columns[c],
                    spec.eval_seed,
                    spec.quality,
                    spec.eval_batch,
                ): (r, c)
                for r, c in cells
            }
            for fut in concurrent.futures.as_completed(futures):
                r, c = futures[fut]
                try:
                    acc = fut.result()
                except Exception as exc:
                    raise GridCellError(rows[r], cols[c], exc) from exc
                record(r, c, acc)
    if timings is not None:
        # worker processes are not counted by process_time
        timings["eval"] = time.process_time() - start if spec.workers <= 1 else None
    return AccuracyGrid(rows, cols, values)


def write_grid_outputs(grid, spec, out_dir):
    out_dir = Path(out_dir)
    grid.write(out_dir / "grid.csv")
    atomic_write_text(out_dir / "manifest.json", json.dumps(spec.manifest(), indent=2, sort_keys=True) + "\n")


# --- calibration --------------------------------------------------------------


@dataclass
class CalibrationReport:
    family: Family
    base_ladder: list
    scale: float
    ladder: list
    clean_accuracy: float
    clean_curve: list  # clean model accuracy at each rung of ``ladder``
    principle2: list  # per rung: attack drops clean accuracy by >= max_drop
    min_eps_clean_accuracy: float  # clean accuracy of the model adversarially trained at ladder[0]
    principle1: bool
    search: list  # (scale, accuracy at the top rung) for every probe
    comparable: float = 0.05
    substantial: float = 0.50
    message: str = ""

    @property
    def ok(self):
        return bool(self.principle1 and self.principle2 and self.principle2[-1])

    def to_dict(self):
        d = asdict(self)
        d["family"] = str(self.family)
        d["ok"] = self.ok
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("ok", None)
        d["family"] = Family(d["family"])
        return cls(**d)

    def to_text(self):
        lines = [
            f"family: {self.family}",
            f"status: {'ok' if self.ok else 'FAILED'}" + (f" ({self.message})" if self.message else ""),
            f"scale: {self.scale:.6g} (base ladder {', '.join(fmt_eps(e) for e in self.base_ladder)})",
            f"clean accuracy: {self.clean_accuracy:.6f}",
        ]
        if self.principle1 is not None and self.min_eps_clean_accuracy is not None:
            lines.append(
                f"principle 1 at eps={fmt_eps(self.ladder[0])}: adversarially trained clean accuracy "
                f"{self.min_eps_clean_accuracy:.6f}, drop {self.clean_accuracy - self.min_eps_clean_accuracy:+.6f} "
                f"(allowed {self.comparable:g}) -> {'yes' if self.principle1 else 'no'}"
            )
        lines.append("eps, clean-model accuracy under attack, drop, principle 2")
        for eps, acc, p2 in zip(self.ladder, self.clean_curve, self.principle2):
            lines.append(f"{fmt_eps(eps)}, {acc:.6f}, {self.clean_accuracy - acc:.6f}, {'yes' if p2 else 'no'}")
        lines.append("search (scale, top-rung accuracy): " + "; ".join(f"{s:.6g}: {a:.6f}" for s, a in self.search))
        return "\n".join(lines) + "\n"


def base_ladder(family, size=6):
    row = TABLE1[Family(family)]
    return geometric_ladder(row["base"], size)


def calibrate_range(
    family,
    base,
    train_data,
    eval_data,
    clean_model,
    spec=None,
    cache_dir=None,
    comparable=0.05,
    substantial=0.50,
    growth=2.0,
    refine=4,
    max_probes=16,
    train_check=True,
):
    """Scale ``base`` so both range principles hold.

    Principle 2: at the top rung the attack lowers the clean model's accuracy
    by at least ``substantial``. Principle 1: a model adversarially trained at
    the bottom rung keeps clean accuracy within ``comparable`` of the clean
    model. The search finds the smallest scale meeting principle 2 (geometric
    bracketing by ``growth`` then ``refine`` log-space bisections) and then
    checks principle 1 at that scale.
    """
    family = Family(family)
    base = [float(e) for e in base]
    spec = spec or GridSpec([DefenseSpec()], [AttackSpec(family, (1.0,))])
    clean_acc = accuracy(clean_model, eval_data)

    def top_accuracy(scale):
        return evaluate_cell(clean_model, eval_data, family, base[-1] * scale, spec.eval_seed, spec.quality, spec.eval_batch)

    def passes(acc):
        return clean_acc - acc >= substantial - 1e-12

    search = []
    if all(e == 0 for e in base):
        acc = top_accuracy(1.0)
        search.append((1.0, acc))
        return CalibrationReport(
            family, base, 1.0, base, clean_acc, [acc] * len(base), [passes(acc)] * len(base), None, False, search,
            comparable, substantial, "eps ladder is all zeros: the attack never changes the image",
        )
    scale = 1.0
    acc = top_accuracy(scale)
    search.append((scale, acc))
    lo = hi = None  # largest failing / smallest passing scale
    if passes(acc):
        hi = scale
    else:
        lo = scale
    while (lo is None or hi is None) and len(search) < max_probes:
        scale = hi / growth if lo is None else lo * growth
        acc = top_accuracy(scale)
        search.append((scale, acc))
        if passes(acc):
            hi = scale
        else:
            lo = scale
    if hi is None:
        return CalibrationReport(
            family, base, scale, [e * scale for e in base], clean_acc, [acc] * len(base), [False] * len(base), None,
            False, search, comparable, substantial, "no scale within the search bounds reaches principle 2",
        )
    if lo is not None:
        for _ in range(refine):
            mid = math.sqrt(lo * hi)
            acc = top_accuracy(mid)
            search.append((mid, acc))
            if passes(acc):
                hi = mid
            else:
                lo = mid
    scale = hi
    ladder = [e * scale for e in base]
    curve = [
        evaluate_cell(clean_model, eval_data, family, e, spec.eval_seed, spec.quality, spec.eval_batch) for e in ladder
    ]
    p2 = [passes(a) for a in curve]
    p1_acc, p1 = None, None
    if train_check:
        if cache_dir is None:
            tmp = tempfile.TemporaryDirectory()
            cache_dir = tmp.name
        adv_model, _ = trained_model(DefenseSpec(family, ladder[0]), spec, cache_dir, train_data)
        p1_acc = accuracy(adv_model, eval_data)
        p1 = clean_acc - p1_acc <= comparable + 1e-12
    msg = "" if (p2[-1] and p1 is not False) else "principle 1 fails at the bottom rung"
    return CalibrationReport(
        family, base, scale, ladder, clean_acc, curve, p2, p1_acc, p1, search, comparable, substantial, msg
    )


# --- slicing ------------------------------------------------------------------


def _selector(labels, spec, what):
    if spec is None:
        return list(range(len(labels)))
    if callable(spec):
        picked = [i for i, lab in enumerate(labels) if spec(lab)]
    else:
        wanted = list(spec)
        missing = [w for w in wanted if w not in labels]
        if missing:
            raise InvalidArgument(f"unknown {what} labels: {missing}")
        picked = [i for i, lab in enumerate(labels) if lab in set(wanted)]
    if not picked:
        raise InvalidArgument(f"{what} filter selects nothing")
    return picked


def slice_grid(grid, rows=None, columns=None):
    """Sub-grid by row and column filters.

    A filter is None (keep all), a collection of labels, or a predicate on a
    label. Label order of the original grid is preserved.
    """
    r = _selector(grid.rows, rows, "row")
    c = _selector(grid.columns, columns, "column")
    return AccuracyGrid([grid.rows[i] for i in r], [grid.columns[j] for j in c], grid.values[np.ix_(r, c)])


def family_columns(grid, family):
    family = Family(family)
    return [c for c in grid.columns if parse_label(c)[0] == family]


def attack_strength(grid):
    """Mean accuracy per attack family over all rows and that family's columns.

    Lower means stronger.
    """
    out = {}
    for fam in Family:
        cols = family_columns(grid, fam)
        if cols:
            out[fam] = float(slice_grid(grid, columns=cols).values.mean())
    return out


def truncated_view(grid, high_family, low_family, keep=None):
    """Keep only the top rungs of ``high_family`` and the bottom rungs of
    ``low_family``: the kind of truncated range that can invert which attack
    looks stronger. ``keep`` defaults to half of each ladder."""
    high = family_columns(grid, high_family)
    low = family_columns(grid, low_family)
    k_hi = keep or max(1, len(high) // 2)
    k_lo = keep or max(1, len(low) // 2)
    chosen = set(high[-k_hi:]) | set(low[:k_lo])
    return slice_grid(grid, columns=lambda c: c in chosen)


def ordering(strengths, a, b):
    """-1 if family ``a`` is stronger (lower accuracy) than ``b``, 1 if weaker, 0 on a tie."""
    sa, sb = strengths[Family(a)], strengths[Family(b)]
    return int(np.sign(sa - sb))


# --- galleries ----------------------------------------------------------------


def gallery_layout(out_dir, family=None, eps=None, index=0):
    out_dir = Path(out_dir)
    if family is None:
        return out_dir / "clean" / f"img{index:03d}.ppm"
    return out_dir / str(Family(family)) / f"eps_{fmt_eps(eps)}" / f"img{index:03d}.ppm"


def dump_gallery(model, images, attacks, eps, out_dir, seed=0, targets=None, quality=DEFAULT_QUALITY):
    """Write clean and attacked images as binary PPM files.

    Layout: ``out_dir/clean/imgNNN.ppm`` and
    ``out_dir/<family>/eps_<eps>/imgNNN.ppm``. ``eps`` is a list applied to
    every attack or a mapping family -> list. Targets default to a random
    class other than the model's prediction. Returns the written paths.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    rng = np.random.default_rng(seed)
    if targets is None:
        targets = sample_targets(model.predict(images), model.num_classes, rng)
    targets = np.asarray(targets)
    written = []
    for i, img in enumerate(images):
        written.append(gallery_layout(out_dir, index=i))
        write_ppm(written[-1], img)
    for fam in attacks:
        fam = Family(fam)
        ladder = eps[fam] if isinstance(eps, dict) else eps
        for e in ladder:
            res = run_attack(
                model, images, targets, fam, e, eval_steps(fam), eval_rng(seed, fam), **attack_options(fam, quality)
            )
            for i, adv in enumerate(res.x_adv):
                written.append(gallery_layout(out_dir, fam, e, i))
                write_ppm(written[-1], adv)
    return written
