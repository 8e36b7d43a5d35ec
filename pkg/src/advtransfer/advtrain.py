"""Adversarial training: every mini-batch is replaced by its attacked version.

Each image gets its own random incorrect target and its own radius drawn
uniformly from [0, eps_max]; the SGD step uses the true labels of the
attacked images only.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from advtransfer.attacks import attack_options, run_attack, sample_targets, train_steps
from advtransfer.errors import InvalidArgument
from advtransfer.geometry import TABLE1, Family
from advtransfer.io import atomic_write_text
from advtransfer.model import TrainSchedule, accuracy, train_loop


def sample_target(y, num_classes, rng):
    """Draw a class uniformly from {0..C-1} without ``y``."""
    out = sample_targets(np.asarray(y), num_classes, rng)
    return int(out) if np.ndim(out) == 0 else out


@dataclass
class AdvTrainConfig:
    family: Family
    eps_max: float
    steps: int = None
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    seed: int = 0
    quality: int = 75  # JPEG quality, used only by the jpeg family

    def __post_init__(self):
        self.family = Family(self.family)
        if self.steps is None:
            self.steps = train_steps(self.family)
        if self.eps_max < 0:
            raise InvalidArgument("eps_max must be non-negative")
        if self.steps < 1:
            raise InvalidArgument("attack step count must be positive")
        if self.steps >= TABLE1[self.family]["eval_steps"]:
            raise InvalidArgument(
                f"training step count {self.steps} must stay below the evaluation count "
                f"{TABLE1[self.family]['eval_steps']}"
            )


def training_rngs(seed):
    """Independent generators for batch order and for attack draws."""
    order_seq, attack_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(order_seq), np.random.default_rng(attack_seq)


def adv_train(model, data, cfg, eval_data=None, on_batch=None):
    """Adversarially train a copy of ``model``.

    Returns the trained model and per-epoch log rows with keys epoch, lr,
    clean_acc, adv_acc, mean_eps. ``on_batch(x_attacked, y_true, info)`` is
    called right before every SGD step.
    """
    if len(data) == 0:
        raise InvalidArgument("cannot train on an empty dataset")
    order_rng, attack_rng = training_rngs(cfg.seed)

    def perturb(current, xb, yb):
        targets = sample_targets(yb, data.num_classes, attack_rng)
        eps = attack_rng.uniform(0.0, cfg.eps_max, size=len(yb))
        res = run_attack(
            current, xb, targets, cfg.family, eps, cfg.steps, attack_rng, **attack_options(cfg.family, cfg.quality)
        )
        return res.x_adv, {
            "eps": eps,
            "targets": targets,
            "adv_correct": int((res.pred == yb).sum()),
        }

    clean_set = eval_data if eval_data is not None else data

    def on_epoch(current, log):
        log.extra["clean_acc"] = accuracy(current, clean_set)

    trained, logs = train_loop(
        model, data, cfg.schedule, order_rng, perturb=perturb, on_batch=on_batch, on_epoch=on_epoch
    )
    rows = []
    for entry in logs:
        batches = entry.extra["batches"]
        eps = np.concatenate([b["eps"] for b in batches])
        rows.append(
            {
                "epoch": entry.epoch,
                "lr": entry.lr,
                "clean_acc": entry.extra["clean_acc"],
                # accuracy of the pre-update model on the attacked batches
                "adv_acc": sum(b["adv_correct"] for b in batches) / len(eps),
                "mean_eps": float(eps.mean()),
                "eps_draws": eps,
            }
        )
    return trained, rows


def clean_train(model, data, schedule, seed):
    """Plain SGD with the same batch-order stream that :func:`adv_train` uses."""
    order_rng, _ = training_rngs(seed)
    return train_loop(model, data, schedule, order_rng)


LOG_FIELDS = ("epoch", "lr", "clean_acc", "adv_acc", "mean_eps")


def log_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for row in rows:
        writer.writerow([row["epoch"]] + [f"{row[k]:.6f}" for k in LOG_FIELDS[1:]])
    return buf.getvalue()


def write_log(rows, path):
    atomic_write_text(path, log_csv(rows))
