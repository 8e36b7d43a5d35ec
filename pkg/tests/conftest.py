import os
import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from advtransfer.config import load_config  # noqa: E402
from advtransfer.data import synth_dataset  # noqa: E402
from advtransfer.harness import AttackSpec, DefenseSpec, GridSpec, trained_model  # noqa: E402
from advtransfer.pipeline import run_desk  # noqa: E402
from helpers import ACCEPTANCE  # noqa: E402

# trained models are cached here and shared with the acceptance suite
ROOT = Path(__file__).resolve().parent.parent
CACHE = Path(os.environ.get("ADVTRANSFER_CACHE", Path(__file__).resolve().parent.parent / ".cache"))


@dataclass
class Desk:
    spec: GridSpec
    clean_model: object
    train: object
    val_small: object
    cache: Path


@pytest.fixture(scope="session")
def desk():
    """Clean reference model on the default desk-scale synthetic data."""
    spec = GridSpec([DefenseSpec()], [AttackSpec("linf", (1.0,))])
    train = spec.train_data.load()
    model, _ = trained_model(DefenseSpec(), spec, CACHE / "models", train)
    return Desk(spec, model, train, synth_dataset(4, 25, seed=2), CACHE)


@pytest.fixture(scope="session")
def desk_run():
    """Calibrated desk-scale grid; the first run takes about an hour of CPU."""
    return run_desk(load_config(ROOT / "configs" / "desk.cfg"), CACHE / "desk")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
