"""Calibrate every family and run the desk-scale grid, printing progress.

    python3 scripts/run_desk.py [--config configs/desk.cfg] [--work .cache/desk]

Finished stages are reused; see advtransfer.pipeline.
"""

import argparse
import sys
import time
from pathlib import Path

from advtransfer.config import load_config
from advtransfer.harness import attack_strength
from advtransfer.pipeline import run_desk

ROOT = Path(__file__).resolve().parent.parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "desk.cfg"))
    p.add_argument("--work", default=str(ROOT / ".cache" / "desk"))
    args = p.parse_args()
    t0 = time.time()
    run = run_desk(load_config(args.config), args.work, log=lambda m: print(m, flush=True))
    print(f"results in {run.root}")
    print(run.grid.to_csv())
    for fam, s in attack_strength(run.grid).items():
        print(f"mean accuracy under {fam}: {s:.4f}")
    print(f"grid CPU seconds {run.grid_cpu_seconds:.0f}, wall {time.time() - t0:.0f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
