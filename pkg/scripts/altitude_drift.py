"""Run the altitude spiral end to end and report how Lambda follows scale drift.

Writes tracks, estimate, status, drift and series files into --out, then prints
the rank correlation of Lambda with the drift rate and the peak/low Lambda ratio.
"""
import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from monovo import runner
from monovo.cli import main as cli


def read_series(path: Path) -> runner.DriftSeries:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    col = {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}
    return runner.DriftSeries(col["timestamp"], col["altitude"], col["s_t"], col["Lambda"], col["drift_rate"])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="altitude_spiral")
    ap.add_argument("--out", type=Path, default=Path("out/altitude_drift"))
    ap.add_argument("--band", type=float, default=0.1, help="altitude band for the peak/low medians")
    args = ap.parse_args(argv)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    steps = [
        ["simulate", "--config", args.config, "--out", str(out)],
        ["run", "--config", args.config, "--tracks", str(out / "tracks.txt"), "--out", str(out)],
        ["evaluate", "--config", args.config, "--gt", str(out / "groundtruth.tum"), "--est",
         str(out / "estimate.tum"), "--status", str(out / "status.csv"), "--drift", str(out / "drift.csv"),
         "--out", str(out)],
    ]
    for step in steps:
        code = cli(step)
        if code:
            print(f"{step[0]} failed with exit code {code}", file=sys.stderr)
            return code
    chk = runner.drift_check(read_series(out / "series.csv"), band=args.band)
    print(f"spearman(Lambda, drift rate) = {chk.spearman:.3f}")
    print(f"Lambda peak {chk.peak_lambda:.4f}  low {chk.low_lambda:.4f}  ratio {chk.ratio:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
