"""Recompute G-mean from every published (sensitivity, specificity) pair and flag mismatches."""

import csv
import sys
from pathlib import Path

from ecgtransfer.evaluation import gmean

TABLE = Path(__file__).resolve().parents[1] / "tests" / "data" / "published_metrics.csv"


def main(path=TABLE):
    bad = 0
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            g = round(gmean(float(r["sens"]), float(r["spec"])), 3)
            flag = "ok" if abs(g - float(r["gmean"])) <= 0.001 + 1e-12 else "MISMATCH"
            bad += flag != "ok"
            print(f"{r['group']:11s} {r['model']:14s} {r['target']:6s} reported {float(r['gmean']):.3f} "
                  f"recomputed {g:.3f} {flag}")
    print(f"{bad} mismatches")
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
