"""Pretrain on synthetic domain A, then compare k-frozen fine-tuning with scratch training on domain B."""

import argparse
import json
from dataclasses import replace

from ecgtransfer import experiments as xp


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--frozen", type=int, default=7)
    p.add_argument("--target-records", type=int, default=300)
    args = p.parse_args()
    spec = replace(xp.TransferSpec(), k_frozen=args.frozen, n_target=args.target_records)
    _, hist, trials = xp.transfer(tuple(args.seeds), spec,
                                  on_epoch=lambda r: print(f"pretrain epoch {r.epoch} val {r.val_loss:.4f}", flush=True))
    out = [{"seed": s, "finetuned": t.gmean, "scratch": b.gmean,
            "best_epochs": [t.history.best_epoch, b.history.best_epoch]} for s, t, b in trials]
    print(json.dumps(out, indent=1))
    wins = sum(r["finetuned"] >= r["scratch"] for r in out)
    print(f"fine-tuned >= scratch in {wins}/{len(out)} seeds")


if __name__ == "__main__":
    main()
