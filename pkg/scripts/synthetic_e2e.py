"""Train one desk_scale classifier on the synthetic burst task and report held-out G-mean."""

import argparse
import json
from dataclasses import replace

from ecgtransfer import experiments as xp


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--records", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=xp.DESK_TRAIN.max_epochs)
    args = p.parse_args()
    cfg = replace(xp.DESK_TRAIN, max_epochs=args.epochs)
    res = xp.synthetic_end_to_end(seed=args.seed, n_records=args.records, cfg=cfg,
                                  on_epoch=lambda r: print(f"epoch {r.epoch} val {r.val_loss:.4f}", flush=True))
    cm = res.confusion
    print(json.dumps({"seed": args.seed, "gmean": res.gmean, "f2": res.metrics.f2,
                      "confusion": [cm.tp, cm.fp, cm.fn, cm.tn], "minutes": res.seconds / 60}, indent=1))


if __name__ == "__main__":
    main()
