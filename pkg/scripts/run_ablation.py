"""Toy ablations: part features vs part-subset mIoU, SEG decoupling vs granularity-token accuracy."""
import argparse
import json

import torch

from unires.experiments import ARMS, AblationConfig, ablation, mean


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=AblationConfig.steps)
    ap.add_argument("--n-train", type=int, default=AblationConfig.n_train)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--arms", default=",".join(ARMS))
    ap.add_argument("--out", help="write per-seed rows as JSON")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    torch.set_num_threads(args.threads)
    acfg = AblationConfig(steps=args.steps, n_train=args.n_train,
                          seeds=tuple(int(s) for s in args.seeds.split(",")), arms=tuple(args.arms.split(",")))
    rows = ablation(acfg)
    print()
    print(f"{'arm':<14}{'part mIoU':>11}{'g-acc':>9}")
    for arm, rs in rows.items():
        print(f"{arm:<14}{mean(rs, 'part_miou'):>11.4f}{mean(rs, 'granularity_accuracy'):>9.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
