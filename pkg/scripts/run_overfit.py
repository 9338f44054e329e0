"""Overfit the toy model on a 64-sample mixed-granularity set and report train-set scores."""
import argparse
import json

import torch

from unires.experiments import OVERFIT_MIX, overfit
from unires.train import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps-per-epoch", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    torch.set_num_threads(args.threads)
    cfg = TrainConfig(steps_per_epoch=args.steps_per_epoch, epochs=args.epochs, seed=args.seed,
                      model_seed=args.seed, data_seed=args.data_seed, n_train=args.n,
                      mix=",".join(map(str, OVERFIT_MIX)), log_every=0)
    res = overfit(cfg)
    print(json.dumps({"steps": cfg.total_steps, "miou": res.miou, "granularity_accuracy": res.granularity_accuracy,
                      "final_loss": res.losses[-1], "seconds": round(res.seconds, 1),
                      "part_miou": res.breakdown["part"]["miou"], "object_miou": res.breakdown["object"]["miou"]},
                     indent=2))


if __name__ == "__main__":
    main()
