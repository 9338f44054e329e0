"""Toy-scale experiment protocols shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from .data_synth import generate_dataset
from .train import TrainConfig, evaluate, train

OVERFIT_MIX = (0.4, 0.2, 0.3, 0.1)
ABLATION_MIX = (0.3, 0.2, 0.4, 0.1)


@dataclass
class OverfitResult:
    miou: float
    granularity_accuracy: float
    losses: list
    seconds: float
    breakdown: dict = field(default_factory=dict)


def overfit(cfg: TrainConfig | None = None) -> OverfitResult:
    """Train on a small mixed-granularity set and score the same set."""
    cfg = cfg or TrainConfig(steps_per_epoch=200, epochs=4, n_train=64, mix=",".join(map(str, OVERFIT_MIX)),
                             log_every=0)
    t0 = time.time()
    data = generate_dataset(cfg.data_seed, cfg.n_train, cfg.mix_ratios)
    res = train(cfg, data)
    ev = evaluate(data, res.model)
    return OverfitResult(ev.report.miou, ev.granularity_accuracy, [h["total"] for h in res.history],
                         time.time() - t0, ev.report.breakdown)


ARMS = {
    "full": {},
    "no_part_feats": {"use_part_feats": False},
    "no_decouple": {"decouple_seg": False},
}


@dataclass
class AblationConfig:
    steps: int = 900
    n_train: int = 512
    n_eval_part: int = 64
    n_eval_mixed: int = 64
    train_seed: int = 100
    eval_seed: int = 999
    seeds: tuple = (0, 1, 2)
    arms: tuple = tuple(ARMS)


def ablation(acfg: AblationConfig = AblationConfig(), log=print) -> dict:
    """Per-arm, per-seed held-out part mIoU and granularity-token accuracy.

    Every arm trains on the same mixture and is scored on the same held-out sets;
    the seed sets both the model initialisation and the batch order.
    """
    train_ds = generate_dataset(acfg.train_seed, acfg.n_train, ABLATION_MIX)
    part_ds = generate_dataset(acfg.eval_seed, acfg.n_eval_part, (0, 0, 1, 0), split="val")
    mixed_ds = generate_dataset(acfg.eval_seed + 1, acfg.n_eval_mixed, ABLATION_MIX, split="val")
    base = TrainConfig(steps_per_epoch=acfg.steps, epochs=1, warmup_steps=min(100, acfg.steps // 4),
                       n_train=acfg.n_train, log_every=0)
    out = {arm: [] for arm in acfg.arms}
    for seed in acfg.seeds:
        for arm in acfg.arms:
            t0 = time.time()
            cfg = replace(base, seed=seed, model_seed=seed, **ARMS[arm])
            model = train(cfg, train_ds).model
            part = evaluate(part_ds, model)
            mixed = evaluate(mixed_ds, model)
            row = {"seed": seed, "part_miou": part.report.miou,
                   "granularity_accuracy": mixed.granularity_accuracy, "seconds": time.time() - t0}
            out[arm].append(row)
            if log:
                log(f"{arm:<14} seed {seed}  part mIoU {row['part_miou']:.4f}  "
                    f"g-acc {row['granularity_accuracy']:.4f}  ({row['seconds']:.0f}s)")
    return out


def mean(rows: list, key: str) -> float:
    return sum(r[key] for r in rows) / len(rows)
