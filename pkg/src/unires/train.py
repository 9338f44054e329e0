"""Training loop, LR schedule, evaluation and checkpoints."""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses as L
from .data_synth import GroundingSample, caption_pairs
from .geometry import InvalidInputError, Level
from .metrics import EvalRecord, MetricReport, build_report, no_target_decision
from .mgfe import Vocabulary
from .model import ModelConfig, UniRES

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig(ModelConfig):
    batch_size: int = 16
    steps_per_epoch: int = 500
    epochs: int = 4
    base_lr: float = 1e-3
    warmup_steps: int = 100
    schedule: str = "warmup_cosine"
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    lambda_lm: float = 1.0
    lambda_mask: float = 1.0
    lambda_bce: float = 2.0
    lambda_dice: float = 0.5
    seed: int = 0
    data_seed: int = 0
    n_train: int = 64
    mix: str = "0.4,0.2,0.3,0.1"
    caption_ratio: float = 0.0
    pretrain: bool = False
    log_every: int = 50

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise InvalidInputError("warmup_steps exceeds total steps")
        if self.schedule != "warmup_cosine":
            raise InvalidInputError(f"unknown schedule {self.schedule!r}")

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.epochs

    @property
    def mix_ratios(self) -> tuple:
        return tuple(float(x) for x in self.mix.split(","))

    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.lambda_lm, self.lambda_mask, self.lambda_bce, self.lambda_dice)

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model_fields())

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _coerce(value: str, typ):
    if typ in (bool, "bool"):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value.strip()


def parse_config_text(text: str, **overrides) -> TrainConfig:
    """Flat key=value lines; '#' starts a comment; unknown keys are errors."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key=value")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {n}: unknown key {key!r}")
        values[key] = _coerce(val, types[key])
    for key, val in overrides.items():
        if key not in types:
            raise ValueError(f"unknown key {key!r}")
        values[key] = val
    return TrainConfig(**values)


def load_config(path, **overrides) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), **overrides)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


def lr_at(step: int, cfg: TrainConfig) -> float:
    total, warm, base = cfg.total_steps, cfg.warmup_steps, cfg.base_lr
    if not 0 <= step <= total:
        raise InvalidInputError(f"step {step} outside [0, {total}]")
    if step < warm:
        return base * step / warm
    if total == warm:
        return base
    return base * 0.5 * (1 + math.cos(math.pi * (step - warm) / (total - warm)))


def make_optimizer(model: UniRES, cfg: TrainConfig) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.base_lr, weight_decay=cfg.weight_decay)


def train_step(batch: Sequence[GroundingSample], model: UniRES, opt: torch.optim.Optimizer, cfg: TrainConfig,
               step: int, captions: Sequence[tuple] = ()) -> L.LossBundle:
    model.train()
    for g in opt.param_groups:
        g["lr"] = lr_at(step, cfg)
    if cfg.pretrain:
        bundle = model.loss([], cfg.weights(), captions)
    else:
        bundle = model.loss(batch, cfg.weights(), captions)
    if not torch.isfinite(bundle.total):
        ids = [s.sample_id for s in batch] + [c[0].sample_id for c in captions]
        raise NonFiniteLossError(f"non-finite loss at step {step}; batch {ids}; terms {bundle.as_floats()}")
    opt.zero_grad(set_to_none=False)
    if bundle.total.requires_grad:
        bundle.total.backward()
        torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], cfg.grad_clip)
        if any(w > 0 for w in (cfg.lambda_lm, cfg.lambda_mask)):
            opt.step()
    return bundle


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled each pass."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - n % batch_size or n, batch_size):
            yield perm[i:i + batch_size]


@dataclass
class TrainResult:
    model: UniRES
    optimizer: torch.optim.Optimizer
    history: list
    step: int


@contextlib.contextmanager
def flush_denormals():
    """Treat subnormal floats as zero while training; tiny AdamW moments otherwise crawl on CPU.

    The flag is process-global CPU state with no getter, so it is switched back to the default on exit.
    """
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def train(cfg: TrainConfig, data: Sequence[GroundingSample], log_path=None,
          callback: Callable[[int, L.LossBundle], None] | None = None,
          vocab: Vocabulary | None = None) -> TrainResult:
    with flush_denormals():
        return _train(cfg, data, log_path, callback, vocab)


def _train(cfg, data, log_path, callback, vocab) -> TrainResult:
    torch.manual_seed(cfg.seed)
    model = UniRES(cfg.model_config(), vocab)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    caps = caption_pairs(data) if (cfg.pretrain or cfg.caption_ratio > 0) else []
    n_cap = cfg.batch_size if cfg.pretrain else int(round(cfg.caption_ratio * cfg.batch_size))
    stream = batches(len(data), min(cfg.batch_size, len(data)), rng)
    cap_stream = batches(len(caps), min(n_cap, len(caps)), rng) if caps and n_cap else None
    history = []
    fh = open(log_path, "w") if log_path else None
    try:
        if fh:
            fh.write(json.dumps({"header": True, "config_hash": cfg.config_hash(),
                                 "mask_loss_reduction": "mean per sample, then mean over batch",
                                 "text_loss_reduction": "mean over supervised answer tokens"}) + "\n")
        for step in range(cfg.total_steps):
            idx = next(stream)
            cap = [caps[i] for i in next(cap_stream)] if cap_stream else []
            bundle = train_step([data[i] for i in idx], model, opt, cfg, step, cap)
            rec = {"step": step, **bundle.as_floats(), "lr": opt.param_groups[0]["lr"]}
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if callback:
                callback(step, bundle)
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("step %d total %.4f lm %.4f mask %.4f", step, rec["total"], rec["l_lm"], rec["l_mask"])
    finally:
        if fh:
            fh.close()
    return TrainResult(model, opt, history, cfg.total_steps)


# --- evaluation ------------------------------------------------------------

@dataclass
class EvalOutput:
    report: MetricReport
    records: list
    granularity_accuracy: float


def _true_granularity(s: GroundingSample) -> int:
    return int(s.granularity is Level.PART)


def evaluate(dataset: Sequence[GroundingSample], model, threshold: float = 0.5) -> EvalOutput:
    """Run the inference pipeline per sample and aggregate metrics.

    ``model`` is anything with ``predict(sample)`` returning an object with
    ``mask`` and ``g_hat`` attributes, so stub models can be scored too.
    """
    if isinstance(model, torch.nn.Module):
        model.eval()
    records, correct = [], 0
    for s in dataset:
        pred = model.predict(s)
        g_hat = pred.g_hat
        correct += int(g_hat == _true_granularity(s))
        extra = {"g_hat": g_hat, "pred_no_target": bool(no_target_decision(pred.mask)),
                 "expression": s.expression}
        records.append(EvalRecord(s.sample_id, pred.mask, s.gt_mask, s.no_target,
                                  "part" if s.granularity is Level.PART else "object", s.split, extra))
    return EvalOutput(build_report(records), records, correct / max(1, len(dataset)))


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: UniRES, cfg: TrainConfig, optimizer=None, step: int = 0) -> None:
    torch.save({"model": model.state_dict(), "optimizer": optimizer.state_dict() if optimizer else None,
                "step": step, "config": asdict(cfg), "config_hash": cfg.config_hash(),
                "vocab": model.vocab.tokens, "tokenizer_checksum": model.vocab.checksum()}, path)


def load_checkpoint(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    cfg = TrainConfig(**ckpt["config"])
    vocab = Vocabulary(ckpt["vocab"])
    if vocab.checksum() != ckpt["tokenizer_checksum"]:
        raise ValueError("tokenizer checksum mismatch")
    model = UniRES(cfg.model_config(), vocab)
    model.load_state_dict(ckpt["model"])
    opt = make_optimizer(model, cfg)
    if ckpt.get("optimizer"):
        opt.load_state_dict(ckpt["optimizer"])
    return model, cfg, opt, ckpt["step"]
