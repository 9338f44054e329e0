import json
import math
from dataclasses import asdict, fields
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from unires.data_synth import generate_dataset
from unires.geometry import InvalidInputError
from unires.losses import LossBundle
from unires.train import (NonFiniteLossError, TrainConfig, dump_config, evaluate, load_checkpoint, lr_at,
                          make_optimizer, parse_config_text, save_checkpoint, train, train_step)
from unires.model import UniRES

SMALL = dict(channels=16, d_model=32, lm_heads=2, lm_layers=1, high_res=64, encoder_depth=1, roi_bins=3,
             decoder_hidden=2)


def small_cfg(**kw):
    base = dict(SMALL, steps_per_epoch=4, epochs=1, warmup_steps=1, batch_size=4, log_every=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(0, 8)


def test_lr_schedule_points():
    cfg = TrainConfig(base_lr=5e-4, warmup_steps=100, steps_per_epoch=500, epochs=4)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(50, cfg) == pytest.approx(2.5e-4, abs=1e-15)
    assert lr_at(100, cfg) == pytest.approx(5e-4, abs=1e-15)
    assert lr_at(1050, cfg) == pytest.approx(2.5e-4, abs=1e-15)
    assert lr_at(2000, cfg) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(InvalidInputError):
        lr_at(2001, cfg)
    with pytest.raises(InvalidInputError):
        lr_at(-1, cfg)


def test_config_text_roundtrip():
    cfg = parse_config_text("base_lr = 5e-4  # paper value\n\ndecouple_seg = false\nmix=1,0,0,0\nepochs=2\n")
    assert cfg.base_lr == 5e-4 and cfg.decouple_seg is False and cfg.mix_ratios == (1.0, 0, 0, 0)
    assert cfg.epochs == 2
    assert parse_config_text(dump_config(cfg)) == cfg
    names = {f.name for f in fields(TrainConfig)}
    assert {"proposal_source", "lambda_dice", "use_part_feats", "seed"} <= names
    with pytest.raises(ValueError, match="unknown key"):
        parse_config_text("learning_rate = 1\n")
    with pytest.raises(ValueError):
        parse_config_text("decouple_seg = maybe\n")
    with pytest.raises(InvalidInputError):
        TrainConfig(warmup_steps=5000)


def test_zero_lambdas_leave_parameters(data):
    cfg = small_cfg(lambda_lm=0, lambda_mask=0, lambda_bce=0, lambda_dice=0)
    model = UniRES(cfg.model_config())
    opt = make_optimizer(model, cfg)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    for step in range(2):
        train_step(data[:4], model, opt, cfg, step + 1)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_every_parameter_gets_gradient(data):
    cfg = small_cfg(caption_ratio=0.5)
    model = UniRES(cfg.model_config())
    captions = [(s, s.boxes[0], s.expression) for s in data if len(s.boxes) == 1][:2]
    part = [s for s in generate_dataset(1, 6, (0, 0, 1, 0))]
    model.loss(data[:4] + part[:2], cfg.weights(), captions).total.backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
    assert dead == []


def test_nonfinite_loss_reports_sample(data, monkeypatch):
    cfg = small_cfg()
    model = UniRES(cfg.model_config())
    nan = torch.tensor(float("nan"), requires_grad=True)
    monkeypatch.setattr(model, "loss", lambda *a, **k: LossBundle(nan, nan, nan, nan, nan))
    with pytest.raises(NonFiniteLossError, match=data[0].sample_id):
        train_step(data[:2], model, make_optimizer(model, cfg), cfg, 1)


def test_same_seed_same_trajectory(data, tmp_path):
    cfg = small_cfg()
    a = train(cfg, data, log_path=tmp_path / "a.jsonl")
    b = train(cfg, data)
    assert [h["total"] for h in a.history] == [h["total"] for h in b.history]
    lines = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert lines[0]["header"] and "mean per sample" in lines[0]["mask_loss_reduction"]
    assert [l["step"] for l in lines[1:]] == [0, 1, 2, 3]
    assert {"l_lm", "l_bce", "l_dice", "l_mask", "total", "lr"} <= set(lines[1])


def test_training_leaves_subnormals_intact(data):
    train(small_cfg(), data[:2])
    tiny = torch.tensor(5e-324, dtype=torch.float64)
    assert float(tiny * 1.0) > 0.0


def test_single_sample_loss_decreases():
    sample = generate_dataset(2, 1, (1, 0, 0, 0))
    cfg = small_cfg(steps_per_epoch=200, warmup_steps=0, batch_size=1, base_lr=1e-3)
    res = train(cfg, sample)
    totals = [h["total"] for h in res.history]
    down = sum(b < a for a, b in zip(totals, totals[1:]))
    assert down >= 0.95 * (len(totals) - 1)


def test_checkpoint_roundtrip_bitwise(data, tmp_path):
    cfg = small_cfg()
    res = train(cfg, data)
    save_checkpoint(tmp_path / "m.pt", res.model, cfg, res.optimizer, res.step)
    model, cfg2, opt, step = load_checkpoint(tmp_path / "m.pt")
    assert cfg2 == cfg and step == res.step
    res.model.eval()
    model.eval()
    for s in data[:3]:
        a, b = res.model.predict(s), model.predict(s)
        if a.logits is None:
            assert b.logits is None
        else:
            assert torch.equal(a.logits, b.logits)
    assert opt.state_dict()["state"].keys() == res.optimizer.state_dict()["state"].keys()


class _Stub:
    def __init__(self, fn):
        self.fn = fn

    def predict(self, s):
        return SimpleNamespace(mask=self.fn(s), g_hat=int(s.granularity.value == "part"))


def test_evaluate_with_oracle_and_empty_stubs():
    data = generate_dataset(6, 24)
    perfect = evaluate(data, _Stub(lambda s: s.gt_mask))
    rep = perfect.report
    assert (rep.miou, rep.oiou, rep.giou, rep.n_acc) == (1.0, 1.0, 1.0, 1.0)
    assert perfect.granularity_accuracy == 1.0
    empty = evaluate(data, _Stub(lambda s: np.zeros(s.shape, bool))).report
    assert empty.n_acc == 1.0 and empty.miou == 0.0
    assert empty.breakdown["object&part"]["count"] == 24
