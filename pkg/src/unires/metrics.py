"""RES / GRES / MRES metrics: mIoU, oIoU (= cIoU), gIoU, N-acc."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import RleMask, as_mask, rle_decode, rle_encode

NO_TARGET_MIN_AREA = 50
GIOU_CONVENTION = ("gIoU follows the gRefCOCO convention: a no-target sample scores 1 when the "
                   "prediction is no-target (< 50 px) and 0 otherwise; a targeted sample whose "
                   "prediction is no-target scores 0; empty-vs-empty IoU is 1")

GRANULARITY_SETTINGS = {"object": ("object",), "part": ("part",), "object&part": ("object", "part")}


class UndefinedMetricError(ValueError):
    pass


@dataclass
class EvalRecord:
    sample_id: str
    pred: np.ndarray
    gt: np.ndarray
    gt_no_target: bool = False
    granularity: str = "object"
    split: str = "val"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pred = as_mask(self.pred)
        self.gt = as_mask(self.gt)
        if self.pred.shape != self.gt.shape:
            raise ValueError(f"{self.sample_id}: pred/gt shape mismatch")
        if self.gt_no_target and self.gt.any():
            raise ValueError(f"{self.sample_id}: no-target record with a non-empty gt mask")

    @property
    def intersection(self) -> int:
        return int(np.count_nonzero(self.pred & self.gt))

    @property
    def union(self) -> int:
        return int(np.count_nonzero(self.pred | self.gt))

    def to_json(self) -> dict:
        return {"id": self.sample_id, "pred": rle_encode(self.pred).to_json(),
                "gt": rle_encode(self.gt).to_json(), "gt_no_target": self.gt_no_target,
                "granularity": self.granularity, "split": self.split, **self.extra}

    @classmethod
    def from_json(cls, obj: dict) -> "EvalRecord":
        gt = rle_decode(RleMask.from_json(obj["gt"]))
        pred = obj.get("pred")
        pred = np.zeros_like(gt) if pred is None else rle_decode(RleMask.from_json(pred))
        known = {"id", "pred", "gt", "gt_no_target", "granularity", "split"}
        return cls(str(obj["id"]), pred, gt, bool(obj.get("gt_no_target", False)),
                   obj.get("granularity", "object"), obj.get("split", "val"),
                   {k: v for k, v in obj.items() if k not in known})


def no_target_decision(pred) -> bool:
    return int(np.count_nonzero(pred)) < NO_TARGET_MIN_AREA


def _iou(i: int, u: int) -> float:
    return 1.0 if u == 0 else i / u


def _targeted(records):
    return [r for r in records if not r.gt_no_target]


def compute_miou(records: Sequence[EvalRecord]) -> float:
    ious = [_iou(r.intersection, r.union) for r in _targeted(records)]
    if not ious:
        raise UndefinedMetricError("mIoU needs at least one targeted record")
    return math.fsum(ious) / len(ious)


def compute_oiou(records: Sequence[EvalRecord]) -> float:
    t = _targeted(records)
    inter = sum(r.intersection for r in t)
    union = sum(r.union for r in t)
    if union == 0:
        raise UndefinedMetricError("oIoU undefined: zero total union")
    return inter / union


compute_ciou = compute_oiou
compute_oiou_ciou = compute_oiou


def giou_score(r: EvalRecord) -> float:
    pred_none = no_target_decision(r.pred)
    if r.gt_no_target:
        return 1.0 if pred_none else 0.0
    if pred_none:
        return 0.0
    return _iou(r.intersection, r.union)


def compute_giou(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise UndefinedMetricError("gIoU needs at least one record")
    return math.fsum(giou_score(r) for r in records) / len(records)


def compute_nacc(records: Sequence[EvalRecord]) -> float:
    neg = [r for r in records if r.gt_no_target]
    if not neg:
        raise UndefinedMetricError("N-acc needs at least one no-target record")
    return sum(no_target_decision(r.pred) for r in neg) / len(neg)


def _safe(fn, records):
    try:
        return fn(records)
    except UndefinedMetricError:
        return None


@dataclass
class MetricReport:
    miou: float | None
    oiou: float | None
    ciou: float | None
    giou: float | None
    n_acc: float | None
    count: int = 0
    breakdown: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"miou": self.miou, "oiou": self.oiou, "ciou": self.ciou, "giou": self.giou,
                "n_acc": self.n_acc, "count": self.count, "breakdown": self.breakdown}


def filter_granularity(records: Iterable[EvalRecord], setting: str) -> list:
    keep = GRANULARITY_SETTINGS[setting]
    return [r for r in records if r.granularity in keep]


def _flat_metrics(records) -> dict:
    oiou = _safe(compute_oiou, records)
    return {"miou": _safe(compute_miou, records), "oiou": oiou, "ciou": oiou,
            "giou": _safe(compute_giou, records), "n_acc": _safe(compute_nacc, records),
            "count": len(records)}


def build_report(records: Sequence[EvalRecord]) -> MetricReport:
    records = list(records)
    flat = _flat_metrics(records)
    breakdown = {s: _flat_metrics(filter_granularity(records, s)) for s in GRANULARITY_SETTINGS}
    return MetricReport(flat["miou"], flat["oiou"], flat["ciou"], flat["giou"], flat["n_acc"],
                        len(records), breakdown)


def report_document(records: Sequence[EvalRecord], proposal_source: str | None = None) -> dict:
    records = list(records)
    splits = sorted({r.split for r in records}, key=_split_order)
    doc = {"convention": GIOU_CONVENTION, "no_target_min_area": NO_TARGET_MIN_AREA,
           "overall": build_report(records).to_json(),
           "splits": {s: build_report([r for r in records if r.split == s]).to_json() for s in splits}}
    if proposal_source is not None:
        doc["proposal_source"] = proposal_source
    return doc


def _split_order(s: str):
    order = ["val", "testA", "testB"]
    return (order.index(s), s) if s in order else (len(order), s)


def _fmt(v):
    return "  -  " if v is None else f"{100 * v:5.1f}"


def format_table(doc: dict) -> str:
    """Rows = metric (and granularity setting), columns = splits, values in percent."""
    splits = list(doc["splits"])
    rows = [("mIoU", "miou"), ("oIoU", "oiou"), ("cIoU", "ciou"), ("gIoU", "giou"), ("N-acc", "n_acc")]
    head = f"{'metric':<22}" + "".join(f"{s:>8}" for s in splits)
    lines = [head, "-" * len(head)]
    for label, key in rows:
        lines.append(f"{label:<22}" + "".join(f"{_fmt(doc['splits'][s][key]):>8}" for s in splits))
    for setting in GRANULARITY_SETTINGS:
        for label, key in (("mIoU", "miou"), ("oIoU", "oiou")):
            vals = [doc["splits"][s]["breakdown"][setting][key] for s in splits]
            lines.append(f"{label + ' [' + setting + ']':<22}" + "".join(f"{_fmt(v):>8}" for v in vals))
    lines.append("")
    lines.append("note: " + doc["convention"])
    return "\n".join(lines)


def read_records(path) -> list:
    out = []
    with open(path) as fh:
        for ln in fh:
            if ln.strip():
                out.append(EvalRecord.from_json(json.loads(ln)))
    return out


def write_records(records: Iterable[EvalRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")
