"""Multi-granularity vision flow: region features and coarse-to-fine cross-attention."""
from __future__ import annotations

import enum
import json
import math
import subprocess
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn

from .geometry import BoundingBox, FeatureMap, InvalidInputError, Level, roi_align_boxes


class EmptyContextError(ValueError):
    pass


class ProposalSource(enum.Enum):
    GROUND_TRUTH = "ground_truth"
    GRID = "grid"
    EXTERNAL = "external"


@dataclass
class ProposalSet:
    boxes: list
    level: Level
    source: ProposalSource = ProposalSource.GROUND_TRUTH
    scores: list | None = None

    def __post_init__(self):
        if self.level not in (Level.OBJECT, Level.PART):
            raise InvalidInputError(f"proposal level must be OBJECT or PART, got {self.level}")
        for b in self.boxes:
            if b.width <= 0 or b.height <= 0:
                raise InvalidInputError(f"non-positive proposal box {b.as_tuple()}")

    def __len__(self):
        return len(self.boxes)


GRID_SIZE = {Level.OBJECT: 2, Level.PART: 4}


def grid_boxes(img_h: int, img_w: int, n: int) -> list:
    return [BoundingBox(img_w * j / n, img_h * i / n, img_w * (j + 1) / n, img_h * (i + 1) / n)
            for i in range(n) for j in range(n)]


# request {"image_id", "level"} -> [{"box": [x0,y0,x1,y1], "score": s}, ...]
ProposalClient = Callable[[str, str], list]


def propose(img: torch.Tensor, level: Level, source: ProposalSource = ProposalSource.GRID, *,
            gt_boxes: Sequence[BoundingBox] = (), client: ProposalClient | None = None,
            image_id: str = "") -> ProposalSet:
    h, w = img.shape[-2:]
    if source is ProposalSource.GRID:
        return ProposalSet(grid_boxes(h, w, GRID_SIZE[level]), level, source)
    if source is ProposalSource.GROUND_TRUTH:
        return ProposalSet(list(gt_boxes), level, source)
    if client is None:
        raise InvalidInputError("EXTERNAL proposals need a client")
    resp = client(image_id, level.value)
    boxes = [BoundingBox(*map(float, r["box"])) for r in resp]
    return ProposalSet(boxes, level, source, [float(r.get("score", 1.0)) for r in resp])


class SubprocessProposalClient:
    """Line-delimited JSON proposal provider running as a child process."""

    def __init__(self, argv: Sequence[str]):
        self.proc = subprocess.Popen(list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                     text=True, bufsize=1)

    def __call__(self, image_id: str, level: str) -> list:
        self.proc.stdin.write(json.dumps({"image_id": image_id, "level": level}) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise RuntimeError("proposal provider closed its output")
        return json.loads(line)["boxes"]

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)


def extract_region_features(f_h: FeatureMap, props: ProposalSet | Sequence[BoundingBox],
                            bins: int = 7, samples_per_bin: int = 2) -> torch.Tensor:
    """ROI Align each box then mean over bins; N x C."""
    boxes = props.boxes if isinstance(props, ProposalSet) else list(props)
    pooled = roi_align_boxes(f_h, boxes, bins, bins, samples_per_bin)
    return pooled.mean(dim=1)


class CrossAttention(nn.Module):
    """Scaled dot-product cross-attention with Q/K/V/O projections and a residual."""

    def __init__(self, dim: int, heads: int = 1, residual: bool = True):
        super().__init__()
        if dim % heads:
            raise InvalidInputError(f"heads={heads} does not divide dim={dim}")
        self.dim, self.heads, self.residual = dim, heads, residual
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, q: torch.Tensor, kv: torch.Tensor, return_attn: bool = False):
        if kv.shape[0] == 0:
            raise EmptyContextError("cross-attention over an empty key/value set")
        if q.shape[-1] != self.dim or kv.shape[-1] != self.dim:
            raise InvalidInputError("feature dim mismatch")
        nq, nk, h = q.shape[0], kv.shape[0], self.heads
        dh = self.dim // h
        qh = self.q(q).reshape(nq, h, dh).transpose(0, 1)
        kh = self.k(kv).reshape(nk, h, dh).transpose(0, 1)
        vh = self.v(kv).reshape(nk, h, dh).transpose(0, 1)
        attn = torch.softmax(qh @ kh.transpose(1, 2) / math.sqrt(dh), dim=-1)
        ctx = (attn @ vh).transpose(0, 1).reshape(nq, self.dim)
        out = self.o(ctx)
        if self.residual:
            out = q + out
        return (out, attn) if return_attn else out


def cross_attention(q: torch.Tensor, kv: torch.Tensor, w: CrossAttention) -> torch.Tensor:
    return w(q, kv)


@dataclass
class VisionFlowOutput:
    f_l: FeatureMap
    f_o_enh: torch.Tensor
    f_p_enh: torch.Tensor
    extras: dict = field(default_factory=dict)


class VisionFlow(nn.Module):
    """F~o = CrossAttn(Fo, Fl, Fl); F~p = CrossAttn(Fp, F~o, F~o)."""

    def __init__(self, dim: int, heads: int = 1, adjacent_interaction: bool = True, bins: int = 7,
                 samples_per_bin: int = 2):
        super().__init__()
        self.obj_attn = CrossAttention(dim, heads)
        self.part_attn = CrossAttention(dim, heads)
        self.adjacent_interaction = adjacent_interaction
        self.bins = bins
        self.samples_per_bin = samples_per_bin

    def enhance(self, f_l: torch.Tensor, f_o: torch.Tensor, f_p: torch.Tensor):
        if not self.adjacent_interaction:
            return f_o, f_p
        f_o_enh = self.obj_attn(f_o, f_l) if f_o.shape[0] else f_o
        if f_p.shape[0] == 0:
            return f_o_enh, f_p
        context = f_o_enh if f_o_enh.shape[0] else f_l
        return f_o_enh, self.part_attn(f_p, context)

    def forward(self, f_l: FeatureMap, f_h: FeatureMap, s_o: ProposalSet | Sequence[BoundingBox],
                s_p: ProposalSet | Sequence[BoundingBox]) -> VisionFlowOutput:
        f_o = extract_region_features(f_h, s_o, self.bins, self.samples_per_bin)
        f_p = extract_region_features(f_h, s_p, self.bins, self.samples_per_bin)
        f_o_enh, f_p_enh = self.enhance(f_l.values, f_o, f_p)
        return VisionFlowOutput(f_l, f_o_enh, f_p_enh)


def run_vision_flow(f_l: FeatureMap, f_h: FeatureMap, s_o, s_p, flow: VisionFlow) -> VisionFlowOutput:
    return flow(f_l, f_h, s_o, s_p)
