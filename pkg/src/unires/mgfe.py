"""Token projection, the toy sequence model with decoupled SEG tokens, routing and re-weighting."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import FeatureMap, InvalidInputError, Level
from .mgvf import CrossAttention, VisionFlowOutput

PAD, BOS, EOS, SEP, CAP = "<pad>", "<bos>", "<eos>", "<sep>", "<cap>"
CONTROL_TOKENS = (PAD, BOS, EOS, SEP, CAP)
SEG_OBJECT, SEG_PART = "[SEG_OBJECT]", "[SEG_PART]"


class InvalidStateError(RuntimeError):
    pass


class NoSegError(RuntimeError):
    pass


class Vocabulary:
    """Ordered token list; the two SEG tokens always come last."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[-2:] != [SEG_OBJECT, SEG_PART]:
            raise InvalidInputError("vocabulary must end with the SEG tokens")
        if len(set(tokens)) != len(tokens):
            raise InvalidInputError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}
        self.n_base = len(tokens) - 2

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        base = list(CONTROL_TOKENS) + sorted(set(words) - set(CONTROL_TOKENS))
        return cls(base + [SEG_OBJECT, SEG_PART])

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, tok: str) -> int:
        return self.ids[tok]

    @property
    def seg_object(self) -> int:
        return self.ids[SEG_OBJECT]

    @property
    def seg_part(self) -> int:
        return self.ids[SEG_PART]

    def encode(self, text: str) -> list:
        try:
            return [self.ids[w] for w in text.lower().split()]
        except KeyError as e:
            raise InvalidInputError(f"unknown word {e.args[0]!r}") from None

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def to_text(self) -> str:
        return "\n".join(self.tokens) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls([ln for ln in Path(path).read_text().splitlines() if ln])


def classify_seg(token_id: int, vocab: Vocabulary) -> int:
    """The granularity selector: 0 for SEG_OBJECT, 1 for SEG_PART."""
    if token_id == vocab.seg_object:
        return 0
    if token_id == vocab.seg_part:
        return 1
    raise InvalidInputError(f"token {token_id} is not a SEG token")


@dataclass
class SegDecision:
    g_hat: int
    seg_embedding: torch.Tensor
    emitted_token: int
    generated: list = field(default_factory=list)


@dataclass
class ProjectedTokens:
    values: torch.Tensor
    offsets: tuple  # (0, N_l, N_l+N_o, N_l+N_o+N_p)

    def __post_init__(self):
        if self.values.shape[0] != self.offsets[-1]:
            raise InvalidInputError("row count does not match span lengths")


class Projector(nn.Module):
    def __init__(self, c: int, d: int):
        super().__init__()
        self.proj = nn.Linear(c, d)

    def forward(self, vf: VisionFlowOutput) -> ProjectedTokens:
        parts = [vf.f_l.values, vf.f_o_enh, vf.f_p_enh]
        n = [p.shape[0] for p in parts]
        offsets = (0, n[0], n[0] + n[1], n[0] + n[1] + n[2])
        return ProjectedTokens(self.proj(torch.cat(parts, dim=0)), offsets)


def project_tokens(vf: VisionFlowOutput, projector: Projector) -> ProjectedTokens:
    return projector(vf)


@dataclass
class SequenceConfig:
    d_model: int = 128
    heads: int = 4
    layers: int = 2
    ff_mult: int = 2
    max_text_len: int = 32


class SequenceModel(nn.Module):
    """Decoder-only transformer over [visual prefix | text]; causal everywhere."""

    def __init__(self, vocab_size: int, cfg: SequenceConfig):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.embed = nn.Embedding(vocab_size, d)
        self.text_pos = nn.Parameter(torch.randn(cfg.max_text_len, d) * 0.02)
        self.visual_type = nn.Parameter(torch.zeros(3, d))  # image / object / part spans
        layer = nn.TransformerEncoderLayer(d, cfg.heads, cfg.ff_mult * d, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, cfg.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, vocab_size)

    def visual_inputs(self, tokens: ProjectedTokens) -> torch.Tensor:
        o = tokens.offsets
        span_ids = torch.cat([torch.full((o[i + 1] - o[i],), i, dtype=torch.long) for i in range(3)])
        return tokens.values + self.visual_type[span_ids]

    def forward(self, visual: Sequence[torch.Tensor], texts: Sequence[Sequence[int]]):
        """Returns (logits B x L x V, hidden B x L x D, text start index per sample)."""
        dev_dtype = self.text_pos.dtype
        seqs, starts = [], []
        for vis, ids in zip(visual, texts):
            if len(ids) > self.cfg.max_text_len:
                raise InvalidInputError(f"text length {len(ids)} > {self.cfg.max_text_len}")
            ids_t = torch.as_tensor(list(ids), dtype=torch.long)
            txt = self.embed(ids_t) + self.text_pos[: len(ids)]
            seqs.append(torch.cat([vis.to(dev_dtype), txt], dim=0))
            starts.append(vis.shape[0])
        lengths = [s.shape[0] for s in seqs]
        L = max(lengths)
        x = torch.stack([F.pad(s, (0, 0, 0, L - s.shape[0])) for s in seqs])
        pad = torch.tensor([[j >= n for j in range(L)] for n in lengths])
        causal = torch.triu(torch.ones(L, L, dtype=torch.bool), diagonal=1)
        hidden = self.norm(self.blocks(x, mask=causal, src_key_padding_mask=pad))
        return self.head(hidden), hidden, starts


def build_prompt(vocab: Vocabulary, expression_ids: Sequence[int]) -> list:
    return [vocab[BOS], *expression_ids, vocab[SEP]]


def generate(model: SequenceModel, vocab: Vocabulary, tokens: ProjectedTokens, expression: Sequence[int],
             decouple_seg: bool = True, max_len: int | None = None, stop_at_seg: bool = True) -> SegDecision:
    """Greedy decoding; the first SEG-family token fixes the decision."""
    if len(expression) == 0:
        raise InvalidInputError("empty expression")
    max_len = max_len or model.cfg.max_text_len
    ids = build_prompt(vocab, expression)
    vis = model.visual_inputs(tokens)
    decision = None
    generated = []
    while len(ids) < max_len:
        logits, hidden, start = model([vis], [ids])
        if decision is None and generated and generated[-1] in (vocab.seg_object, vocab.seg_part):
            tok = generated[-1]
            decision = SegDecision(classify_seg(tok, vocab), hidden[0, start[0] + len(ids) - 1], tok)
            if stop_at_seg:
                break
        step = logits[0, start[0] + len(ids) - 1].clone()
        step[vocab[PAD]] = float("-inf")
        if not decouple_seg:
            step[vocab.seg_part] = float("-inf")
        nxt = int(step.argmax())
        generated.append(nxt)
        ids.append(nxt)
        if nxt == vocab[EOS]:
            break
    if decision is None and generated and generated[-1] in (vocab.seg_object, vocab.seg_part):
        # SEG emitted as the final allowed token: one more pass for its hidden state
        _, hidden, start = model([vis], [ids])
        tok = generated[-1]
        decision = SegDecision(classify_seg(tok, vocab), hidden[0, start[0] + len(ids) - 1], tok)
    if decision is None:
        raise NoSegError(f"no SEG token within {max_len} tokens: {vocab.decode(generated)}")
    decision.generated = generated
    return decision


def route(g_hat: int, f_o_enh: torch.Tensor, f_p_enh: torch.Tensor,
          fallback: torch.Tensor | None = None) -> torch.Tensor:
    """Exact branch selection between object (0) and part (1) features."""
    if isinstance(g_hat, bool) or g_hat not in (0, 1):
        raise InvalidStateError(f"g_hat must be 0 or 1, got {g_hat!r}")
    selected = f_p_enh if g_hat == 1 else f_o_enh
    if selected.shape[0] == 0:
        if fallback is None:
            raise InvalidStateError("selected granularity branch is empty and no fallback given")
        return fallback
    return selected


class Reweighter(nn.Module):
    def __init__(self, dim: int, heads: int = 1, enabled: bool = True):
        super().__init__()
        self.attn = CrossAttention(dim, heads)
        self.enabled = enabled

    def forward(self, f_g: FeatureMap, selected: torch.Tensor) -> FeatureMap:
        if not self.enabled:
            return f_g
        values = self.attn(f_g.values, selected)
        return FeatureMap(f_g.grid_h, f_g.grid_w, values, f_g.level, f_g.img_h, f_g.img_w)


def reweight(f_g: FeatureMap, selected: torch.Tensor, w: Reweighter) -> FeatureMap:
    return w(f_g, selected)
