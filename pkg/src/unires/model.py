"""The assembled toy model: encoders -> vision flow -> sequence model -> route -> reweight -> decoder."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .data_synth import GroundingSample, template_words
from .decoder import DecoderConfig, PixelDecoder, binarize
from .encoders import EncoderConfig, Encoders, grid_to_featuremap, resize_image
from .geometry import FeatureMap, Level
from .mgfe import (BOS, CAP, EOS, SEP, NoSegError, ProjectedTokens, Projector, Reweighter, SegDecision,
                   SequenceConfig, SequenceModel, Vocabulary, build_prompt, generate, route)
from .mgvf import ProposalSet, ProposalSource, VisionFlow, VisionFlowOutput, extract_region_features, propose


@dataclass
class ModelConfig:
    channels: int = 64
    d_model: int = 128
    lm_heads: int = 4
    lm_layers: int = 2
    max_text_len: int = 32
    attn_heads: int = 1
    low_res: int = 64
    low_stride: int = 16
    high_res: int = 128
    high_stride: int = 8
    ground_res: int = 64
    ground_stride: int = 4
    encoder_depth: int = 2
    roi_bins: int = 7
    roi_samples: int = 2
    decoder_hidden: int = 4
    freeze_encoders: bool = False
    proposal_source: str = "ground_truth"
    # ablation switches
    decouple_seg: bool = True
    adjacent_interaction: bool = True
    decoder_reweight: bool = True
    use_object_feats: bool = True
    use_part_feats: bool = True
    model_seed: int = 0

    def model_fields(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(ModelConfig)}


@dataclass
class Prediction:
    logits: torch.Tensor | None
    mask: np.ndarray
    decision: SegDecision | None
    g_hat: int | None


def default_vocab() -> Vocabulary:
    return Vocabulary.from_words(template_words())


class UniRES(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, vocab: Vocabulary | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.vocab = vocab or default_vocab()
        torch.manual_seed(cfg.model_seed)
        c = cfg.channels
        self.encoders = Encoders(
            EncoderConfig(cfg.low_res, cfg.low_stride, c, cfg.encoder_depth, cfg.model_seed),
            EncoderConfig(cfg.high_res, cfg.high_stride, c, cfg.encoder_depth, cfg.model_seed + 1),
            EncoderConfig(cfg.ground_res, cfg.ground_stride, c, cfg.encoder_depth, cfg.model_seed + 2),
            frozen=cfg.freeze_encoders)
        self.flow = VisionFlow(c, cfg.attn_heads, cfg.adjacent_interaction, cfg.roi_bins, cfg.roi_samples)
        self.projector = Projector(c, cfg.d_model)
        self.lm = SequenceModel(len(self.vocab), SequenceConfig(cfg.d_model, cfg.lm_heads, cfg.lm_layers,
                                                                 max_text_len=cfg.max_text_len))
        self.reweighter = Reweighter(c, cfg.attn_heads, cfg.decoder_reweight)
        grid = cfg.ground_res // cfg.ground_stride
        self.decoder = PixelDecoder(DecoderConfig(grid, cfg.ground_stride, cfg.decoder_hidden, c), cfg.d_model)

    # --- visual side -------------------------------------------------------
    def proposals(self, sample: GroundingSample, level: Level) -> ProposalSet:
        enabled = self.cfg.use_object_feats if level is Level.OBJECT else self.cfg.use_part_feats
        if not enabled:
            return ProposalSet([], level)
        src = ProposalSource(self.cfg.proposal_source)
        gt = sample.object_boxes if level is Level.OBJECT else sample.part_boxes
        return propose(sample.image, level, src, gt_boxes=gt, image_id=sample.sample_id)

    def encode_images(self, samples: Sequence[GroundingSample]):
        imgs = torch.stack([s.image for s in samples])
        h, w = imgs.shape[-2:]
        low = self.encoders.low(resize_image(imgs, self.cfg.low_res))
        high = self.encoders.high(resize_image(imgs, self.cfg.high_res))
        ground = self.encoders.ground(resize_image(imgs, self.cfg.ground_res))
        out = []
        for i in range(len(samples)):
            # the high-res map is addressed in original-image pixel coordinates
            out.append((grid_to_featuremap(low[i], Level.IMAGE, h, w),
                        grid_to_featuremap(high[i], Level.HIGHRES, h, w),
                        grid_to_featuremap(ground[i], Level.GROUNDING, h, w)))
        return out

    def vision(self, sample: GroundingSample, f_l: FeatureMap, f_h: FeatureMap) -> VisionFlowOutput:
        return self.flow(f_l, f_h, self.proposals(sample, Level.OBJECT), self.proposals(sample, Level.PART))

    def region_token(self, f_h: FeatureMap, box) -> torch.Tensor:
        feat = extract_region_features(f_h, [box], self.cfg.roi_bins, self.cfg.roi_samples)
        return self.projector.proj(feat) + self.lm.visual_type[1]

    def fallback(self, vf: VisionFlowOutput) -> torch.Tensor:
        return vf.f_l.values

    def granularity_target(self, sample: GroundingSample) -> int:
        return int(self.cfg.decouple_seg and sample.granularity is Level.PART)

    def answer_ids(self, sample: GroundingSample) -> list:
        seg = self.vocab.seg_part if self.granularity_target(sample) else self.vocab.seg_object
        return [seg, self.vocab[EOS]]

    def mask_from_seg(self, f_g: FeatureMap, vf: VisionFlowOutput, g_hat: int, seg: torch.Tensor) -> torch.Tensor:
        selected = route(g_hat, vf.f_o_enh, vf.f_p_enh, fallback=self.fallback(vf))
        f_r = self.reweighter(f_g, selected)
        return self.decoder(f_r, seg)

    # --- training ----------------------------------------------------------
    def loss(self, samples: Sequence[GroundingSample], weights: L.LossWeights,
             captions: Sequence[tuple] = ()) -> L.LossBundle:
        """Teacher-forced loss over grounding samples plus optional (sample, box, caption) items."""
        items = list(samples) + [c[0] for c in captions]
        feats = self.encode_images(items) if items else []
        visual, texts, prompt_lens, flows = [], [], [], []
        for s, (f_l, f_h, _f_g) in zip(samples, feats):
            vf = self.vision(s, f_l, f_h)
            flows.append(vf)
            visual.append(self.lm.visual_inputs(self.projector(vf)))
            prompt = build_prompt(self.vocab, self.vocab.encode(s.expression))
            texts.append(prompt + self.answer_ids(s))
            prompt_lens.append(len(prompt))
        for (s, box, caption), (f_l, f_h, _f_g) in zip(captions, feats[len(samples):]):
            vf = self.vision(s, f_l, f_h)
            vis = self.lm.visual_inputs(self.projector(vf))
            visual.append(torch.cat([vis, self.region_token(f_h, box)]))
            prompt = [self.vocab[BOS], self.vocab[CAP], self.vocab[SEP]]
            texts.append(prompt + self.vocab.encode(caption) + [self.vocab[EOS]])
            prompt_lens.append(len(prompt))
        logits, hidden, starts = self.lm(visual, texts)
        sel_logits, sel_targets = [], []
        for b, (ids, pl, st) in enumerate(zip(texts, prompt_lens, starts)):
            pos = torch.arange(st + pl - 1, st + len(ids) - 1)
            sel_logits.append(logits[b, pos])
            sel_targets.append(torch.tensor(ids[pl:]))
        l_lm = L.text_ce(torch.cat(sel_logits), torch.cat(sel_targets))
        bces, dices = [], []
        for b, s in enumerate(samples):
            pl = prompt_lens[b]
            seg_h = hidden[b, starts[b] + pl]  # hidden state at the SEG input position
            f_g = feats[b][2]
            mask_logits = self.mask_from_seg(f_g, flows[b], self.granularity_target(s), seg_h)
            gt = torch.from_numpy(s.gt_mask).to(mask_logits.dtype)
            bces.append(L.bce_with_logits(mask_logits, gt))
            dices.append(L.dice(torch.sigmoid(mask_logits), gt))
        zero = l_lm.new_zeros(())
        l_bce = torch.stack(bces).mean() if bces else zero
        l_dice = torch.stack(dices).mean() if dices else zero
        return L.combine(l_lm, l_bce, l_dice, weights)

    # --- inference ---------------------------------------------------------
    @torch.no_grad()
    def predict(self, sample: GroundingSample, threshold: float = 0.5) -> Prediction:
        f_l, f_h, f_g = self.encode_images([sample])[0]
        vf = self.vision(sample, f_l, f_h)
        tokens = self.projector(vf)
        try:
            dec = generate(self.lm, self.vocab, tokens, self.vocab.encode(sample.expression),
                           decouple_seg=self.cfg.decouple_seg)
        except NoSegError:
            return Prediction(None, np.zeros(sample.shape, dtype=bool), None, None)
        logits = self.mask_from_seg(f_g, vf, dec.g_hat, dec.seg_embedding)
        return Prediction(logits, binarize(logits, threshold), dec, dec.g_hat)

    @torch.no_grad()
    def caption(self, sample: GroundingSample, box, max_new: int = 8) -> str:
        f_l, f_h, _ = self.encode_images([sample])[0]
        vf = self.vision(sample, f_l, f_h)
        vis = torch.cat([self.lm.visual_inputs(self.projector(vf)), self.region_token(f_h, box)])
        ids = [self.vocab[BOS], self.vocab[CAP], self.vocab[SEP]]
        out = []
        for _ in range(max_new):
            logits, _, st = self.lm([vis], [ids])
            nxt = int(logits[0, st[0] + len(ids) - 1, : self.vocab.n_base].argmax())
            if nxt == self.vocab[EOS]:
                break
            out.append(nxt)
            ids.append(nxt)
        return self.vocab.decode(out)
