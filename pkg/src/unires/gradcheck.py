"""Central finite-difference gradient checks for the differentiable operations (float64)."""
from __future__ import annotations

from typing import Callable

import torch

from . import losses as L
from .decoder import DecoderConfig, PixelDecoder
from .geometry import BoundingBox, FeatureMap, Level
from .mgfe import Projector, Reweighter, SequenceConfig, SequenceModel, route
from .mgvf import CrossAttention, VisionFlow, VisionFlowOutput

REL_TOL = 1e-4
# Some gradients are exactly zero by construction (a key bias shifts every score equally and
# softmax ignores it). Both sides are then pure roundoff, so the ratio is meaningless; below
# this norm the error is measured against the floor instead.
NORM_FLOOR = 1e-4


def relative_error(a: torch.Tensor, b: torch.Tensor, floor: float = NORM_FLOOR) -> float:
    denom = max(float(a.norm()), float(b.norm()), floor)
    return float((a - b).norm()) / denom


def numeric_grad(fn: Callable[[], torch.Tensor], x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        with torch.no_grad():
            fp = float(fn())
        flat[i] = orig - eps
        with torch.no_grad():
            fm = float(fn())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check(fn: Callable[[], torch.Tensor], tensors: dict, eps: float = 1e-6) -> dict:
    """Relative error between autograd and central differences, per named tensor."""
    for t in tensors.values():
        t.grad = None
        t.requires_grad_(True)
    out = fn()
    grads = torch.autograd.grad(out, list(tensors.values()), allow_unused=True)
    errs = {}
    for (name, t), g in zip(tensors.items(), grads):
        g = torch.zeros_like(t) if g is None else g
        errs[name] = relative_error(g, numeric_grad(fn, t, eps))
    return errs


def _proj(out: torch.Tensor, gen: torch.Generator) -> Callable[[torch.Tensor], torch.Tensor]:
    r = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    return lambda y: (y * r).sum()


def _params(module: torch.nn.Module, prefix: str) -> dict:
    return {f"{prefix}.{n}": p for n, p in module.named_parameters()}


def _fm(gen, gh, gw, c, level, img):
    return FeatureMap(gh, gw, torch.randn(gh * gw, c, generator=gen, dtype=torch.float64), level, img, img)


def scenario_cross_attention(seed: int, dim: int = 8):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    w = CrossAttention(dim, heads=2).double()
    q = torch.randn(3, dim, generator=gen, dtype=torch.float64)
    kv = torch.randn(4, dim, generator=gen, dtype=torch.float64)
    red = _proj(w(q, kv), gen)
    return (lambda: red(w(q, kv))), {"q": q, "kv": kv, **_params(w, "attn")}


def scenario_vision_flow(seed: int, dim: int = 6):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    flow = VisionFlow(dim, bins=2, samples_per_bin=2).double()
    f_l = _fm(gen, 2, 2, dim, Level.IMAGE, 32)
    f_h = _fm(gen, 4, 4, dim, Level.HIGHRES, 32)
    s_o = [BoundingBox(0, 0, 20, 18), BoundingBox(10, 8, 32, 30)]
    s_p = [BoundingBox(2, 2, 10, 9), BoundingBox(12, 10, 20, 22), BoundingBox(20, 4, 30, 12)]

    def run():
        out = flow(f_l, f_h, s_o, s_p)
        return torch.cat([out.f_o_enh, out.f_p_enh])

    red = _proj(run(), gen)
    return (lambda: red(run())), {"f_l": f_l.values, "f_h": f_h.values, **_params(flow, "flow")}


def scenario_project_tokens(seed: int, c: int = 6, d: int = 5):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    proj = Projector(c, d).double()
    f_l = _fm(gen, 2, 2, c, Level.IMAGE, 32)
    f_o = torch.randn(2, c, generator=gen, dtype=torch.float64)
    f_p = torch.randn(3, c, generator=gen, dtype=torch.float64)

    def run():
        return proj(VisionFlowOutput(f_l, f_o, f_p)).values

    red = _proj(run(), gen)
    return (lambda: red(run())), {"f_l": f_l.values, "f_o": f_o, "f_p": f_p, **_params(proj, "proj")}


def scenario_route(seed: int, g_hat: int = 0, dim: int = 6):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    rw = Reweighter(dim).double()
    f_g = _fm(gen, 3, 3, dim, Level.GROUNDING, 12)
    f_o = torch.randn(2, dim, generator=gen, dtype=torch.float64)
    f_p = torch.randn(3, dim, generator=gen, dtype=torch.float64)

    def run():
        return rw(f_g, route(g_hat, f_o, f_p)).values

    red = _proj(run(), gen)
    live = {"f_o": f_o} if g_hat == 0 else {"f_p": f_p}
    return (lambda: red(run())), live


def scenario_reweight(seed: int, dim: int = 6):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    rw = Reweighter(dim).double()
    f_g = _fm(gen, 3, 3, dim, Level.GROUNDING, 12)
    sel = torch.randn(4, dim, generator=gen, dtype=torch.float64)
    red = _proj(rw(f_g, sel).values, gen)
    return (lambda: red(rw(f_g, sel).values)), {"f_g": f_g.values, "selected": sel, **_params(rw, "rw")}


def scenario_decode(seed: int, c: int = 6, d: int = 5):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    dec = PixelDecoder(DecoderConfig(grid=3, upsample_factor=2, hidden=2, channels=c), d).double()
    f_r = _fm(gen, 3, 3, c, Level.GROUNDING, 6)
    seg = torch.randn(d, generator=gen, dtype=torch.float64)
    red = _proj(dec(f_r, seg), gen)
    return (lambda: red(dec(f_r, seg))), {"f_r": f_r.values, "seg": seg, **_params(dec, "dec")}


def _pred_gt(seed: int, n: int = 5):
    gen = torch.Generator().manual_seed(seed)
    pred = 0.05 + 0.9 * torch.rand(n, n, generator=gen, dtype=torch.float64)
    gt = (torch.rand(n, n, generator=gen, dtype=torch.float64) > 0.5).double()
    return pred, gt


def scenario_bce(seed: int):
    pred, gt = _pred_gt(seed)
    return (lambda: L.bce(pred, gt)), {"pred": pred}


def scenario_dice(seed: int):
    pred, gt = _pred_gt(seed)
    return (lambda: L.dice(pred, gt)), {"pred": pred}


def scenario_generate_loss(seed: int, d: int = 8, vocab: int = 7):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    lm = SequenceModel(vocab, SequenceConfig(d_model=d, heads=2, layers=2, ff_mult=2, max_text_len=8)).double()
    vis = torch.randn(4, d, generator=gen, dtype=torch.float64)
    text = [1, 3, 4, 2, 5, 6]

    def run():
        logits, _, st = lm([vis], [text])
        return L.text_ce(logits[0, st[0] + 3: st[0] + 5], torch.tensor(text[4:6]))

    tensors = {"visual": vis, "embed": lm.embed.weight, "head": lm.head.weight,
               "ff1": lm.blocks.layers[0].linear1.weight, "attn_in": lm.blocks.layers[1].self_attn.in_proj_weight}
    return run, tensors


SCENARIOS = {
    "cross_attention": scenario_cross_attention,
    "run_vision_flow": scenario_vision_flow,
    "project_tokens": scenario_project_tokens,
    "route_object": lambda s: scenario_route(s, 0),
    "route_part": lambda s: scenario_route(s, 1),
    "reweight": scenario_reweight,
    "decode": scenario_decode,
    "bce": scenario_bce,
    "dice": scenario_dice,
    "generate_loss": scenario_generate_loss,
}


def run_scenario(name: str, seed: int) -> float:
    """Worst relative error over all checked tensors."""
    fn, tensors = SCENARIOS[name](seed)
    return max(check(fn, tensors).values())
