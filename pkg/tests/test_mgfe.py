import pytest
import torch

from unires.geometry import FeatureMap, InvalidInputError, Level
from unires.mgfe import (EOS, SEG_OBJECT, SEG_PART, InvalidStateError, NoSegError, Projector, Reweighter,
                         SequenceConfig, SequenceModel, Vocabulary, build_prompt, classify_seg, generate,
                         project_tokens, reweight, route)
from unires.mgvf import VisionFlowOutput


@pytest.fixture
def vocab():
    return Vocabulary.from_words(["red", "house", "roof", "of", "the"])


def test_vocab_layout_and_roundtrip(vocab, tmp_path):
    assert vocab.tokens[-2:] == [SEG_OBJECT, SEG_PART]
    assert vocab.decode(vocab.encode("the red house")) == "the red house"
    vocab.save(tmp_path / "v.txt")
    loaded = Vocabulary.load(tmp_path / "v.txt")
    assert loaded.tokens == vocab.tokens and loaded.checksum() == vocab.checksum()
    with pytest.raises(InvalidInputError):
        vocab.encode("purple house")
    with pytest.raises(InvalidInputError):
        Vocabulary(["a", SEG_PART, SEG_OBJECT])


def test_classify_seg(vocab):
    assert classify_seg(vocab.seg_object, vocab) == 0
    assert classify_seg(vocab.seg_part, vocab) == 1
    with pytest.raises(InvalidInputError):
        classify_seg(vocab[EOS], vocab)


def _vf(n_l, n_o, n_p, c=6, zero=False):
    make = torch.zeros if zero else torch.randn
    f_l = FeatureMap(1, n_l, make(n_l, c, dtype=torch.float64), Level.IMAGE, 16, 16)
    return VisionFlowOutput(f_l, make(n_o, c, dtype=torch.float64), make(n_p, c, dtype=torch.float64))


def test_project_token_rows():
    proj = Projector(6, 5).double()
    t = project_tokens(_vf(16, 4, 8), proj)
    assert t.values.shape == (28, 5) and t.offsets == (0, 16, 20, 28)
    assert project_tokens(_vf(16, 0, 0), proj).values.shape == (16, 5)
    z = project_tokens(_vf(3, 1, 1, zero=True), proj).values
    assert torch.equal(z, proj.proj.bias.expand(5, 5))


def _lm(vocab, seed=0, d=8):
    torch.manual_seed(seed)
    return SequenceModel(len(vocab), SequenceConfig(d_model=d, heads=2, layers=1, max_text_len=12)).double()


def test_sequence_model_is_causal(vocab):
    lm = _lm(vocab)
    vis = torch.randn(3, 8, dtype=torch.float64)
    a = [1, 6, 7, 3]
    b = [1, 6, 7, 4]
    la, _, st = lm([vis], [a])
    lb, _, _ = lm([vis], [b])
    assert torch.equal(la[0, : st[0] + 3], lb[0, : st[0] + 3])


def test_padding_does_not_change_outputs(vocab):
    lm = _lm(vocab)
    vis = torch.randn(3, 8, dtype=torch.float64)
    alone, _, st = lm([vis], [[1, 6, 3]])
    batch, _, _ = lm([vis, torch.randn(5, 8, dtype=torch.float64)], [[1, 6, 3], [1, 6, 7, 8, 3]])
    n = st[0] + 3
    assert torch.allclose(alone[0, :n], batch[0, :n], atol=1e-12)


def _force(lm, vocab, token):
    """Make the head always prefer one token."""
    with torch.no_grad():
        lm.head.weight.zero_()
        lm.head.bias.zero_()
        lm.head.bias[token] = 5.0


def _tokens(n=4):
    from unires.mgfe import ProjectedTokens
    return ProjectedTokens(torch.randn(n, 8, dtype=torch.float64), (0, n, n, n))


def test_generate_seg_part_and_object(vocab):
    lm = _lm(vocab)
    expr = vocab.encode("roof of the red house")
    _force(lm, vocab, vocab.seg_part)
    d = generate(lm, vocab, _tokens(), expr)
    assert d.g_hat == 1 and d.emitted_token == vocab.seg_part and d.generated == [vocab.seg_part]
    assert d.seg_embedding.shape == (8,)
    _force(lm, vocab, vocab.seg_object)
    assert generate(lm, vocab, _tokens(), expr).g_hat == 0


def test_generate_without_decoupling_never_emits_part(vocab):
    lm = _lm(vocab)
    _force(lm, vocab, vocab.seg_part)
    with torch.no_grad():
        lm.head.bias[vocab.seg_object] = 4.0
    d = generate(lm, vocab, _tokens(), vocab.encode("the house"), decouple_seg=False)
    assert d.g_hat == 0


def test_generate_no_seg(vocab):
    lm = _lm(vocab)
    _force(lm, vocab, vocab["red"])
    with pytest.raises(NoSegError):
        generate(lm, vocab, _tokens(), vocab.encode("the house"), max_len=8)


def test_seg_embedding_uses_seg_input_position(vocab):
    lm = _lm(vocab)
    _force(lm, vocab, vocab.seg_object)
    toks = _tokens()
    expr = vocab.encode("the house")
    d = generate(lm, vocab, toks, expr)
    ids = build_prompt(vocab, expr) + [vocab.seg_object]
    _, hidden, st = lm([lm.visual_inputs(toks)], [ids])
    assert torch.equal(d.seg_embedding, hidden[0, st[0] + len(ids) - 1])


def test_route_examples():
    f_o, f_p = torch.tensor([[1.0, 2.0]]), torch.tensor([[9.0, 9.0]])
    assert torch.equal(route(0, f_o, f_p), f_o)
    assert torch.equal(route(1, f_o, f_p), f_p)
    for bad in (2, -1, True, 0.5):
        with pytest.raises(InvalidStateError):
            route(bad, f_o, f_p)
    fb = torch.zeros(3, 2)
    assert route(1, f_o, torch.zeros(0, 2), fallback=fb) is fb
    with pytest.raises(InvalidStateError):
        route(1, f_o, torch.zeros(0, 2))


def _f_g(seed=0):
    gen = torch.Generator().manual_seed(seed)
    return FeatureMap(3, 3, torch.randn(9, 4, generator=gen, dtype=torch.float64), Level.GROUNDING, 12, 12)


def test_reweight_single_row_closed_form():
    torch.manual_seed(0)
    w = Reweighter(4).double()
    f_g = _f_g()
    sel = torch.randn(1, 4, dtype=torch.float64)
    f_r = reweight(f_g, sel, w)
    assert torch.allclose(f_r.values, f_g.values + w.attn.o(w.attn.v(sel)), atol=1e-12)
    assert (f_r.grid_h, f_r.grid_w) == (3, 3)


def test_reweight_disabled_is_identity():
    f_g = _f_g()
    assert reweight(f_g, torch.randn(2, 4, dtype=torch.float64), Reweighter(4, enabled=False)) is f_g


@pytest.mark.parametrize("g_hat", [0, 1])
def test_unselected_branch_is_inert(g_hat):
    torch.manual_seed(1)
    w = Reweighter(4).double()
    f_g = _f_g()
    f_o, f_p = torch.randn(2, 4, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64)
    base = reweight(f_g, route(g_hat, f_o, f_p), w).values
    if g_hat == 0:
        f_p = f_p + 100 * torch.randn_like(f_p)
    else:
        f_o = f_o + 100 * torch.randn_like(f_o)
    assert torch.equal(base, reweight(f_g, route(g_hat, f_o, f_p), w).values)
