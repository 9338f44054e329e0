import pytest
import torch

from unires.encoders import EncoderConfig, Encoders, PatchEncoder
from unires.geometry import InvalidInputError, Level


def _enc(res=64, stride=16, depth=1):
    return PatchEncoder(EncoderConfig(res, stride, 8, depth), Level.IMAGE)


def test_low_grid_rows():
    fm = _enc().encode(torch.rand(3, 64, 64))
    assert fm.values.shape == (16, 8)
    assert (fm.grid_h, fm.grid_w) == (4, 4)


def test_high_and_grounding_grids():
    encs = Encoders(EncoderConfig(64, 16, 8, 1), EncoderConfig(128, 16, 8, 1), EncoderConfig(64, 8, 8, 1))
    assert encs.encode_high(torch.rand(3, 128, 128)).values.shape[0] == 64
    assert encs.encode_high(torch.rand(3, 16, 16)).values.shape[0] == 1
    assert encs.encode_grounding(torch.rand(3, 64, 64)).values.shape[0] == 64


def test_resolution_errors():
    with pytest.raises(InvalidInputError):
        _enc().encode(torch.rand(3, 63, 64))
    with pytest.raises(InvalidInputError):
        _enc().encode(torch.rand(3, 128, 128))  # low encoder is fixed-resolution
    with pytest.raises(InvalidInputError):
        EncoderConfig(60, 16)


def test_deterministic_and_finite():
    enc = _enc()
    img = torch.rand(3, 64, 64)
    assert torch.equal(enc.encode(img).values, enc.encode(img).values)
    assert torch.isfinite(enc.encode(torch.zeros(3, 64, 64)).values).all()
    assert torch.equal(_enc().encode(img).values, enc.encode(img).values)  # seeded init


def test_weight_archive_roundtrip(tmp_path):
    cfgs = [EncoderConfig(64, 16, 8, 1, seed=s) for s in (0, 1, 2)]
    a, b = Encoders(*cfgs), Encoders(*[EncoderConfig(64, 16, 8, 1, seed=s + 7) for s in (0, 1, 2)])
    path = tmp_path / "enc.npz"
    a.save_weights(path)
    import numpy as np
    with np.load(path) as data:
        assert all(k.split(".")[0] in ("low", "high", "ground") for k in data.files)
    b.load_weights(path)
    img = torch.rand(3, 64, 64)
    assert torch.equal(a.encode_grounding(img).values, b.encode_grounding(img).values)


def test_frozen_encoders_have_no_grad():
    encs = Encoders(EncoderConfig(64, 16, 8, 1), EncoderConfig(64, 16, 8, 1), EncoderConfig(64, 16, 8, 1),
                    frozen=True)
    assert not any(p.requires_grad for p in encs.parameters())
