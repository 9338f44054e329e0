import json

import numpy as np
import pytest
import torch

from unires.data_synth import (LAYOUTS, SHAPES, SceneObject, ConfigError, SchemaError, apportion, caption_pairs, generate_dataset,
                               load_refcoco_style, render_scene, sample_to_record, template_words,
                               write_annotations)
from unires.geometry import Level, mask_to_box


def test_apportion_counts():
    assert apportion(64, (0.4, 0.2, 0.3, 0.1)) == [26, 13, 19, 6]
    assert apportion(10, (1, 0, 0, 0)) == [10, 0, 0, 0]
    assert sum(apportion(7, (0.25, 0.25, 0.25, 0.25))) == 7
    with pytest.raises(ConfigError):
        apportion(10, (0.5, 0.6, 0, 0))


def test_dataset_mix_and_determinism():
    a = generate_dataset(3, 64)
    kinds = [s.kind for s in a]
    assert [kinds.count(k) for k in ("single", "multi", "part", "no_target")] == [26, 13, 19, 6]
    b = generate_dataset(3, 64)
    assert all(torch.equal(x.image, y.image) and x.expression == y.expression for x, y in zip(a, b))
    assert all(np.array_equal(x.gt_mask, y.gt_mask) for x, y in zip(a, b))
    assert all(s.kind == "single" for s in generate_dataset(1, 12, (1, 0, 0, 0)))


def test_infeasible_mix():
    with pytest.raises(ConfigError):
        generate_dataset(0, 10, (0.5, 0, 0.5, 0), part_kinds=[])


def test_sample_invariants():
    vocab = set(template_words())
    for s in generate_dataset(7, 48):
        assert set(s.expression.split()) <= vocab
        assert s.image.shape == (3, 64, 64)
        if s.no_target:
            assert not s.gt_mask.any()
            continue
        assert s.gt_mask.sum() >= 64
        if s.granularity is Level.PART:
            assert s.kind == "part" and len(s.gt_masks) == 1
            assert mask_to_box(s.gt_masks[0]) in s.part_boxes
        if s.kind == "multi":
            assert len(s.gt_masks) >= 2


def test_parts_tile_within_their_object():
    for s in generate_dataset(5, 20, (0, 0, 1, 0)):
        r = render_scene(s.scene)
        for om, parts in zip(r.object_masks, r.part_masks):
            masks = list(parts.values())
            assert all((m & ~om).sum() == 0 and m.sum() >= 64 for m in masks)
            assert all(not (a & b).any() for i, a in enumerate(masks) for b in masks[i + 1:])


def test_part_layout_varies_per_object():
    obj = lambda layout: SceneObject("house", "red", 8, 8, layout=layout)
    doors = {obj(k).region_box("door").as_tuple() for k in range(len(LAYOUTS["house"]))}
    assert len(doors) == len(LAYOUTS["house"])
    assert all(obj(k).box == obj(0).box for k in range(len(LAYOUTS["house"])))


def test_annotation_roundtrip(tmp_path):
    data = generate_dataset(2, 16)
    path = tmp_path / "ann.jsonl"
    write_annotations(data, path)
    back = load_refcoco_style(path)
    for a, b in zip(data, back):
        assert a.sample_id == b.sample_id and a.expression == b.expression
        assert a.granularity is b.granularity and a.no_target == b.no_target
        assert np.array_equal(a.gt_mask, b.gt_mask)
        assert torch.equal(a.image, b.image)
        assert a.object_boxes == b.object_boxes and a.part_boxes == b.part_boxes


def _write(tmp_path, recs):
    path = tmp_path / "x.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in recs))
    return path


def test_schema_cases(tmp_path):
    good = sample_to_record(generate_dataset(0, 1, (0, 0, 1, 0))[0])
    assert load_refcoco_style(_write(tmp_path, [good]))[0].granularity is Level.PART
    neg = dict(good, no_target=True, granularity="object", masks=[{"size": [64, 64], "counts": []}])
    s = load_refcoco_style(_write(tmp_path, [neg]))[0]
    assert s.no_target and not s.gt_mask.any()
    with pytest.raises(SchemaError) as e:
        load_refcoco_style(_write(tmp_path, [good, dict(good, expression=5)]))
    assert e.value.line == 2
    with pytest.raises(SchemaError):
        load_refcoco_style(_write(tmp_path, [dict(good, masks=[{"size": [64, 64], "counts": [1, 2]}])]))


def test_caption_pairs_single_regions():
    data = generate_dataset(4, 20)
    pairs = caption_pairs(data)
    assert pairs and all(len(s.boxes) == 1 and cap == s.expression for s, _, cap in pairs)


def test_shape_catalogue_sizes():
    for kind, (w, h, parts) in SHAPES.items():
        assert w % 4 == 0 and h % 4 == 0 and parts
