"""Synthetic multi-granularity grounding scenes and RefCOCO-style annotation I/O.

Objects are drawn from axis-aligned rectangles on a 4-pixel lattice so every
object and part mask is an exact function of the scene description.
"""
from __future__ import annotations

import base64
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .geometry import BoundingBox, Level, RleMask, mask_to_box, rle_decode, rle_encode

LATTICE = 4
CANVAS = 64
MIN_TARGET_AREA = 64

COLORS = {
    "red": (220, 40, 40), "green": (40, 180, 60), "blue": (40, 80, 220),
    "yellow": (230, 210, 40), "purple": (150, 60, 190), "orange": (240, 140, 30),
}
FIXED = {"brown": (120, 70, 30), "glass": (170, 220, 240), "skin": (240, 200, 160),
         "denim": (30, 40, 90)}
PLURALS = {"house": "houses", "car": "cars", "tree": "trees", "person": "people"}

# kind -> (width, height, [(region, x, y, w, h, fill, is_part)]); fill "obj" = object colour,
# "dark" = darkened object colour, otherwise a FIXED colour. Later regions paint over earlier.
SHAPES = {
    "house": (24, 28, [("wall", 0, 8, 24, 20, "obj", False), ("roof", 0, 0, 24, 8, "dark", True),
                       ("door", 4, 16, 8, 12, "brown", True), ("window", 16, 12, 8, 8, "glass", True)]),
    "car": (28, 16, [("body", 0, 8, 28, 8, "obj", True), ("cabin", 4, 0, 20, 8, "glass", True)]),
    "tree": (24, 28, [("crown", 0, 0, 24, 16, "obj", True), ("trunk", 8, 16, 8, 12, "brown", True)]),
    "person": (16, 32, [("head", 4, 0, 8, 8, "skin", True), ("torso", 0, 8, 16, 12, "obj", True),
                        ("legs", 4, 20, 8, 12, "denim", True)]),
}
# per-object part layouts: each variant overrides the x offset of some regions, so a part's
# position is not implied by its parent's box alone
LAYOUTS = {
    "house": [{}, {"door": 12, "window": 0}, {"door": 0, "window": 12}, {"door": 16, "window": 4}],
    "car": [{}, {"cabin": 0}, {"cabin": 8}],
    "tree": [{}, {"trunk": 4}, {"trunk": 12}],
    "person": [{}, {"head": 0}, {"head": 8}],
}
SAMPLE_KINDS = ("single", "multi", "part", "no_target")


class ConfigError(ValueError):
    pass


class SchemaError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def part_names(kind: str) -> list:
    return [r[0] for r in SHAPES[kind][2] if r[6]]


def template_words() -> list:
    words = {"the", "of", "all"} | set(COLORS) | set(SHAPES) | set(PLURALS.values())
    for kind in SHAPES:
        words |= set(part_names(kind))
    return sorted(words)


@dataclass
class SceneObject:
    kind: str
    color: str
    x: int
    y: int
    scale: int = 1
    layout: int = 0

    @property
    def box(self) -> BoundingBox:
        w, h, _ = SHAPES[self.kind]
        return BoundingBox(self.x, self.y, self.x + w * self.scale, self.y + h * self.scale)

    def region_box(self, name: str) -> BoundingBox:
        shift = LAYOUTS[self.kind][self.layout]
        for r, rx, ry, rw, rh, _, _ in SHAPES[self.kind][2]:
            if r == name:
                rx = shift.get(r, rx)
                s = self.scale
                return BoundingBox(self.x + rx * s, self.y + ry * s, self.x + (rx + rw) * s, self.y + (ry + rh) * s)
        raise KeyError(name)


@dataclass
class SceneSpec:
    size: int = CANVAS
    objects: list = field(default_factory=list)
    noise_seed: int = 0

    def to_json(self) -> dict:
        return {"size": self.size, "noise_seed": self.noise_seed, "objects": [asdict(o) for o in self.objects]}

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        return cls(obj["size"], [SceneObject(**o) for o in obj["objects"]], obj.get("noise_seed", 0))


@dataclass
class RenderedScene:
    image: np.ndarray             # H x W x 3 uint8
    object_masks: list            # per object
    part_masks: list              # per object: {part name: mask}


def render_scene(scene: SceneSpec) -> RenderedScene:
    n = scene.size
    rng = np.random.default_rng(scene.noise_seed)
    img = np.full((n, n, 3), 128, dtype=np.int16) + rng.integers(-8, 9, size=(n, n, 1))
    obj_masks, part_masks = [], []
    for obj in scene.objects:
        base = np.array(COLORS[obj.color])
        om = np.zeros((n, n), dtype=bool)
        owner = np.full((n, n), "", dtype=object)
        for name, *_rest in SHAPES[obj.kind][2]:
            fill = _rest[4]
            b = obj.region_box(name)
            sl = (slice(int(b.y0), int(b.y1)), slice(int(b.x0), int(b.x1)))
            color = base if fill == "obj" else (base * 0.55).astype(int) if fill == "dark" else np.array(FIXED[fill])
            img[sl] = color
            om[sl] = True
            owner[sl] = name
        obj_masks.append(om)
        part_masks.append({p: owner == p for p in part_names(obj.kind)})
    return RenderedScene(np.clip(img, 0, 255).astype(np.uint8), obj_masks, part_masks)


def image_to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(img.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    return (t.permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)


@dataclass
class GroundingSample:
    sample_id: str
    image: torch.Tensor                      # 3 x H x W in [0, 1]
    expression: str
    gt_masks: list
    granularity: Level = Level.OBJECT
    no_target: bool = False
    boxes: list = field(default_factory=list)          # target boxes
    object_boxes: list = field(default_factory=list)   # scene-level proposals
    part_boxes: list = field(default_factory=list)
    kind: str = "single"
    split: str = "train"
    scene: SceneSpec | None = None

    def __post_init__(self):
        if not self.expression.strip():
            raise ConfigError(f"{self.sample_id}: empty expression")
        if self.no_target and any(np.any(m) for m in self.gt_masks):
            raise ConfigError(f"{self.sample_id}: no-target sample with non-empty masks")
        if self.granularity is Level.PART and len(self.gt_masks) != 1:
            raise ConfigError(f"{self.sample_id}: part sample needs exactly one mask")

    @property
    def shape(self) -> tuple:
        return tuple(self.image.shape[-2:])

    @property
    def gt_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        for g in self.gt_masks:
            m |= g
        return m


def apportion(n: int, ratios: Sequence[float]) -> list:
    """Largest-remainder apportionment; ties go to the earlier class."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if (ratios < 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise ConfigError(f"mix ratios must be non-negative and sum to 1, got {list(ratios)}")
    quotas = n * ratios
    counts = np.floor(quotas).astype(int)
    rem = quotas - counts
    order = sorted(range(len(ratios)), key=lambda i: (-rem[i], i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _place(rng, kinds, size, tries=400):
    placed = []
    for kind in kinds:
        w, h, _ = SHAPES[kind]
        for _ in range(tries):
            x = int(rng.integers(0, (size - w) // LATTICE + 1)) * LATTICE
            y = int(rng.integers(0, (size - h) // LATTICE + 1)) * LATTICE
            b = (x, y, x + w, y + h)
            if all(b[2] <= p[0] or p[2] <= b[0] or b[3] <= p[1] or p[3] <= b[1] for _, p in placed):
                placed.append((kind, b))
                break
        else:
            return None
    return placed


def _make_scene(rng, kinds, size, fixed_colors=None):
    placed = _place(rng, kinds, size)
    if placed is None:
        return None
    names = list(COLORS)
    colors = fixed_colors or [names[i] for i in rng.permutation(len(names))[: len(kinds)]]
    objs = [SceneObject(k, c, b[0], b[1], layout=int(rng.integers(0, len(LAYOUTS[k]))))
            for (k, b), c in zip(placed, colors)]
    return SceneSpec(size, objs, int(rng.integers(0, 2**31 - 1)))


def _random_scene(rng, size, part_kinds, n_min=1, n_max=3, must=None, same_kind=None):
    all_kinds = list(SHAPES)
    others = [k for k in all_kinds if k != same_kind]
    while True:
        n = int(rng.integers(n_min, n_max + 1))
        if same_kind:
            k_same = int(rng.integers(2, n + 1))
            kinds = [same_kind] * k_same + [others[int(rng.integers(0, len(others)))] for _ in range(n - k_same)]
        else:
            kinds = [all_kinds[int(rng.integers(0, 4))] for _ in range(n)]
            if must and must not in kinds:
                kinds[0] = must
        scene = _make_scene(rng, kinds, size)
        if scene is not None:
            return scene


def sample_from_scene(sample_id: str, scene: SceneSpec, kind: str, target: int | None = None,
                      part: str | None = None, expression: str | None = None, split: str = "train") -> GroundingSample:
    r = render_scene(scene)
    img = image_to_tensor(r.image)
    object_boxes = [o.box for o in scene.objects]
    part_boxes = [mask_to_box(pm[p]) for pm in r.part_masks for p in pm]
    common = dict(object_boxes=object_boxes, part_boxes=part_boxes, kind=kind, split=split, scene=scene)
    if kind == "part":
        obj = scene.objects[target]
        m = r.part_masks[target][part]
        expr = expression or f"{part} of the {obj.color} {obj.kind}"
        return GroundingSample(sample_id, img, expr, [m], Level.PART, False, [mask_to_box(m)], **common)
    if kind == "multi":
        kind_name = scene.objects[target].kind
        idx = [i for i, o in enumerate(scene.objects) if o.kind == kind_name]
        expr = expression or f"all {PLURALS[kind_name]}"
        return GroundingSample(sample_id, img, expr, [r.object_masks[i] for i in idx], Level.OBJECT, False,
                               [scene.objects[i].box for i in idx], **common)
    if kind == "no_target":
        return GroundingSample(sample_id, img, expression, [], Level.OBJECT, True, [], **common)
    obj = scene.objects[target]
    expr = expression or f"the {obj.color} {obj.kind}"
    return GroundingSample(sample_id, img, expr, [r.object_masks[target]], Level.OBJECT, False, [obj.box], **common)


def _generate_one(rng, sample_id, kind, size, part_kinds, split):
    if kind == "single":
        scene = _random_scene(rng, size, part_kinds)
        return sample_from_scene(sample_id, scene, "single", int(rng.integers(0, len(scene.objects))), split=split)
    if kind == "multi":
        k = list(SHAPES)[int(rng.integers(0, 4))]
        scene = _random_scene(rng, size, part_kinds, n_min=2, n_max=3, same_kind=k)
        target = next(i for i, o in enumerate(scene.objects) if o.kind == k)
        return sample_from_scene(sample_id, scene, "multi", target, split=split)
    if kind == "part":
        must = part_kinds[int(rng.integers(0, len(part_kinds)))]
        scene = _random_scene(rng, size, part_kinds, must=must)
        cands = [i for i, o in enumerate(scene.objects) if o.kind in part_kinds]
        t = cands[int(rng.integers(0, len(cands)))]
        parts = part_names(scene.objects[t].kind)
        return sample_from_scene(sample_id, scene, "part", t, parts[int(rng.integers(0, len(parts)))], split=split)
    scene = _random_scene(rng, size, part_kinds)
    present = {(o.color, o.kind) for o in scene.objects}
    absent = [(c, k) for c in COLORS for k in SHAPES if (c, k) not in present]
    c, k = absent[int(rng.integers(0, len(absent)))]
    return sample_from_scene(sample_id, scene, "no_target", expression=f"the {c} {k}", split=split)


def generate_dataset(seed: int, n_samples: int, mix: Sequence[float] = (0.4, 0.2, 0.3, 0.1), *,
                     size: int = CANVAS, part_kinds: Sequence[str] | None = None,
                     split: str = "train") -> list:
    """Deterministic mixture over (single-object, multi-object, part, no-target)."""
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    if len(mix) != len(SAMPLE_KINDS):
        raise ConfigError(f"mix needs {len(SAMPLE_KINDS)} ratios")
    part_kinds = list(SHAPES) if part_kinds is None else list(part_kinds)
    if mix[2] > 0 and not part_kinds:
        raise ConfigError("part samples requested but no shape kinds with parts are enabled")
    counts = apportion(n_samples, mix)
    kinds = [k for k, c in zip(SAMPLE_KINDS, counts) for _ in range(c)]
    root = np.random.SeedSequence(seed)
    order = np.random.default_rng(root.spawn(1)[0]).permutation(n_samples)
    children = root.spawn(n_samples)
    out = []
    for i, j in enumerate(order):
        rng = np.random.default_rng(children[i])
        out.append(_generate_one(rng, f"{split}-{seed}-{i:05d}", kinds[j], size, part_kinds, split))
    return out


# --- annotation files ------------------------------------------------------

def _png_b64(img: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()


def _box_list(b: BoundingBox) -> list:
    return [b.x0, b.y0, b.x1, b.y1]


def sample_to_record(s: GroundingSample) -> dict:
    h, w = s.shape
    rec = {"id": s.sample_id, "image": _png_b64(tensor_to_image(s.image)), "expression": s.expression,
           "granularity": "part" if s.granularity is Level.PART else "object",
           "no_target": s.no_target, "masks": [rle_encode(m).to_json() for m in s.gt_masks],
           "boxes": [_box_list(b) for b in s.boxes],
           "object_boxes": [_box_list(b) for b in s.object_boxes],
           "part_boxes": [_box_list(b) for b in s.part_boxes],
           "split": s.split}
    if s.scene is not None:
        rec["scene"] = s.scene.to_json()
    return rec


def write_annotations(samples: Sequence[GroundingSample], path) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s)) + "\n")


def _decode_image(ref: str, base: Path) -> np.ndarray:
    if ref.startswith("data:"):
        data = base64.b64decode(ref.split(",", 1)[1])
    else:
        p = Path(ref)
        p = p if p.is_absolute() else base / p
        if p.exists():
            data = p.read_bytes()
        else:
            data = base64.b64decode(ref)
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))


def _parse_boxes(obj, key, ln):
    out = []
    for b in obj.get(key, []) or []:
        if not isinstance(b, list) or len(b) != 4:
            raise SchemaError(ln, f"{key} entries must be [x0,y0,x1,y1]")
        try:
            out.append(BoundingBox(*map(float, b)))
        except ValueError as e:
            raise SchemaError(ln, str(e)) from None
    return out


def parse_record(obj: dict, ln: int, base: Path) -> GroundingSample:
    for key, typ in (("id", str), ("image", str), ("expression", str)):
        if not isinstance(obj.get(key), typ):
            raise SchemaError(ln, f"field {key!r} missing or not a {typ.__name__}")
    gran = obj.get("granularity", "object")
    if gran not in ("object", "part"):
        raise SchemaError(ln, f"granularity must be 'object' or 'part', got {gran!r}")
    no_target = obj.get("no_target", False)
    if not isinstance(no_target, bool):
        raise SchemaError(ln, "no_target must be a boolean")
    try:
        img = _decode_image(obj["image"], base)
    except Exception as e:  # noqa: BLE001 - any decode failure is a schema problem
        raise SchemaError(ln, f"cannot decode image: {e}") from None
    h, w = img.shape[:2]
    masks = []
    for m in obj.get("masks", []) or []:
        if not isinstance(m, dict) or "size" not in m or "counts" not in m:
            raise SchemaError(ln, "mask entries need 'size' and 'counts'")
        if list(m["size"]) != [h, w]:
            raise SchemaError(ln, f"mask size {m['size']} does not match image {h}x{w}")
        if not m["counts"]:
            masks.append(np.zeros((h, w), dtype=bool))
            continue
        try:
            masks.append(rle_decode(RleMask.from_json(m)))
        except ValueError as e:
            raise SchemaError(ln, str(e)) from None
    if no_target:
        if any(m.any() for m in masks):
            raise SchemaError(ln, "no_target record carries a non-empty mask")
        masks = []
    level = Level.PART if gran == "part" else Level.OBJECT
    if level is Level.PART and len(masks) > 1:
        masks = [np.logical_or.reduce(masks)]
    boxes = _parse_boxes(obj, "boxes", ln)
    obj_boxes = _parse_boxes(obj, "object_boxes", ln) or ([] if level is Level.PART else list(boxes))
    part_boxes = _parse_boxes(obj, "part_boxes", ln) or (list(boxes) if level is Level.PART else [])
    scene = SceneSpec.from_json(obj["scene"]) if "scene" in obj else None
    kind = "no_target" if no_target else ("part" if level is Level.PART else ("multi" if len(masks) > 1 else "single"))
    try:
        return GroundingSample(obj["id"], image_to_tensor(img), obj["expression"], masks, level, no_target,
                               boxes, obj_boxes, part_boxes, kind, obj.get("split", "val"), scene)
    except ConfigError as e:
        raise SchemaError(ln, str(e)) from None


def load_refcoco_style(path) -> list:
    path = Path(path)
    out = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(ln, f"invalid JSON: {e.msg}") from None
            if not isinstance(obj, dict):
                raise SchemaError(ln, "record must be a JSON object")
            out.append(parse_record(obj, ln, path.parent))
    return out


def caption_pairs(samples: Sequence[GroundingSample]) -> list:
    """(sample, region box, caption) triples for the toy region-captioning task."""
    return [(s, s.boxes[0], s.expression) for s in samples if not s.no_target and len(s.boxes) == 1]
