"""Grounding-data generation engine over pluggable captioner / segmenter / part-vocabulary / scorer backends.

Mock backends operating on synthetic scene descriptions ship here, along with a
line-delimited JSON client and server for running backends out of process.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data_synth import COLORS, SHAPES, SceneSpec, _decode_image, part_names, render_scene
from .geometry import (BoundingBox, CoordSpace, RleMask, box_mask, mask_iou, mask_to_box, normalize_box,
                       rle_decode, rle_encode)

log = logging.getLogger(__name__)

SCORE_THRESHOLD = 0.5
STOPWORDS = {"the", "of", "a", "an", "and", "with", "at", "in"}


class BackendError(RuntimeError):
    pass


@dataclass
class EngineImage:
    image_id: str
    pixels: np.ndarray                       # H x W x 3 uint8
    objects: list = field(default_factory=list)   # [(label, BoundingBox)]
    scene: SceneSpec | None = None

    @property
    def size(self) -> tuple:
        return self.pixels.shape[1], self.pixels.shape[0]   # (w, h)


@dataclass
class Crop:
    image: EngineImage
    box: BoundingBox

    @property
    def pixels(self) -> np.ndarray:
        b = self.box
        return self.image.pixels[int(b.y0):int(b.y1), int(b.x0):int(b.x1)]


@dataclass
class BackendClients:
    captioner: Callable[[EngineImage, BoundingBox], str]
    segmenter: Callable[..., np.ndarray]          # (image, pixel box, label=None) -> mask
    part_vocab: Callable[[str], list]
    scorer: Callable[[Crop, str], float]


@dataclass
class GeneratedPair:
    image_id: str
    index: int
    level: str
    box: list
    box_norm: list
    mask: dict
    caption: str
    score: float | None = None
    kept: bool = False
    label: str = ""
    parent: int | None = None
    consistent: bool = True
    score_crop: str = "self"
    detail: str = ""

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "index": self.index, "level": self.level, "label": self.label,
                "box": self.box, "box_norm": self.box_norm, "mask": self.mask, "caption": self.caption,
                "detail": self.detail, "score": self.score, "kept": self.kept, "parent": self.parent,
                "consistent": self.consistent, "score_crop": self.score_crop}


def part_caption(part: str, obj: str) -> str:
    return f"{part} of {obj}"


def _box_list(b: BoundingBox) -> list:
    return [b.x0, b.y0, b.x1, b.y1]


def generate_object_pairs(image: EngineImage, boxes: Sequence, clients: BackendClients,
                          include_full_image: bool = False, failures: list | None = None) -> list:
    """One pair per (label, pixel box); backend failures are logged and skipped."""
    w, h = image.size
    todo = [(i, lbl, b) for i, (lbl, b) in enumerate(boxes)]
    if include_full_image:
        todo.append((len(boxes), "image", BoundingBox(0, 0, w, h)))
    pairs = []
    for i, label, box in todo:
        norm = normalize_box(box, w, h)
        try:
            caption = clients.captioner(image, norm)
            mask = clients.segmenter(image, box) if label != "image" else np.ones((h, w), dtype=bool)
            score = float(clients.scorer(Crop(image, box), caption))
        except BackendError as e:
            log.warning("image %s box %d: backend failure: %s", image.image_id, i, e)
            if failures is not None:
                failures.append({"image_id": image.image_id, "index": i, "error": str(e)})
            continue
        pairs.append(GeneratedPair(image.image_id, i, "image" if label == "image" else "object", _box_list(box),
                                   _box_list(norm), rle_encode(mask).to_json(), caption, score, label=label))
    return pairs


def generate_part_pairs(image: EngineImage, object_label: str, object_box: BoundingBox, clients: BackendClients,
                        parent: int = 0, start_index: int = 0, failures: list | None = None) -> list:
    w, h = image.size
    labels = clients.part_vocab(object_label)
    if not labels:
        log.warning("image %s: empty part vocabulary for %r", image.image_id, object_label)
        return []
    pairs = []
    for k, part in enumerate(labels):
        idx = start_index + k
        try:
            mask = clients.segmenter(image, object_box, label=part)
            pbox = mask_to_box(mask)
            if pbox is None:
                raise BackendError(f"segmenter found no {part!r}")
            norm = normalize_box(pbox, w, h)
            detail = clients.captioner(image, norm)
            caption = part_caption(part, object_label)
            score = float(clients.scorer(Crop(image, pbox), caption))
        except BackendError as e:
            log.warning("image %s part %s: backend failure: %s", image.image_id, part, e)
            if failures is not None:
                failures.append({"image_id": image.image_id, "index": idx, "error": str(e)})
            continue
        pairs.append(GeneratedPair(image.image_id, idx, "part", _box_list(pbox), _box_list(norm),
                                   rle_encode(mask).to_json(), caption, score, label=part, parent=parent,
                                   consistent=object_box.contains(pbox), detail=detail))
    return pairs


def filter_pairs(pairs: Iterable[GeneratedPair]) -> list:
    kept = []
    for p in pairs:
        if p.score is None:
            raise ValueError(f"pair {p.image_id}/{p.index} has no score")
        p.kept = p.score > SCORE_THRESHOLD
        if p.kept:
            kept.append(p)
    return kept


def process_image(image: EngineImage, clients: BackendClients, include_full_image: bool = False):
    failures = []
    objs = generate_object_pairs(image, image.objects, clients, include_full_image, failures)
    filter_pairs(objs)
    parts = []
    next_idx = len(image.objects) + int(include_full_image)
    for p in objs:
        if p.kept and p.level == "object":
            box = BoundingBox(*p.box)
            new = generate_part_pairs(image, p.label, box, clients, parent=p.index, start_index=next_idx,
                                      failures=failures)
            next_idx += len(clients.part_vocab(p.label)) or 0
            filter_pairs(new)
            parts.extend(new)
    return objs + parts, failures


@dataclass
class RunSummary:
    processed: int = 0
    kept: int = 0
    dropped: int = 0
    failed: int = 0
    complete: bool = True

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _token_path(out: Path) -> Path:
    return out.with_name(out.name + ".resume.json")


def run_pipeline(images: Iterable[EngineImage], clients: BackendClients, output_path, resume: bool = True,
                 workers: int = 1, max_images: int | None = None, include_full_image: bool = False) -> RunSummary:
    """Stream pairs to line-delimited JSON in image-id order; resumable after interruption.

    ``max_images`` stops after that many images were committed in this call.
    """
    out = Path(output_path)
    token_file = _token_path(out)
    last_id, offset = None, 0
    if resume and token_file.exists():
        tok = json.loads(token_file.read_text())
        last_id, offset = tok["last_image_id"], tok["offset"]
    try:
        fh = open(out, "r+b" if (last_id is not None and out.exists()) else "wb")
    except OSError as e:
        raise OSError(f"cannot open output {out}: {e}") from e
    summary = RunSummary()
    with fh:
        fh.truncate(offset)
        fh.seek(offset)
        todo = sorted((im for im in images if last_id is None or im.image_id > last_id), key=lambda im: im.image_id)
        if max_images is not None:
            summary.complete = len(todo) <= max_images
            todo = todo[:max_images]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = pool.map(lambda im: (im, _safe_process(im, clients, include_full_image)), todo)
            for im, (pairs, failures) in results:
                block = "".join(json.dumps(p.to_json(), sort_keys=True) + "\n" for p in pairs)
                fh.write(block.encode())
                fh.flush()
                os.fsync(fh.fileno())
                offset = fh.tell()
                tmp = token_file.with_suffix(".tmp")
                tmp.write_text(json.dumps({"last_image_id": im.image_id, "offset": offset}))
                os.replace(tmp, token_file)
                summary.processed += 1
                summary.kept += sum(p.kept for p in pairs)
                summary.dropped += sum(not p.kept for p in pairs)
                summary.failed += len(failures)
    return summary


def _safe_process(im, clients, include_full_image):
    try:
        return process_image(im, clients, include_full_image)
    except Exception as e:  # noqa: BLE001 - per-image errors are not fatal
        log.error("image %s failed: %s", im.image_id, e)
        return [], [{"image_id": im.image_id, "index": None, "error": str(e)}]


# --- mock backends ---------------------------------------------------------

def _words(text: str) -> set:
    return {w for w in text.lower().split() if w not in STOPWORDS}


def _stable_unit(*key) -> float:
    h = hashlib.sha256(json.dumps(key).encode()).digest()
    return int.from_bytes(h[:8], "big") / 2**64


def _scene_elements(image: EngineImage):
    """(box, reference text, mask, object kind, part name) for every object and part in the scene."""
    if image.scene is None:
        raise BackendError(f"image {image.image_id} has no scene description for the mock backends")
    r = render_scene(image.scene)
    out = []
    for obj, om, pm in zip(image.scene.objects, r.object_masks, r.part_masks):
        out.append((obj.box, f"{obj.color} {obj.kind}", om, obj.kind, None))
        for p, m in pm.items():
            out.append((mask_to_box(m), part_caption(p, obj.kind), m, obj.kind, p))
    return out


def _best_element(image: EngineImage, box: BoundingBox):
    h, w = image.pixels.shape[:2]
    target = box_mask(box, h, w)
    best, best_iou = None, 0.0
    for el in _scene_elements(image):
        iou = mask_iou(box_mask(el[0], h, w), target)
        if iou > best_iou:
            best, best_iou = el, iou
    return best


def _denorm(box: BoundingBox, w: int, h: int) -> BoundingBox:
    if box.space is CoordSpace.PIXEL:
        return box
    return BoundingBox(box.x0 / 999 * w, box.y0 / 999 * h, box.x1 / 999 * w, box.y1 / 999 * h)


class MockCaptioner:
    """Template captions from the scene; a seeded fraction get a wrong colour word."""

    def __init__(self, seed: int = 0, corrupt_rate: float = 0.25):
        self.seed, self.corrupt_rate = seed, corrupt_rate

    def __call__(self, image: EngineImage, norm_box: BoundingBox) -> str:
        if norm_box.as_tuple() == (0, 0, 999, 999):
            return " and ".join(f"{o.color} {o.kind}" for o in image.scene.objects) if image.scene else "image"
        w, h = image.size
        el = _best_element(image, _denorm(norm_box, w, h))
        if el is None:
            return "background"
        text = el[1]
        if el[4] is None and _stable_unit(self.seed, image.image_id, norm_box.as_tuple()) < self.corrupt_rate:
            color, kind = text.split()
            others = [c for c in COLORS if c != color]
            text = f"{others[int(_stable_unit(self.seed, text) * len(others))]} {kind}"
        return text


class MockSegmenter:
    """Returns the exact scene mask of the object (or named part) best matching the prompt box."""

    def __init__(self, fail_on: Callable[[EngineImage, BoundingBox], bool] | None = None):
        self.fail_on = fail_on

    def __call__(self, image: EngineImage, box: BoundingBox, label: str | None = None) -> np.ndarray:
        if self.fail_on and self.fail_on(image, box):
            raise BackendError("segmenter failure (injected)")
        el = _best_element(image, box)
        if el is None:
            raise BackendError("nothing to segment")
        if label is None:
            return el[2]
        for pbox, _, m, kind, part in _scene_elements(image):
            if part == label and box.contains(pbox):
                return m
        raise BackendError(f"no part {label!r} inside box")


def mock_part_vocab(label: str) -> list:
    return part_names(label) if label in SHAPES else []


class LexicalOverlapScorer:
    """Jaccard overlap between caption words and the scene's reference text for the crop."""

    def __call__(self, crop: Crop, caption: str) -> float:
        w, h = crop.image.size
        if crop.box.as_tuple() == (0, 0, w, h) and crop.image.scene is not None:
            ref = " ".join(f"{o.color} {o.kind}" for o in crop.image.scene.objects)
        else:
            el = _best_element(crop.image, crop.box)
            ref = el[1] if el else ""
        a, b = _words(caption), _words(ref)
        return len(a & b) / len(a | b) if a | b else 0.0


def mock_clients(seed: int = 0, corrupt_rate: float = 0.25, fail_on=None) -> BackendClients:
    return BackendClients(MockCaptioner(seed, corrupt_rate), MockSegmenter(fail_on), mock_part_vocab,
                          LexicalOverlapScorer())


# --- image sources ---------------------------------------------------------

def engine_images_from_samples(samples) -> list:
    """One engine image per distinct synthetic scene, labelled with its object boxes."""
    from .data_synth import tensor_to_image
    out, seen = [], set()
    for s in samples:
        key = json.dumps(s.scene.to_json(), sort_keys=True)
        if key in seen:
            continue
        seen.add(key)
        objs = [(o.kind, o.box) for o in s.scene.objects]
        out.append(EngineImage(f"img-{len(out):05d}", tensor_to_image(s.image), objs, s.scene))
    return out


def write_image_index(images: Sequence[EngineImage], directory) -> Path:
    from PIL import Image
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "index.jsonl", "w") as fh:
        for im in images:
            fname = f"{im.image_id}.png"
            Image.fromarray(im.pixels).save(d / fname)
            rec = {"id": im.image_id, "image": fname,
                   "objects": [{"label": lbl, "box": _box_list(b)} for lbl, b in im.objects]}
            if im.scene is not None:
                rec["scene"] = im.scene.to_json()
            fh.write(json.dumps(rec) + "\n")
    return d / "index.jsonl"


def read_image_index(directory) -> list:
    d = Path(directory)
    out = []
    with open(d / "index.jsonl") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            objs = [(o["label"], BoundingBox(*o["box"])) for o in rec.get("objects", [])]
            scene = SceneSpec.from_json(rec["scene"]) if "scene" in rec else None
            out.append(EngineImage(rec["id"], _decode_image(rec["image"], d), objs, scene))
    return out


# --- out-of-process backends -----------------------------------------------

class JsonLinesBackend:
    """Client side of the wire contract: one JSON request per line, one JSON response per line."""

    def __init__(self, argv: Sequence[str]):
        self.proc = subprocess.Popen(list(argv), stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True,
                                     bufsize=1)

    def request(self, op: str, image: EngineImage | None = None, box: BoundingBox | None = None,
                label: str | None = None, caption: str | None = None):
        req = {"op": op}
        if image is not None:
            req["image"] = image.image_id
        if box is not None:
            req["box"] = _box_list(box)
            req["space"] = box.space.value
        if label is not None:
            req["label"] = label
        if caption is not None:
            req["caption"] = caption
        self.proc.stdin.write(json.dumps(req) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise BackendError("backend process closed its output")
        resp = json.loads(line)
        if not resp.get("ok"):
            raise BackendError(resp.get("error", "unknown backend error"))
        return resp["payload"]

    def clients(self) -> BackendClients:
        def seg(image, box, label=None):
            return rle_decode(RleMask.from_json(self.request("segment", image, box, label=label)))
        return BackendClients(
            captioner=lambda image, box: self.request("caption", image, box),
            segmenter=seg,
            part_vocab=lambda label: self.request("part_vocab", label=label),
            scorer=lambda crop, caption: float(self.request("score", crop.image, crop.box, caption=caption)))

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)


def serve(images: Sequence[EngineImage], clients: BackendClients, stdin=sys.stdin, stdout=sys.stdout) -> None:
    """Server side of the wire contract, answering from in-process clients."""
    by_id = {im.image_id: im for im in images}
    for line in stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            op = req["op"]
            image = by_id[req["image"]] if "image" in req else None
            box = None
            if "box" in req:
                box = BoundingBox(*req["box"], space=CoordSpace(req.get("space", "pixel")))
            if op == "caption":
                payload = clients.captioner(image, box)
            elif op == "segment":
                payload = rle_encode(clients.segmenter(image, box, label=req.get("label"))).to_json()
            elif op == "part_vocab":
                payload = clients.part_vocab(req["label"])
            elif op == "score":
                payload = clients.scorer(Crop(image, box), req["caption"])
            else:
                raise BackendError(f"unknown op {op!r}")
            resp = {"ok": True, "payload": payload}
        except Exception as e:  # noqa: BLE001 - errors travel back over the wire
            resp = {"ok": False, "error": f"{type(e).__name__}: {e}"}
        stdout.write(json.dumps(resp) + "\n")
        stdout.flush()


def main(argv=None):
    import argparse
    ap = argparse.ArgumentParser(prog="python -m unires.engine")
    sub = ap.add_subparsers(dest="cmd", required=True)
    sp = sub.add_parser("serve", help="serve mock backends over stdin/stdout")
    sp.add_argument("--images", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--corrupt-rate", type=float, default=0.25)
    args = ap.parse_args(argv)
    serve(read_image_index(args.images), mock_clients(args.seed, args.corrupt_rate))


if __name__ == "__main__":
    main()
