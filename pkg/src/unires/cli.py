"""Command-line entry point: train, eval, gen-data, engine-run, grad-check, report."""
from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("unires")


def _overrides(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise SystemExit(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_train(args) -> int:
    from .data_synth import generate_dataset, load_refcoco_style
    from .train import dump_config, parse_config_text, save_checkpoint, train

    text = Path(args.config).read_text() if args.config else ""
    text += "".join(f"{k} = {v}\n" for k, v in _overrides(args.set).items())
    cfg = parse_config_text(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.data:
        data = load_refcoco_style(args.data)
    else:
        data = generate_dataset(cfg.data_seed, cfg.n_train, cfg.mix_ratios)
    (out / "config.txt").write_text(dump_config(cfg))
    res = train(cfg, data, log_path=out / "train_log.jsonl")
    res.model.vocab.save(out / "vocab.txt")
    save_checkpoint(out / "checkpoint.pt", res.model, cfg, res.optimizer, res.step)
    last = res.history[-1] if res.history else {}
    print(json.dumps({"steps": res.step, "final": last, "checkpoint": str(out / "checkpoint.pt")}))
    return 0


def _overlay(sample, pred: np.ndarray) -> np.ndarray:
    """Prediction as a translucent red fill, ground truth as a green contour."""
    from .data_synth import tensor_to_image
    img = tensor_to_image(sample.image).astype(np.float64)
    img[pred] = 0.5 * img[pred] + 0.5 * np.array([230.0, 40.0, 40.0])
    gt = sample.gt_mask
    pad = np.pad(gt, 1)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    img[gt & ~interior] = (40, 220, 40)
    return img.round().astype(np.uint8)


def cmd_eval(args) -> int:
    from PIL import Image

    from .data_synth import load_refcoco_style
    from .metrics import report_document, write_records
    from .train import evaluate, load_checkpoint

    model, cfg, _, _ = load_checkpoint(args.ckpt)
    data = load_refcoco_style(args.data)
    result = evaluate(data, model, threshold=args.threshold)
    doc = report_document(result.records, proposal_source=cfg.proposal_source)
    doc["granularity_accuracy"] = result.granularity_accuracy
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(json.dumps(doc, indent=2))
    records = Path(args.records) if args.records else report.with_suffix(".records.jsonl")
    write_records(result.records, records)
    if args.overlays:
        d = Path(args.overlays)
        d.mkdir(parents=True, exist_ok=True)
        for s, r in zip(data, result.records):
            Image.fromarray(_overlay(s, r.pred)).save(d / f"{s.sample_id}.png")
    o = doc["overall"]
    print(json.dumps({k: o[k] for k in ("miou", "oiou", "giou", "n_acc")} |
                     {"granularity_accuracy": result.granularity_accuracy, "records": str(records)}))
    return 0


def cmd_gen_data(args) -> int:
    from .data_synth import generate_dataset, write_annotations
    from .engine import engine_images_from_samples, write_image_index

    mix = tuple(float(x) for x in args.mix.split(","))
    data = generate_dataset(args.seed, args.n, mix, split=args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_annotations(data, out)
    if args.engine_dir:
        write_image_index(engine_images_from_samples(data), args.engine_dir)
    kinds = {k: sum(s.kind == k for s in data) for k in ("single", "multi", "part", "no_target")}
    print(json.dumps({"samples": len(data), "kinds": kinds, "out": str(out)}))
    return 0


def _backends(spec: str, images_dir: str):
    """'mock', 'mock:<seed>' or 'cmd:<command line>' speaking the JSON-lines wire contract."""
    from .engine import JsonLinesBackend, mock_clients

    if spec == "mock" or spec.startswith("mock:"):
        seed = int(spec.split(":", 1)[1]) if ":" in spec else 0
        return mock_clients(seed), None
    if spec == "mock-process" or spec.startswith("mock-process:"):
        seed = spec.split(":", 1)[1] if ":" in spec else "0"
        argv = [sys.executable, "-m", "unires.engine", "serve", "--images", images_dir, "--seed", seed]
        backend = JsonLinesBackend(argv)
        return backend.clients(), backend
    if spec.startswith("cmd:"):
        backend = JsonLinesBackend(shlex.split(spec[4:]))
        return backend.clients(), backend
    raise SystemExit(f"unknown backend spec {spec!r}")


def cmd_engine_run(args) -> int:
    from .engine import read_image_index, run_pipeline

    images = read_image_index(args.images)
    clients, backend = _backends(args.backends, args.images)
    try:
        summary = run_pipeline(images, clients, args.out, resume=not args.no_resume, workers=args.workers,
                               max_images=args.max_images, include_full_image=args.full_image)
    finally:
        if backend is not None:
            backend.close()
    print(json.dumps(summary.to_json()))
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import REL_TOL, SCENARIOS, run_scenario

    names = [args.module] if args.module else list(SCENARIOS)
    worst_ok = True
    for name in names:
        if name not in SCENARIOS:
            raise SystemExit(f"unknown module {name!r}; choose from {', '.join(SCENARIOS)}")
        errs = [run_scenario(name, s) for s in range(args.seeds)]
        ok = max(errs) < REL_TOL
        worst_ok &= ok
        print(f"{name:<16} max rel err {max(errs):.2e}  {'PASS' if ok else 'FAIL'}")
    return 0 if worst_ok else 1


def cmd_report(args) -> int:
    from .metrics import format_table, read_records, report_document

    doc = report_document(read_records(getattr(args, "from")))
    print(format_table(doc) if args.format == "table" else json.dumps(doc, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unires", description="Toy multi-granularity referring segmentation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train on synthetic (or given) data")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--data", help="annotation JSONL (default: synthetic set from the config)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an annotation file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--records", help="per-sample records JSONL (default next to the report)")
    p.add_argument("--overlays", help="directory for prediction overlay PNGs")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gen-data", help="write a synthetic annotation file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--mix", default="0.4,0.2,0.3,0.1", help="single,multi,part,no-target ratios")
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--engine-dir", help="also write an engine image index here")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("engine-run", help="run the data engine over an image index")
    p.add_argument("--images", required=True, help="directory holding index.jsonl")
    p.add_argument("--backends", default="mock", help="mock[:seed] | mock-process[:seed] | cmd:<command>")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-images", type=int)
    p.add_argument("--no-resume", action="store_true")
    p.add_argument("--full-image", action="store_true", help="add a whole-image caption pair per image")
    p.set_defaults(fn=cmd_engine_run)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--module")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("report", help="aggregate per-sample records")
    p.add_argument("--from", required=True, metavar="RECORDS")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
