"""Command line front end.

Exit codes: 0 success, 1 partial failure, 2 input or parse error.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence

import numpy as np

from . import dataio, evaluation, pipeline
from .affinity import gradient_check
from .config import ConfigError, RunConfig, load_config
from .core import BoundaryMap

EXIT_OK, EXIT_PARTIAL, EXIT_INPUT = 0, 1, 2
MANIFEST = "manifest.json"
TIMINGS = "timings.json"


def _run_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["fit_seed"] = args.seed
    if getattr(args, "no_cam", False):
        overrides["use_cam"] = False
    return load_config(args.config, overrides)


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _timed(fn: Callable) -> Callable:
    def run(item):
        t0 = time.perf_counter()
        try:
            status = fn(item)
        except Exception as e:  # per-image failures are recorded, not fatal
            status = {"status": "error", "error": f"{type(e).__name__}: {e}"}
        return status, time.perf_counter() - t0

    return run


def _write_manifest(out_dir: str, command: str, cfg: RunConfig, inputs: dict, records: list, timings: list) -> None:
    manifest = {
        "command": command,
        "config": cfg.flat(),
        "seed": cfg.fit.seed,
        "inputs": inputs,
        "images": records,
    }
    dataio._atomic_write(
        os.path.join(out_dir, MANIFEST), (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()
    )
    # wall-clock data lives beside the manifest so the manifest itself stays reproducible
    dataio._atomic_write(
        os.path.join(out_dir, TIMINGS), (json.dumps(timings, indent=1) + "\n").encode()
    )


def _finish(out_dir, command, cfg, inputs, items, results, names) -> int:
    records, timings = [], []
    for name, (status, dt) in zip(names, results):
        records.append({"name": name, **status})
        timings.append({"name": name, "seconds": round(dt, 6)})
    _write_manifest(out_dir, command, cfg, inputs, records, timings)
    failed = [r for r in records if r["status"] == "error"]
    for r in failed:
        print(f"error: {r['name']}: {r['error']}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def _load_annotations(path: str):
    try:
        return dataio.parse_annotations(path)
    except (OSError, dataio.DataIOError) as e:
        print(f"error: {path}: {e}", file=sys.stderr)
        return None


# --- commands ----------------------------------------------------------------


def cmd_stats(args) -> int:
    anns = _load_annotations(args.ann)
    if anns is None:
        return EXIT_INPUT
    stats = dataio.dataset_stats(anns)
    sys.stdout.write(stats.to_csv() if args.csv else stats.to_text())
    return EXIT_OK


def cmd_gen_pseudo(args) -> int:
    cfg = _run_config(args)
    anns = _load_annotations(args.ann)
    if anns is None:
        return EXIT_INPUT
    dataio.ensure_dir(args.out)
    recs = [r for r in dataio.iter_images(anns) if anns.boxes_for(r.id)]

    def work(rec):
        tensors = []
        if args.cams and cfg.use_cam:
            paths = sorted(glob.glob(os.path.join(args.cams, rec.stem + ".uact")))
            paths += sorted(glob.glob(os.path.join(args.cams, rec.stem + "@*.uact")))
            tensors = [dataio.read_tensor(p) for p in paths]
        cams = pipeline.cams_from_tensors(tensors, rec.dims)
        mask = pipeline.pseudo_label(anns.boxes_for(rec.id), rec.dims, cams, cfg)
        out = rec.stem + ".png"
        dataio.write_mask(mask, os.path.join(args.out, out))
        return {"status": "ok", "output": out, "cam_scales": len(tensors)}

    results = _map(_timed(work), recs, args.workers)
    inputs = {"annotations": args.ann, "cams": args.cams}
    return _finish(args.out, "gen-pseudo", cfg, inputs, recs, results, [r.stem for r in recs])


def cmd_fit_boundary(args) -> int:
    cfg = _run_config(args)
    if not os.path.isdir(args.masks):
        print(f"error: mask directory {args.masks} not found", file=sys.stderr)
        return EXIT_INPUT
    dataio.ensure_dir(args.out)
    stems = dataio.list_stems(args.masks, ".png")

    def work(stem):
        mask = dataio.read_mask(os.path.join(args.masks, stem + ".png"))
        if not pipeline.has_two_classes(mask):
            return {"status": "skipped", "warning": "fewer than two labelled classes, no different-class pairs"}
        b = pipeline.fit_boundary(mask, cfg)
        out = stem + ".uact"
        dataio.write_tensor(b.values, os.path.join(args.out, out))
        return {"status": "ok", "output": out}

    results = _map(_timed(work), stems, args.workers)
    for stem, (status, _) in zip(stems, results):
        if status["status"] == "skipped":
            print(f"warning: {stem}: {status['warning']}", file=sys.stderr)
    return _finish(args.out, "fit-boundary", cfg, {"masks": args.masks}, stems, results, stems)


def cmd_segment(args) -> int:
    cfg = _run_config(args)
    anns = _load_annotations(args.ann)
    if anns is None:
        return EXIT_INPUT
    dataio.ensure_dir(args.out)
    recs = list(dataio.iter_images(anns))
    needs_image = cfg.pipeline.crf.n_iters > 0 and (
        cfg.pipeline.crf.w_smooth > 0 or cfg.pipeline.crf.w_appearance > 0
    )

    def work(rec):
        bpath = os.path.join(args.boundaries, rec.stem + ".uact")
        if not os.path.exists(bpath):
            raise FileNotFoundError(f"no boundary tensor {bpath}")
        t = dataio.read_tensor(bpath)
        boundary = BoundaryMap.from_array(np.clip(t[0].astype(np.float64), 0.0, 1.0))
        image = None
        if needs_image:
            image = dataio.read_image(os.path.join(args.images, rec.file_name))
        mask = pipeline.segment_image(anns.boxes_for(rec.id), boundary, image, cfg, force_large=args.force_large)
        out = rec.stem + ".png"
        dataio.write_mask(mask, os.path.join(args.out, out))
        return {"status": "ok", "output": out}

    results = _map(_timed(work), recs, args.workers)
    inputs = {"annotations": args.ann, "boundaries": args.boundaries, "images": args.images}
    return _finish(args.out, "segment", cfg, inputs, recs, results, [r.stem for r in recs])


def cmd_eval(args) -> int:
    if args.ann and _load_annotations(args.ann) is None:
        return EXIT_INPUT
    res = evaluation.evaluate_dataset(args.pred, args.gt, args.ann, box_fill=args.box_fill, method=args.method)
    sys.stdout.write(res.table)
    if res.report is not None:
        sys.stdout.write("\n" + evaluation.format_report(res.report))
        if args.csv:
            dataio._atomic_write(args.csv, evaluation.report_csv(res.report).encode())
    for e in res.errors:
        print(f"error: {e}", file=sys.stderr)
    if res.errors:
        return EXIT_PARTIAL
    return EXIT_OK if res.report is not None else EXIT_INPUT


def cmd_gradcheck(args) -> int:
    if not 1 <= args.size <= 64:
        print(f"error: --size must lie in [1, 64], got {args.size}", file=sys.stderr)
        return EXIT_INPUT
    try:
        err = gradient_check(seed=args.seed, size=args.size)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    ok = err < 1e-4
    print(f"max relative error {err:.3e} ({'pass' if ok else 'FAIL'})")
    return EXIT_OK if ok else EXIT_PARTIAL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boxseg", description="Box-supervised segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", default=None, help="flat key = value config file")
        sp.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("stats", help="resolution and per-class instance counts")
    sp.add_argument("ann")
    sp.add_argument("--csv", action="store_true")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("gen-pseudo", help="pseudo-label masks from boxes (and CAMs)")
    sp.add_argument("ann")
    sp.add_argument("out")
    sp.add_argument("--cams", default=None, help="directory of <stem>.uact / <stem>@<scale>.uact CAM tensors")
    sp.add_argument("--no-cam", action="store_true", help="ignore CAMs even when given")
    common(sp)
    sp.set_defaults(func=cmd_gen_pseudo)

    sp = sub.add_parser("fit-boundary", help="fit a boundary map to each label mask")
    sp.add_argument("masks")
    sp.add_argument("out")
    common(sp)
    sp.set_defaults(func=cmd_fit_boundary)

    sp = sub.add_parser("segment", help="boxes + boundary maps -> final masks")
    sp.add_argument("ann")
    sp.add_argument("boundaries")
    sp.add_argument("images")
    sp.add_argument("out")
    sp.add_argument("--force-large", action="store_true", help="allow exact CRF on images above 256x256")
    common(sp)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("eval", help="per-class IoU and mIoU table")
    sp.add_argument("pred")
    sp.add_argument("gt")
    sp.add_argument("ann", nargs="?", default=None)
    sp.add_argument("--box-fill", action="store_true", help="fill boxes with no prediction of their class")
    sp.add_argument("--csv", default=None, help="also write class,iou CSV here")
    sp.add_argument("--method", default="ours", help="row label in the table")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference audit of the boundary loss gradient")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=16)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
