"""Confusion counts, per-class IoU / mIoU, box-fill fallback and result tables."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import SCORED_CLASSES, BBox, ClassId, LabelMask, ShapeError

CLASS_NAMES = {
    ClassId.BACKGROUND: "background",
    ClassId.HOLOTHURIAN: "holothurian",
    ClassId.ECHINUS: "echinus",
    ClassId.SCALLOP: "scallop",
    ClassId.STARFISH: "starfish",
}
# comparison-table columns: the four object classes, then the mean including background
TABLE_COLUMNS = ("holothurian", "echinus", "scallop", "starfish", "mean (incl. bg)")

N_SCORED = len(SCORED_CLASSES)


class EmptyReportError(ValueError):
    pass


@dataclass
class ConfusionCounts:
    """Pixel counts, rows = ground truth class, columns = predicted class (ids 0..4)."""

    matrix: np.ndarray = field(default_factory=lambda: np.zeros((N_SCORED, N_SCORED), dtype=np.int64))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.matrix + other.matrix)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def cell(self, gt: int, pred: int) -> int:
        return int(self.matrix[int(gt), int(pred)])


def confusion(pred: LabelMask, gt: LabelMask) -> ConfusionCounts:
    if pred.dims != gt.dims:
        raise ShapeError(f"prediction dims {pred.dims} != ground truth dims {gt.dims}")
    g = gt.values.ravel().astype(np.int64)
    p = pred.values.ravel().astype(np.int64)
    keep = g != int(ClassId.IGNORE)
    g, p = g[keep], p[keep]
    p = np.where(p == int(ClassId.IGNORE), int(ClassId.BACKGROUND), p)
    m = np.bincount(g * N_SCORED + p, minlength=N_SCORED * N_SCORED).reshape(N_SCORED, N_SCORED)
    return ConfusionCounts(m.astype(np.int64))


@dataclass
class IouReport:
    per_class: dict  # ClassId -> IoU percentage, present classes only
    miou: float
    counts: ConfusionCounts

    def row(self) -> tuple[Optional[float], ...]:
        objs = tuple(self.per_class.get(c) for c in SCORED_CLASSES[1:])
        return objs + (self.miou,)


def miou(counts: ConfusionCounts, classes: Sequence[ClassId] = SCORED_CLASSES) -> IouReport:
    """Per-class IoU in percent; classes absent from both prediction and ground truth
    are left out of the mean."""
    m = counts.matrix
    per_class = {}
    for c in classes:
        c = ClassId(c)
        tp = m[c, c]
        union = m[c, :].sum() + m[:, c].sum() - tp
        if union == 0:
            continue
        per_class[c] = 100.0 * float(tp) / float(union)
    if not per_class:
        raise EmptyReportError("no class occurs in prediction or ground truth")
    return IouReport(per_class, float(np.mean(list(per_class.values()))), counts)


def box_fill_fallback(pred: LabelMask, boxes: Sequence[BBox]) -> LabelMask:
    """Fill each box with its class when the prediction has none of that class inside.

    Boxes are visited in ascending area; pixels already filled by a smaller box
    are not overwritten, so small objects win overlaps. Predicted pixels that
    already satisfy some box are kept as well. Emptiness is judged on the
    original prediction.
    """
    src = pred.values
    out = src.copy()
    claimed = np.zeros(src.shape, dtype=bool)
    empty = []
    for b in sorted(boxes, key=lambda b: b.area):
        sl = b.pixel_slices(pred.dims)
        hit = src[sl] == int(b.class_id)
        if hit.any():
            claimed[sl] |= hit
        else:
            empty.append(b)
    for b in empty:
        sl = b.pixel_slices(pred.dims)
        free = ~claimed[sl]
        out[sl][free] = int(b.class_id)
        claimed[sl] = True
    return LabelMask(pred.dims, out)


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{v:.1f}"


def render_comparison_table(rows: Mapping[str, Sequence[Optional[float]]], header: bool = True) -> str:
    """Tab-separated table: method, four class IoUs, mean including background."""
    lines = []
    if header:
        lines.append("\t" + "\t".join(TABLE_COLUMNS))
    for name, vals in rows.items():
        if len(vals) != len(TABLE_COLUMNS):
            raise ValueError(f"row {name!r} needs {len(TABLE_COLUMNS)} values, got {len(vals)}")
        lines.append(name + "\t" + "\t".join(_fmt(v) for v in vals))
    return "\n".join(lines) + "\n"


def render_ablation_table(rows: Mapping[str, float], header: bool = True) -> str:
    lines = ["method\tmIOU"] if header else []
    lines += [f"{name}\t{_fmt(v)}" for name, v in rows.items()]
    return "\n".join(lines) + "\n"


def format_report(report: IouReport) -> str:
    """Aligned plain-text report, one class per line."""
    width = max(len(n) for n in CLASS_NAMES.values())
    out = []
    for c in SCORED_CLASSES:
        out.append(f"{CLASS_NAMES[c]:<{width}}  {_fmt(report.per_class.get(c)):>6}")
    out.append(f"{'miou':<{width}}  {_fmt(report.miou):>6}")
    return "\n".join(out) + "\n"


def report_csv(report: IouReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "iou"])
    for c in SCORED_CLASSES:
        v = report.per_class.get(c)
        w.writerow([CLASS_NAMES[c], "" if v is None else f"{v:.4f}"])
    w.writerow(["miou", f"{report.miou:.4f}"])
    return buf.getvalue()


@dataclass
class DatasetEvaluation:
    report: Optional[IouReport]
    table: str
    errors: list
    n_images: int


def evaluate_dataset(
    pred_dir: str,
    gt_dir: str,
    ann_path: Optional[str] = None,
    box_fill: bool = False,
    method: str = "ours",
) -> DatasetEvaluation:
    """Score every ground-truth mask against the prediction of the same file name.

    With an annotation file the image list comes from it (mask = image stem +
    ``.png``) and its boxes drive the optional box-fill fallback; otherwise all
    PNGs in ``gt_dir`` are used. Missing or unreadable files are collected in
    ``errors`` and skipped.
    """
    from .dataio import parse_annotations, read_mask

    boxes_by_stem: dict[str, list] = {}
    if ann_path is not None:
        anns = parse_annotations(ann_path)
        for img in anns.images.values():
            stem = os.path.splitext(os.path.basename(img.file_name))[0]
            boxes_by_stem[stem] = anns.boxes_for(img.id)
        stems = sorted(boxes_by_stem)
    else:
        stems = sorted(os.path.splitext(f)[0] for f in os.listdir(gt_dir) if f.endswith(".png"))

    total = ConfusionCounts()
    errors = []
    n = 0
    for stem in stems:
        try:
            gt = read_mask(os.path.join(gt_dir, stem + ".png"))
            pred = read_mask(os.path.join(pred_dir, stem + ".png"))
            if box_fill and boxes_by_stem.get(stem):
                pred = box_fill_fallback(pred, boxes_by_stem[stem])
            total = total + confusion(pred, gt)
            n += 1
        except (OSError, ValueError) as e:
            errors.append(f"{stem}: {e}")
    try:
        report = miou(total)
        table = render_comparison_table({method: report.row()})
    except EmptyReportError as e:
        report = None
        table = f"no scorable pixels ({e})\n"
    return DatasetEvaluation(report, table, errors, n)


def aggregate(pairs: Iterable[tuple[LabelMask, LabelMask]]) -> ConfusionCounts:
    total = ConfusionCounts()
    for pred, gt in pairs:
        total = total + confusion(pred, gt)
    return total
