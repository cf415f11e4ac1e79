"""File formats: COCO-style annotations, indexed PNG label masks, UACT tensors.

UACT layout (all little-endian)::

    b"UACT"  version:u8 = 1  C:u32  H:u32  W:u32  C*H*W float32 (channel-major, row-major)
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .core import BBox, ClassId, ImageDims, InvalidBoxError, LabelMask, clamp_box

CATEGORY_IDS = {
    "holothurian": ClassId.HOLOTHURIAN,
    "echinus": ClassId.ECHINUS,
    "scallop": ClassId.SCALLOP,
    "starfish": ClassId.STARFISH,
}
CATEGORY_NAMES = {v: k for k, v in CATEGORY_IDS.items()}

PALETTE = {
    0: (0, 0, 0),
    1: (255, 0, 0),
    2: (0, 255, 0),
    3: (255, 255, 0),
    4: (0, 0, 255),
    255: (255, 255, 255),
}

UACT_MAGIC = b"UACT"
UACT_VERSION = 1
_UACT_HEADER = struct.Struct("<4sBIII")

RESOLUTION_EDGES = (720, 1080, 1920)


class DataIOError(ValueError):
    pass


class AnnotationParseError(DataIOError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


class SchemaError(DataIOError):
    pass


class MaskFormatError(DataIOError):
    pass


class TensorFormatError(DataIOError):
    pass


class TensorLengthError(DataIOError):
    pass


def _atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- annotations -------------------------------------------------------------


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    dims: ImageDims

    @property
    def stem(self) -> str:
        return os.path.splitext(os.path.basename(self.file_name))[0]


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    box: BBox
    polygons: tuple = ()  # tuple of flat (x1, y1, x2, y2, ...) tuples


@dataclass
class AnnotationSet:
    images: dict = field(default_factory=dict)  # id -> ImageRecord
    categories: dict = field(default_factory=dict)  # file category id -> ClassId
    annotations: list = field(default_factory=list)

    def boxes_for(self, image_id: int) -> list[BBox]:
        return [a.box for a in self.annotations if a.image_id == image_id]

    def annotations_for(self, image_id: int) -> list[Annotation]:
        return [a for a in self.annotations if a.image_id == image_id]


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    return obj[key]


def annotations_from_dict(doc: dict) -> AnnotationSet:
    if not isinstance(doc, dict):
        raise SchemaError("annotation document must be a JSON object")
    out = AnnotationSet()
    for cat in doc.get("categories", []):
        name = str(_require(cat, "name", "category")).strip().lower()
        if name not in CATEGORY_IDS:
            raise SchemaError(f"unknown category {name!r}; expected one of {sorted(CATEGORY_IDS)}")
        out.categories[int(_require(cat, "id", "category"))] = CATEGORY_IDS[name]
    for img in doc.get("images", []):
        rec = ImageRecord(
            int(_require(img, "id", "image")),
            str(_require(img, "file_name", "image")),
            ImageDims(int(_require(img, "height", "image")), int(_require(img, "width", "image"))),
        )
        if rec.id in out.images:
            raise SchemaError(f"duplicate image id {rec.id}")
        out.images[rec.id] = rec
    for k, ann in enumerate(doc.get("annotations", [])):
        where = f"annotation {ann.get('id', k)}"
        image_id = int(_require(ann, "image_id", where))
        cat_id = int(_require(ann, "category_id", where))
        if image_id not in out.images:
            raise SchemaError(f"{where}: unknown image id {image_id}")
        if cat_id not in out.categories:
            raise SchemaError(f"{where}: unknown category id {cat_id}")
        bbox = _require(ann, "bbox", where)
        if not (isinstance(bbox, list) and len(bbox) == 4):
            raise SchemaError(f"{where}: bbox must be [x, y, w, h]")
        seg = ann.get("segmentation", [])
        if isinstance(seg, dict):
            raise SchemaError(f"{where}: RLE segmentations are not supported")
        polys = tuple(tuple(float(v) for v in p) for p in seg)
        try:
            box = BBox(*(float(v) for v in bbox), class_id=out.categories[cat_id])
            box = clamp_box(box, out.images[image_id].dims)
        except InvalidBoxError as e:
            raise SchemaError(f"{where}: {e}") from e
        out.annotations.append(Annotation(int(ann.get("id", k + 1)), image_id, box, polys))
    return out


def parse_annotations(path: str) -> AnnotationSet:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise AnnotationParseError("annotation file is not UTF-8", e.start) from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise AnnotationParseError(e.msg, len(text[: e.pos].encode("utf-8"))) from e
    return annotations_from_dict(doc)


def annotations_to_dict(anns: AnnotationSet) -> dict:
    def num(v: float):
        return int(v) if float(v).is_integer() else v

    return {
        "images": [
            {"id": r.id, "file_name": r.file_name, "height": r.dims.height, "width": r.dims.width}
            for r in anns.images.values()
        ],
        "categories": [{"id": cid, "name": CATEGORY_NAMES[c]} for cid, c in anns.categories.items()],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "category_id": next(cid for cid, c in anns.categories.items() if c == a.box.class_id),
                "bbox": [num(a.box.x), num(a.box.y), num(a.box.w), num(a.box.h)],
                "segmentation": [[num(v) for v in p] for p in a.polygons],
            }
            for a in anns.annotations
        ],
    }


def write_annotations(anns: AnnotationSet, path: str) -> None:
    _atomic_write(path, json.dumps(annotations_to_dict(anns), indent=1).encode("utf-8"))


# --- polygons ----------------------------------------------------------------


def rasterize_polygons(
    polys: Sequence[tuple[ClassId, Sequence[float]]],
    dims: ImageDims,
) -> tuple[LabelMask, list[str]]:
    """Even-odd fill at pixel centres; later polygons overwrite earlier ones.

    ``polys`` holds ``(class_id, [x1, y1, x2, y2, ...])`` entries. Polygons with
    fewer than three vertices or zero area are skipped and reported.
    """
    out = np.zeros(dims.shape, dtype=np.uint8)
    skipped = []
    xs = np.arange(dims.width) + 0.5
    for k, (cls, flat) in enumerate(polys):
        if len(flat) % 2:
            skipped.append(f"polygon {k}: odd number of coordinates")
            continue
        pts = np.asarray(flat, dtype=np.float64).reshape(-1, 2)
        area2 = np.dot(pts[:, 0], np.roll(pts[:, 1], -1)) - np.dot(pts[:, 1], np.roll(pts[:, 0], -1))
        if len(pts) < 3 or area2 == 0:
            skipped.append(f"polygon {k}: degenerate ({len(pts)} vertices)")
            continue
        xi, yi = pts[:, 0], pts[:, 1]
        xj, yj = np.roll(xi, 1), np.roll(yi, 1)
        for r in range(dims.height):
            y = r + 0.5
            crosses = (yi > y) != (yj > y)
            if not crosses.any():
                continue
            x_int = (xj[crosses] - xi[crosses]) * (y - yi[crosses]) / (yj[crosses] - yi[crosses]) + xi[crosses]
            inside = ((xs[:, None] < x_int[None, :]).sum(axis=1) % 2) == 1
            out[r, inside] = int(ClassId(cls))
    return LabelMask(dims, out), skipped


def mask_from_annotations(anns: AnnotationSet, image_id: int) -> tuple[LabelMask, list[str]]:
    rec = anns.images[image_id]
    polys = [(a.box.class_id, p) for a in anns.annotations_for(image_id) for p in a.polygons]
    return rasterize_polygons(polys, rec.dims)


# --- masks -------------------------------------------------------------------


def _palette_bytes() -> list[int]:
    pal = [0] * 768
    for idx, rgb in PALETTE.items():
        pal[3 * idx : 3 * idx + 3] = rgb
    return pal


def encode_mask(mask: LabelMask) -> bytes:
    h, w = mask.dims.shape
    img = Image.frombytes("P", (w, h), np.ascontiguousarray(mask.values, dtype=np.uint8).tobytes())
    img.putpalette(_palette_bytes())
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def write_mask(mask: LabelMask, path: str) -> None:
    _atomic_write(path, encode_mask(mask))


def read_mask(path: str) -> LabelMask:
    with Image.open(path) as img:
        if img.format != "PNG":
            raise MaskFormatError(f"{path}: expected PNG, got {img.format}")
        if img.mode != "P":
            raise MaskFormatError(f"{path}: expected 8-bit indexed PNG, got mode {img.mode}")
        values = np.array(img, dtype=np.uint8)
    try:
        return LabelMask.from_array(values)
    except ValueError as e:
        raise MaskFormatError(f"{path}: {e}") from e


def read_image(path: str) -> np.ndarray:
    """Intensity grid for the CRF: (H, W) for greyscale, (H, W, 3) otherwise."""
    with Image.open(path) as img:
        if img.mode in ("L", "I", "I;16", "F"):
            return np.asarray(img, dtype=np.float64)
        return np.asarray(img.convert("RGB"), dtype=np.float64)


# --- UACT tensors ------------------------------------------------------------


def encode_tensor(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.float32)
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3:
        raise TensorFormatError(f"tensor must be (H, W) or (C, H, W), got shape {v.shape}")
    c, h, w = v.shape
    return _UACT_HEADER.pack(UACT_MAGIC, UACT_VERSION, c, h, w) + v.astype("<f4").tobytes(order="C")


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < _UACT_HEADER.size:
        if data[:4] != UACT_MAGIC[: len(data[:4])]:
            raise TensorFormatError(f"bad magic {data[:4]!r}")
        raise TensorLengthError(f"header truncated: {len(data)} of {_UACT_HEADER.size} bytes")
    magic, version, c, h, w = _UACT_HEADER.unpack_from(data)
    if magic != UACT_MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != UACT_VERSION:
        raise TensorFormatError(f"unsupported UACT version {version}")
    need = 4 * c * h * w
    payload = data[_UACT_HEADER.size :]
    if len(payload) != need:
        raise TensorLengthError(f"payload is {len(payload)} bytes, header announces {need}")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float32)


def write_tensor(values: np.ndarray, path: str) -> None:
    _atomic_write(path, encode_tensor(values))


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())


# --- dataset statistics --------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    train_masked: frozenset
    train_box_only: frozenset
    test: frozenset

    def __post_init__(self):
        for name in ("train_masked", "train_box_only", "test"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        a, b, c = self.train_masked, self.train_box_only, self.test
        if a & b or a & c or b & c:
            raise ValueError("dataset split parts must be pairwise disjoint")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train_masked), len(self.train_box_only), len(self.test))


@dataclass
class DatasetStats:
    edges: tuple
    resolution_counts: dict  # bucket label -> image count
    class_counts: dict  # ClassId -> instance count

    def to_text(self) -> str:
        lines = ["image widths:"]
        lines += [f"  {k:<8} {v}" for k, v in self.resolution_counts.items()]
        lines.append("instances per class:")
        lines += [f"  {CATEGORY_NAMES[c]:<12} {n}" for c, n in self.class_counts.items()]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "key", "count"])
        for k, v in self.resolution_counts.items():
            w.writerow(["width", k, v])
        for c, n in self.class_counts.items():
            w.writerow(["class", CATEGORY_NAMES[c], n])
        return buf.getvalue()


def _bucket_labels(edges: Sequence[int]) -> list[str]:
    return [f"<={e}" for e in edges] + [f">{edges[-1]}"]


def dataset_stats(anns: AnnotationSet, edges: Sequence[int] = RESOLUTION_EDGES) -> DatasetStats:
    edges = tuple(sorted(int(e) for e in edges))
    labels = _bucket_labels(edges)
    res = {k: 0 for k in labels}
    for rec in anns.images.values():
        idx = int(np.searchsorted(edges, rec.dims.width, side="left"))
        res[labels[idx]] += 1
    counts = {c: 0 for c in CATEGORY_NAMES}
    for a in anns.annotations:
        counts[a.box.class_id] += 1
    return DatasetStats(edges, res, counts)


def list_stems(directory: str, suffix: str) -> list[str]:
    return sorted(f[: -len(suffix)] for f in os.listdir(directory) if f.endswith(suffix))


def ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


def iter_images(anns: AnnotationSet) -> Iterable[ImageRecord]:
    return (anns.images[k] for k in sorted(anns.images))
