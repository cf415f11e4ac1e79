"""Small deterministic synthetic dataset for end-to-end runs and tests.

Each image is greyscale with one or two elliptical objects on a noisy
background. The generator writes::

    <root>/annotations.json   COCO-style boxes + polygons
    <root>/images/<stem>.png  8-bit greyscale
    <root>/gt/<stem>.png      indexed label masks
    <root>/cams/<stem>.uact   4-channel CAM tensors at half resolution (even ids only)
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .core import OBJECT_CLASSES, ImageDims
from .dataio import CATEGORY_NAMES, encode_tensor, rasterize_polygons, write_mask

N_VERTICES = 24
INTENSITY = np.zeros(256)
INTENSITY[:5] = (60.0, 110.0, 150.0, 190.0, 230.0)


def _ellipse_polygon(cx, cy, rx, ry):
    t = np.linspace(0, 2 * np.pi, N_VERTICES, endpoint=False)
    xs = np.round(cx + rx * np.cos(t), 2)
    ys = np.round(cy + ry * np.sin(t), 2)
    return [float(v) for xy in zip(xs, ys) for v in xy]


def make_dataset(root: str, n_images: int = 8, size: int = 32, seed: int = 0) -> None:
    rng = np.random.default_rng(seed)
    dims = ImageDims(size, size)
    for sub in ("images", "gt", "cams"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    doc = {
        "images": [],
        "categories": [{"id": int(c), "name": CATEGORY_NAMES[c]} for c in OBJECT_CLASSES],
        "annotations": [],
    }
    ann_id = 1
    for img_id in range(1, n_images + 1):
        stem = f"img{img_id:03d}"
        doc["images"].append({"id": img_id, "file_name": f"{stem}.png", "height": size, "width": size})
        n_obj = 1 + (img_id % 2)
        polys = []
        for k in range(n_obj):
            cls = OBJECT_CLASSES[(ann_id - 1) % len(OBJECT_CLASSES)]
            # objects sit in the left or right half so two objects never overlap
            half = k if n_obj == 2 else int(rng.integers(0, 2))
            cx = size * (0.25 + 0.5 * half) + rng.uniform(-1.5, 1.5)
            cy = size * 0.5 + rng.uniform(-4, 4)
            rx, ry = rng.uniform(3.5, 6.5), rng.uniform(4, 8)
            poly = _ellipse_polygon(cx, cy, rx, ry)
            xs, ys = poly[0::2], poly[1::2]
            x0, y0 = np.floor(min(xs)), np.floor(min(ys))
            x1, y1 = np.ceil(max(xs)), np.ceil(max(ys))
            bbox = [float(x0), float(y0), float(x1 - x0), float(y1 - y0)]
            doc["annotations"].append(
                {"id": ann_id, "image_id": img_id, "category_id": int(cls), "bbox": bbox, "segmentation": [poly]}
            )
            ann_id += 1
            polys.append((cls, poly))
        gt, _ = rasterize_polygons(polys, dims)
        write_mask(gt, os.path.join(root, "gt", f"{stem}.png"))

        # each class has its own mean intensity so the CRF appearance kernel can separate them
        img = INTENSITY[gt.values] + rng.normal(0, 8, size=dims.shape)
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(os.path.join(root, "images", f"{stem}.png"))

        if img_id % 2 == 0:
            cam = np.zeros((len(OBJECT_CLASSES), size // 2, size // 2), dtype=np.float32)
            small = gt.values[::2, ::2]
            for k, cls in enumerate(OBJECT_CLASSES):
                hit = small == int(cls)
                if hit.any():
                    cam[k] = hit * rng.uniform(0.6, 1.0, size=hit.shape)
            with open(os.path.join(root, "cams", f"{stem}.uact"), "wb") as f:
                f.write(encode_tensor(cam))
    with open(os.path.join(root, "annotations.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
