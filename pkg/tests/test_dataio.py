import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from boxseg.core import ClassId, ImageDims, LabelMask
from boxseg.dataio import (
    PALETTE,
    AnnotationParseError,
    DatasetSplit,
    MaskFormatError,
    SchemaError,
    TensorFormatError,
    TensorLengthError,
    annotations_from_dict,
    annotations_to_dict,
    dataset_stats,
    decode_tensor,
    encode_tensor,
    mask_from_annotations,
    parse_annotations,
    rasterize_polygons,
    read_image,
    read_mask,
    read_tensor,
    write_annotations,
    write_mask,
    write_tensor,
)

from oracles import point_in_polygon

CATS = [{"id": 1, "name": "holothurian"}, {"id": 2, "name": "echinus"},
        {"id": 3, "name": "scallop"}, {"id": 4, "name": "starfish"}]


def doc(anns, images=None, cats=CATS):
    return {
        "images": images if images is not None else [{"id": 1, "file_name": "a.jpg", "height": 20, "width": 30}],
        "categories": cats,
        "annotations": anns,
    }


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


# --- annotations --------------------------------------------------------------


def test_parse_minimal(tmp_path):
    anns = parse_annotations(write_json(tmp_path / "a.json", doc(
        [{"id": 7, "image_id": 1, "category_id": 2, "bbox": [1, 2, 3, 4]}])))
    assert anns.images[1].dims == ImageDims(20, 30)
    (box,) = anns.boxes_for(1)
    assert (box.x, box.y, box.w, box.h, box.class_id) == (1, 2, 3, 4, ClassId.ECHINUS)


def test_category_names_map_to_ids():
    anns = annotations_from_dict(doc([], cats=[{"id": 9, "name": "Echinus"}]))
    assert anns.categories == {9: ClassId.ECHINUS}


def test_unknown_category_rejected():
    with pytest.raises(SchemaError, match="fish"):
        annotations_from_dict(doc([], cats=[{"id": 1, "name": "fish"}]))


def test_rle_rejected():
    with pytest.raises(SchemaError, match="RLE"):
        annotations_from_dict(doc([{"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 2, 2],
                                    "segmentation": {"counts": [1, 2], "size": [20, 30]}}]))


@pytest.mark.parametrize("ann", [
    {"id": 1, "image_id": 5, "category_id": 1, "bbox": [0, 0, 2, 2]},
    {"id": 1, "image_id": 1, "category_id": 8, "bbox": [0, 0, 2, 2]},
    {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, 2]},
    {"id": 1, "image_id": 1, "category_id": 1, "bbox": [40, 40, 2, 2]},
    {"id": 1, "image_id": 1, "category_id": 1},
])
def test_bad_annotations(ann):
    with pytest.raises(SchemaError):
        annotations_from_dict(doc([ann]))


def test_boxes_are_clamped():
    anns = annotations_from_dict(doc([{"id": 1, "image_id": 1, "category_id": 1, "bbox": [25, -3, 10, 8]}]))
    b = anns.boxes_for(1)[0]
    assert (b.x, b.y, b.w, b.h) == (25, 0, 5, 5)


def test_parse_error_reports_byte_offset(tmp_path):
    text = '{"images": [], "categories": [{"name": "échinus"}], oops}'
    p = tmp_path / "bad.json"
    p.write_bytes(text.encode("utf-8"))
    with pytest.raises(AnnotationParseError) as e:
        parse_annotations(str(p))
    # the bad token sits after one 2-byte character
    assert e.value.offset == text.index("oops") + 1
    p.write_bytes(b'{"a": "\xff"}')
    with pytest.raises(AnnotationParseError) as e:
        parse_annotations(str(p))
    assert e.value.offset == 7


def test_round_trip_fixed_point(tmp_path):
    original = doc(
        [
            {"id": 3, "image_id": 1, "category_id": 4, "bbox": [1.5, 2, 3, 4.25],
             "segmentation": [[1.5, 2, 4.5, 2, 4.5, 6.25]]},
            {"id": 4, "image_id": 2, "category_id": 1, "bbox": [0, 0, 5, 5], "segmentation": []},
        ],
        images=[{"id": 1, "file_name": "a.jpg", "height": 20, "width": 30},
                {"id": 2, "file_name": "b.jpg", "height": 8, "width": 8}],
    )
    first = annotations_from_dict(original)
    once = annotations_to_dict(first)
    write_annotations(first, str(tmp_path / "x.json"))
    again = annotations_to_dict(parse_annotations(str(tmp_path / "x.json")))
    assert once == again
    assert once["annotations"][0]["bbox"] == [1.5, 2, 3, 4.25]


# --- polygons -----------------------------------------------------------------


def _oracle(polys, h, w):
    out = np.zeros((h, w), dtype=np.uint8)
    for cls, flat in polys:
        pts = list(zip(flat[0::2], flat[1::2]))
        for r in range(h):
            for c in range(w):
                if point_in_polygon(c + 0.5, r + 0.5, pts):
                    out[r, c] = cls
    return out


def test_rasterize_square_and_empty():
    m, skipped = rasterize_polygons([(2, [1, 1, 4, 1, 4, 3, 1, 3])], ImageDims(5, 6))
    expected = np.zeros((5, 6), dtype=np.uint8)
    expected[1:3, 1:4] = 2
    np.testing.assert_array_equal(m.values, expected)
    assert skipped == []
    assert (rasterize_polygons([], ImageDims(3, 3))[0].values == 0).all()


def test_rasterize_triangle_matches_oracle():
    poly = [(1, [0, 0, 4, 0, 0, 4])]
    m, _ = rasterize_polygons(poly, ImageDims(5, 5))
    expected = _oracle(poly, 5, 5)
    assert expected.sum() == 6  # centres with x + y < 4, i.e. r + c < 3
    np.testing.assert_array_equal(m.values, expected)


def test_rasterize_degenerate_and_overlap():
    polys = [(1, [0, 0, 6, 0, 6, 6, 0, 6]), (3, [1, 1, 5, 1]), (3, [0, 0, 2, 2, 4, 4]),
             (2, [2, 2, 4, 2, 4, 4, 2, 4]), (4, [1, 2, 3])]
    m, skipped = rasterize_polygons(polys, ImageDims(6, 6))
    assert len(skipped) == 3
    assert (m.values[2:4, 2:4] == 2).all() and m.values[0, 0] == 1


@given(st.integers(0, 100_000), st.integers(3, 8), st.integers(1, 16), st.integers(1, 16))
@settings(max_examples=60, deadline=None)
def test_rasterize_random_polygons(seed, n, h, w):
    rng = np.random.default_rng(seed)
    # quarter-pixel vertices exercise edges passing exactly through centres
    pts = np.round(rng.uniform(-1, max(h, w) + 1, size=2 * n) * 4) / 4
    polys = [(int(rng.integers(1, 5)), pts.tolist())]
    m, skipped = rasterize_polygons(polys, ImageDims(h, w))
    if skipped:
        return
    np.testing.assert_array_equal(m.values, _oracle(polys, h, w))


def test_mask_from_annotations():
    anns = annotations_from_dict(doc([{"id": 1, "image_id": 1, "category_id": 3, "bbox": [0, 0, 4, 4],
                                       "segmentation": [[0, 0, 4, 0, 4, 4, 0, 4]]}]))
    m, _ = mask_from_annotations(anns, 1)
    assert m.values.shape == (20, 30) and (m.values == 3).sum() == 16


# --- masks --------------------------------------------------------------------

MASK_VALUES = [0, 1, 2, 3, 4, 255]


@given(st.integers(1, 24), st.integers(1, 24), st.integers(0, 100_000))
@settings(max_examples=100, deadline=None)
def test_mask_round_trip(tmp_path_factory, h, w, seed):
    rng = np.random.default_rng(seed)
    m = LabelMask.from_array(rng.choice(MASK_VALUES, size=(h, w)).astype(np.uint8))
    path = str(tmp_path_factory.mktemp("m") / "m.png")
    write_mask(m, path)
    assert read_mask(path) == m


def test_mask_palette_and_ignore(tmp_path):
    write_mask(LabelMask.filled(ImageDims(3, 4), 255), str(tmp_path / "i.png"))
    with Image.open(tmp_path / "i.png") as img:
        assert img.mode == "P"
        assert (np.array(img) == 255).all()
    m = LabelMask.from_array(np.array([MASK_VALUES], dtype=np.uint8))
    write_mask(m, str(tmp_path / "p.png"))
    with Image.open(tmp_path / "p.png") as img:
        pal = img.getpalette()
        for idx, rgb in PALETTE.items():
            assert tuple(pal[3 * idx: 3 * idx + 3]) == rgb
    assert read_mask(str(tmp_path / "p.png")) == m


def test_mask_rejects_non_indexed(tmp_path):
    Image.fromarray(np.zeros((3, 3), np.uint8)).save(tmp_path / "g.png")
    with pytest.raises(MaskFormatError):
        read_mask(str(tmp_path / "g.png"))
    Image.fromarray(np.zeros((3, 3, 3), np.uint8)).save(tmp_path / "rgb.png")
    with pytest.raises(MaskFormatError):
        read_mask(str(tmp_path / "rgb.png"))


def test_mask_rejects_unknown_index(tmp_path):
    img = Image.frombytes("P", (2, 1), bytes([0, 7]))
    img.putpalette(list(range(256)) * 3)  # without a palette Pillow compacts the indices
    img.save(tmp_path / "x.png")
    with pytest.raises(MaskFormatError):
        read_mask(str(tmp_path / "x.png"))


def test_read_image_modes(tmp_path):
    Image.fromarray(np.full((2, 3), 9, np.uint8)).save(tmp_path / "g.png")
    Image.fromarray(np.full((2, 3, 3), 9, np.uint8)).save(tmp_path / "c.png")
    assert read_image(str(tmp_path / "g.png")).shape == (2, 3)
    assert read_image(str(tmp_path / "c.png")).shape == (2, 3, 3)


# --- tensors ------------------------------------------------------------------


def test_tensor_minimal_layout():
    data = encode_tensor(np.ones((1, 1, 1)))
    assert len(data) == 21
    assert data[:5] == b"UACT\x01"
    assert struct.unpack("<III", data[5:17]) == (1, 1, 1)
    assert struct.unpack("<f", data[17:]) == (1.0,)


def test_tensor_channel_major_order():
    v = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
    data = encode_tensor(v)
    assert struct.unpack("<12f", data[17:]) == tuple(range(12))
    assert encode_tensor(v[0]) == encode_tensor(v[:1])


@given(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9), st.integers(0, 100_000))
@settings(max_examples=100, deadline=None)
def test_tensor_round_trip(c, h, w, seed):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2**32, size=(c, h, w), dtype=np.uint64).astype(np.uint32)
    v = bits.view(np.float32)
    v = np.where(np.isnan(v), np.float32(0.5), v)  # NaN payloads compare unequal
    out = decode_tensor(encode_tensor(v))
    assert out.dtype == np.float32 and out.shape == (c, h, w)
    assert out.tobytes() == v.astype("<f4").tobytes()


def test_tensor_file_round_trip(tmp_path):
    v = np.random.default_rng(0).standard_normal((3, 8, 8)).astype(np.float32)
    write_tensor(v, str(tmp_path / "t.uact"))
    assert read_tensor(str(tmp_path / "t.uact")).tobytes() == v.tobytes()


def test_tensor_errors():
    good = encode_tensor(np.zeros((2, 3, 3)))
    with pytest.raises(TensorFormatError):
        decode_tensor(b"XXXX" + good[4:])
    with pytest.raises(TensorFormatError):
        decode_tensor(good[:4] + b"\x02" + good[5:])
    with pytest.raises(TensorLengthError):
        decode_tensor(good[:-1])
    with pytest.raises(TensorLengthError):
        decode_tensor(good + b"\0\0\0\0")
    with pytest.raises(TensorLengthError):
        decode_tensor(good[:10])
    with pytest.raises(TensorFormatError):
        decode_tensor(b"XX")
    with pytest.raises(TensorFormatError):
        encode_tensor(np.zeros(4))


# --- stats and splits ---------------------------------------------------------


def test_stats_empty():
    s = dataset_stats(annotations_from_dict(doc([], images=[])))
    assert set(s.resolution_counts.values()) == {0}
    assert set(s.class_counts.values()) == {0}


def test_stats_counts_and_buckets():
    images = [{"id": k, "file_name": f"{k}.jpg", "height": 10, "width": w}
              for k, w in enumerate([720, 721, 1920, 4000], 1)]
    anns = [{"id": n, "image_id": 1 + n % 4, "category_id": c, "bbox": [0, 0, 2, 2]}
            for n, c in enumerate([2, 2, 2, 1, 1, 4, 3, 2])]
    s = dataset_stats(annotations_from_dict(doc(anns, images=images)))
    assert s.resolution_counts == {"<=720": 1, "<=1080": 1, "<=1920": 1, ">1920": 1}
    assert s.class_counts == {ClassId.HOLOTHURIAN: 2, ClassId.ECHINUS: 4, ClassId.SCALLOP: 1, ClassId.STARFISH: 1}
    assert "echinus,4" in s.to_csv().replace("class,", "")
    assert s.to_text().splitlines()[0] == "image widths:"
    custom = dataset_stats(annotations_from_dict(doc(anns, images=images)), edges=(1000,))
    assert custom.resolution_counts == {"<=1000": 2, ">1000": 2}


def test_split_disjoint():
    s = DatasetSplit(range(733), range(733, 733 + 5130), range(5863, 5863 + 754))
    assert s.sizes == (733, 5130, 754)
    with pytest.raises(ValueError):
        DatasetSplit({1, 2}, {2}, set())
