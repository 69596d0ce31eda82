import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bilinear_reference
from tinydet.dataset import (PALETTE, RIPENESS_CLASSES, ClassTable, GroundTruth, format_annotation,
                             letterbox_box, letterbox_image, load_dataset, parse_annotation, read_image,
                             rescale_image, split_dataset, synthesize_dataset, to_original_pixels, write_dataset)
from tinydet.errors import DataError
from tinydet.netdef import bundled_path
from tinydet.postprocess import Box

TABLE = ClassTable()


def test_bundled_classes_follow_numeric_coding():
    table = ClassTable.load(bundled_path("classes.txt"))
    assert table.names == RIPENESS_CLASSES
    assert table.names == ("Red", "Red-orange", "Orange", "Striped", "Salmon", "Green")
    assert table.index("Salmon") == 4


def test_class_table_rejects_duplicates_and_empty():
    with pytest.raises(DataError):
        ClassTable.from_text("a\na\n")
    with pytest.raises(DataError):
        ClassTable.from_text("\n")


def test_annotation_round_trip():
    t = parse_annotation("3 0.5 0.25 0.1 0.2", TABLE)
    assert t == GroundTruth(3, Box(0.5, 0.25, 0.1, 0.2))
    assert format_annotation(t) == "3 0.500000 0.250000 0.100000 0.200000"


@pytest.mark.parametrize("line", ["3 0.5 0.5 0.1", "9 0.5 0.5 0.1 0.1", "1 1.5 0.5 0.1 0.1",
                                  "x 0.5 0.5 0.1 0.1", "1 0.5 0.5 nan-ish 0.1"])
def test_bad_annotations(line):
    with pytest.raises(DataError):
        parse_annotation(line, TABLE)


def test_rescale_same_size_is_exact():
    px = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    out = rescale_image(px, (7, 5))
    assert out.shape == (1, 3, 5, 7) and out.dtype == np.float32
    assert np.array_equal(out[0], (px.transpose(2, 0, 1) / 255.0).astype(np.float32))


@given(w=st.integers(1, 12), h=st.integers(1, 12), ow=st.integers(1, 12), oh=st.integers(1, 12),
       seed=st.integers(0, 999))
def test_rescale_matches_bilinear_oracle(w, h, ow, oh, seed):
    px = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    ref = bilinear_reference(px.astype(np.float64), ow, oh) / 255.0
    out = rescale_image(px, (ow, oh))[0].transpose(1, 2, 0)
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_stretch_box_maps_back_to_original_pixels():
    b = Box(0.5, 0.25, 0.2, 0.1)
    assert to_original_pixels(b, (640, 480)) == pytest.approx((256, 96, 384, 144))


def test_letterbox_box_round_trip():
    px = np.zeros((100, 200, 3), np.uint8)
    canvas, info = letterbox_image(px, 64)
    assert canvas.shape == (1, 3, 64, 64)
    b = Box(0.3, 0.6, 0.2, 0.3)
    lb = letterbox_box(b, (200, 100), 64, info)
    assert to_original_pixels(lb, (200, 100), 64, info) == pytest.approx(b.corners(200, 100))


def test_split_is_seeded_disjoint_and_sized():
    items = list(range(600))
    tr, va = split_dataset(items, 0.8, 7)
    assert (len(tr), len(va)) == (480, 120)
    assert sorted(tr + va) == items
    assert split_dataset(items, 0.8, 7) == (tr, va)
    assert split_dataset(items, 0.8, 8) != (tr, va)


def test_split_empty_side():
    with pytest.raises(DataError):
        split_dataset([1], 0.8, 0)


def test_synthesis_is_deterministic_and_balanced():
    a_samples, a_imgs = synthesize_dataset(30, 5, size=48)
    b_samples, b_imgs = synthesize_dataset(30, 5, size=48)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a_imgs, b_imgs))
    assert [s.truths for s in a_samples] == [s.truths for s in b_samples]
    counts = np.bincount([s.truths[0].class_id for s in a_samples], minlength=6)
    assert counts.max() - counts.min() <= 1
    _, c_imgs = synthesize_dataset(30, 6, size=48)
    assert any(x.tobytes() != y.tobytes() for x, y in zip(a_imgs, c_imgs))


def test_synthetic_box_encloses_class_coloured_disc():
    samples, imgs = synthesize_dataset(12, 1, size=64)
    for s, px in zip(samples, imgs):
        (t,) = s.truths
        x0, y0, x1, y1 = (int(round(v)) for v in t.box.corners(64, 64))
        centre = px[(y0 + y1) // 2, (x0 + x1) // 2].astype(int)
        # the centre pixel is closest to this class's palette colour
        dist = [np.abs(centre - np.array(c)).sum() for c in PALETTE]
        assert int(np.argmin(dist)) == t.class_id
        assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64


def test_write_and_load_round_trip(tmp_path):
    samples, imgs = synthesize_dataset(6, 2, size=32)
    write_dataset(tmp_path, samples, imgs, TABLE)
    assert ClassTable.load(tmp_path / "classes.txt") == TABLE
    assert np.array_equal(read_image(tmp_path / "images" / "synth_00000.png"), imgs[0])
    loaded, problems = load_dataset(tmp_path / "images", tmp_path / "labels", TABLE, 32, workers=3)
    assert problems == []
    assert [s.source_id for s in loaded] == [s.source_id for s in samples]
    for a, b in zip(loaded, samples):
        assert np.array_equal(a.image, b.image)
        assert a.truths[0].class_id == b.truths[0].class_id
        assert a.truths[0].box.cx == pytest.approx(b.truths[0].box.cx, abs=1e-6)


def test_load_reports_unpaired_and_bad_files(tmp_path):
    samples, imgs = synthesize_dataset(3, 2, size=16)
    write_dataset(tmp_path, samples, imgs, TABLE)
    (tmp_path / "labels" / "synth_00000.txt").unlink()
    (tmp_path / "labels" / "orphan.txt").write_text("0 0.5 0.5 0.1 0.1\n")
    (tmp_path / "labels" / "synth_00001.txt").write_text("7 0.5 0.5 0.1 0.1\n")
    (tmp_path / "images" / "broken.png").write_bytes(b"not an image")
    (tmp_path / "labels" / "broken.txt").write_text("0 0.5 0.5 0.1 0.1\n")
    loaded, problems = load_dataset(tmp_path / "images", tmp_path / "labels", TABLE, 16)
    assert [s.source_id for s in loaded] == ["synth_00002"]
    names = sorted(p[0] for p in problems)
    assert names == ["broken.png", "orphan.txt", "synth_00000.png", "synth_00001.png"]


def test_write_is_byte_identical(tmp_path):
    for run in ("a", "b"):
        samples, imgs = synthesize_dataset(5, 9, size=24)
        write_dataset(tmp_path / run, samples, imgs, TABLE)
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
