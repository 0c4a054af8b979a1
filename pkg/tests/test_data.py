import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfnet.data import (
    PAD_VALUE,
    BoxLabel,
    DatasetError,
    Sample,
    SplitManifest,
    contrast_enhance,
    letterbox,
    load_dataset,
    mosaic,
    mosaic_layout,
    read_image,
    save_sample,
    split,
    to_chw,
    unletterbox_labels,
    write_image,
)

import oracles


def boxes(draw_n=st.integers(0, 5)):
    @st.composite
    def _boxes(draw):
        out = []
        for _ in range(draw(draw_n)):
            w = draw(st.floats(0.01, 0.9))
            h = draw(st.floats(0.01, 0.9))
            cx = draw(st.floats(w / 2, 1 - w / 2))
            cy = draw(st.floats(h / 2, 1 - h / 2))
            out.append(BoxLabel(draw(st.integers(0, 3)), cx, cy, w, h))
        return out

    return _boxes()


def blank(h, w, c=1, labels=(), sid="x"):
    return Sample(np.zeros((h, w, c), dtype=np.float32), list(labels), sid)


# ---------------------------------------------------------------------------
# types


def test_boxlabel_invariants():
    with pytest.raises(ValueError):
        BoxLabel(0, 0.95, 0.5, 0.2, 0.2)
    with pytest.raises(ValueError):
        BoxLabel(0, 0.5, 0.5, 0.0, 0.2)
    with pytest.raises(ValueError):
        BoxLabel(-1, 0.5, 0.5, 0.1, 0.1)
    assert BoxLabel.from_xyxy(0, -0.1, 0.2, 0.4, 1.3) == BoxLabel(0, 0.2, 0.6, 0.4, 0.8)


def test_sample_invariants():
    with pytest.raises(ValueError):
        blank(16, 64)
    with pytest.raises(ValueError):
        Sample(np.full((40, 40), 1.5))
    assert blank(40, 50).image.shape == (40, 50, 1)


# ---------------------------------------------------------------------------
# I/O


def test_netpbm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for c, name in ((1, "a.pgm"), (3, "b.ppm")):
        img = np.round(rng.uniform(size=(33, 47, c)) * 255) / 255
        write_image(tmp_path / name, img)
        np.testing.assert_allclose(read_image(tmp_path / name), img, atol=1e-7)


def test_header_with_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(read_image(p)[:, :, 0], [[0.0, 1.0]])


def test_unsupported_or_truncated_images(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(DatasetError, match="magic"):
        read_image(tmp_path / "a.pgm")
    (tmp_path / "b.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(DatasetError, match="truncated"):
        read_image(tmp_path / "b.pgm")


FIXTURE = {
    "img00": "0 0.5 0.5 0.2 0.2\n",
    "img01": "",
    "img02": "0 0.25 0.25 0.1 0.1\n0 0.75 0.75 0.2 0.3\n",
    "img03": "1 0.1 0.9 0.2 0.2\n",
    "img04": "0 0.5 0.5 1.0 1.0\n",
    "img05": "2 0.3 0.6 0.05 0.4\n\n",
    "img06": "0 0.5 0.1 0.5 0.2\n0 0.5 0.9 0.5 0.2\n0 0.1 0.5 0.2 0.5\n",
    "img07": "0 0.125 0.375 0.25 0.25\n",
    "img08": "3 0.6 0.4 0.3 0.3\n",
    "img09": None,  # no label file at all
}
FIXTURE_EXPECTED = {
    "img00": [(0, 0.5, 0.5, 0.2, 0.2)],
    "img01": [],
    "img02": [(0, 0.25, 0.25, 0.1, 0.1), (0, 0.75, 0.75, 0.2, 0.3)],
    "img03": [(1, 0.1, 0.9, 0.2, 0.2)],
    "img04": [(0, 0.5, 0.5, 1.0, 1.0)],
    "img05": [(2, 0.3, 0.6, 0.05, 0.4)],
    "img06": [(0, 0.5, 0.1, 0.5, 0.2), (0, 0.5, 0.9, 0.5, 0.2), (0, 0.1, 0.5, 0.2, 0.5)],
    "img07": [(0, 0.125, 0.375, 0.25, 0.25)],
    "img08": [(3, 0.6, 0.4, 0.3, 0.3)],
    "img09": [],
}


def test_load_hand_written_fixture(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    for i, (stem, text) in enumerate(FIXTURE.items()):
        write_image(tmp_path / "images" / f"{stem}.pgm", np.full((40 + i, 50, 1), 0.5))
        if text is not None:
            (tmp_path / "labels" / f"{stem}.txt").write_text(text)
    samples = load_dataset(tmp_path)
    assert [s.source_id for s in samples] == list(FIXTURE)
    for s in samples:
        got = [(b.class_id, b.cx, b.cy, b.w, b.h) for b in s.labels]
        assert len(got) == len(FIXTURE_EXPECTED[s.source_id])
        for g, e in zip(got, FIXTURE_EXPECTED[s.source_id]):
            assert g[0] == e[0]
            np.testing.assert_allclose(g[1:], e[1:], atol=1e-12)


def test_malformed_lines_are_reported_and_skipped(tmp_path, caplog):
    save_sample(tmp_path, blank(40, 40, sid="a"))
    (tmp_path / "labels" / "a.txt").write_text("0 0.5 0.5 0.2\n0 0.5 0.5 0.2 0.2\nx 1 1 1 1\n")
    issues = []
    with caplog.at_level(logging.WARNING):
        (s,) = load_dataset(tmp_path, issues)
    assert len(s.labels) == 1
    assert len(issues) == 2 and "a.txt:1" in issues[0] and "a.txt:3" in issues[1]


def test_out_of_range_label_is_fatal(tmp_path):
    save_sample(tmp_path, blank(40, 40, sid="a"))
    (tmp_path / "labels" / "a.txt").write_text("0 1.5 0.5 0.2 0.2\n")
    with pytest.raises(DatasetError, match="a.txt:1"):
        load_dataset(tmp_path)


def test_unreadable_image_is_skipped(tmp_path):
    save_sample(tmp_path, blank(40, 40, sid="good"))
    (tmp_path / "images" / "bad.pgm").write_bytes(b"garbage")
    issues = []
    assert [s.source_id for s in load_dataset(tmp_path, issues)] == ["good"]
    assert "bad.pgm" in issues[0]


def test_missing_images_dir(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


# ---------------------------------------------------------------------------
# letterbox and contrast


def test_letterbox_640x480():
    out, rec = letterbox(blank(480, 640, labels=[BoxLabel(0, 0.5, 0.5, 0.5, 0.5)]), 416)
    assert rec.scale == pytest.approx(0.65)
    assert (rec.pad_x, rec.pad_y) == (0.0, 52.0)
    img = out.image[:, :, 0]
    assert np.all(img[:52] == np.float32(PAD_VALUE)) and np.all(img[-52:] == np.float32(PAD_VALUE))
    assert np.all(img[52:-52] == 0)
    b = out.labels[0]
    np.testing.assert_allclose([b.cx, b.cy, b.w, b.h], [0.5, 0.5, 0.5, 0.5 * 312 / 416], atol=1e-12)


def test_letterbox_square_is_pure_scale():
    _, rec = letterbox(blank(64, 64), 128)
    assert (rec.scale, rec.pad_x, rec.pad_y) == (2.0, 0.0, 0.0)


def test_letterbox_target_must_be_multiple_of_32():
    with pytest.raises(ValueError):
        letterbox(blank(64, 64), 100)


@settings(max_examples=80, deadline=None)
@given(st.integers(32, 300), st.integers(32, 300), st.sampled_from([64, 128, 416]), boxes())
def test_letterbox_round_trip(h, w, target, labels):
    out, rec = letterbox(blank(h, w, labels=labels), target)
    back = unletterbox_labels(out.labels, rec)
    for a, b in zip(labels, back):
        np.testing.assert_allclose(a.xyxy(), b.xyxy(), atol=1e-6)
        assert a.class_id == b.class_id


def test_contrast_examples():
    s = Sample(np.array([[0.25, 0.75]] * 32 * 16).reshape(32, 32, 1))
    np.testing.assert_array_equal(np.unique(contrast_enhance(s).image), [0.0, 1.0])
    flat = Sample(np.full((32, 32, 1), 0.5))
    assert contrast_enhance(flat) is flat


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16))
def test_contrast_is_monotone_and_spans_unit(seed):
    img = np.random.default_rng(seed).uniform(0.2, 0.7, size=(32, 32, 1)).astype(np.float32)
    out = contrast_enhance(Sample(img)).image.ravel()
    assert out.min() == 0 and out.max() == pytest.approx(1)
    order = np.argsort(img.ravel(), kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


def test_to_chw_replicates_gray():
    out = to_chw(np.arange(6, dtype=np.float32).reshape(2, 3, 1) / 10)
    assert out.shape == (3, 2, 3)
    np.testing.assert_array_equal(out[0], out[2])


# ---------------------------------------------------------------------------
# mosaic


def test_mosaic_symmetric_tiling():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(64, 64, 1)).astype(np.float32)
    smp = Sample(img, [BoxLabel(0, 0.5, 0.5, 0.5, 0.5)], "s")
    out = mosaic([smp] * 4, 128, seed=0, center=(64, 64))
    quarters = [out.image[:64, :64], out.image[:64, 64:], out.image[64:, :64], out.image[64:, 64:]]
    for q in quarters:
        np.testing.assert_array_equal(q, quarters[0])
    assert sorted((round(b.cx, 6), round(b.cy, 6)) for b in out.labels) == [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)]
    assert all(b.w == pytest.approx(0.25) for b in out.labels)


def test_mosaic_requires_four():
    with pytest.raises(ValueError):
        mosaic([blank(40, 40)] * 3, 64, 0)


def test_mosaic_center_is_seeded():
    a, _ = mosaic_layout([(40, 40)] * 4, 128, seed=5)
    b, _ = mosaic_layout([(40, 40)] * 4, 128, seed=5)
    assert a == b and all(32 <= v <= 96 for v in a)


@st.composite
def mosaic_inputs(draw):
    items = []
    for i in range(4):
        h, w = draw(st.integers(32, 90)), draw(st.integers(32, 90))
        items.append(blank(h, w, labels=draw(boxes(st.integers(0, 4))), sid=f"s{i}"))
    return items, draw(st.integers(0, 2**31 - 1))


@settings(max_examples=60, deadline=None)
@given(mosaic_inputs())
def test_mosaic_matches_affine_oracle(data):
    samples, seed = data
    s = 128
    center, _ = mosaic_layout([(x.width, x.height) for x in samples], s, seed)
    out = mosaic(samples, s, seed)
    ref = oracles.mosaic_labels(
        [((x.width, x.height), [(b.class_id, b.cx, b.cy, b.w, b.h) for b in x.labels]) for x in samples], s, center
    )
    assert len(out.labels) == len(ref)
    for b, (cls, x1, y1, x2, y2) in zip(out.labels, ref):
        assert b.class_id == cls
        np.testing.assert_allclose(np.array(b.xyxy()) * s, [x1, y1, x2, y2], atol=1e-6)
        bx1, by1, bx2, by2 = b.xyxy()
        assert 0 <= bx1 < bx2 <= 1 and 0 <= by1 < by2 <= 1


# ---------------------------------------------------------------------------
# split


def test_split_examples():
    m = split([str(i) for i in range(10)], 0.8, seed=1)
    assert (len(m.train), len(m.test)) == (8, 2)
    ids = [f"im{i:04d}" for i in range(3891)]
    m = split(ids, 0.7967, seed=0)
    assert (len(m.train), len(m.test)) == (3100, 791)
    assert split(ids, 0.7967, seed=0) == m
    assert split(ids, 0.7967, seed=1) != m


def test_split_errors():
    with pytest.raises(ValueError):
        split(["a"], 0.8)
    with pytest.raises(ValueError):
        split(["a", "b"], 1.0)
    with pytest.raises(ValueError):
        split(["a", "a"], 0.5)


def test_split_manifest_json_round_trip():
    m = split(list("abcdef"), 0.5, seed=3)
    assert SplitManifest.from_json(m.to_json()) == m


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_a_partition_near_ratio(n, ratio, seed):
    ids = [f"id{i}" for i in range(n)]
    m = split(ids, ratio, seed)
    assert not set(m.train) & set(m.test)
    assert sorted(m.train + m.test) == sorted(ids)
    assert m.train and m.test
    assert abs(len(m.train) - ratio * n) <= 1 or len(m.test) == 1 or len(m.train) == 1
