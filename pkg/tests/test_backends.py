import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskadapt.backends import (
    NUM_JOINTS,
    CallablePoseExtractor,
    CallableSegmenter,
    OraclePoseExtractor,
    OracleSegmenter,
    PoseSkeleton,
    SegmenterRequest,
    StickFigureDetector,
    ThresholdSegmenter,
    UnavailableSegmenter,
    load_image_png,
    load_mask_png,
    render_stick_figure,
    resize_nearest,
    save_image_png,
    save_mask_png,
    white_page_segmenter,
)
from maskadapt.errors import BackendError, BackendUnavailable, ShapeError
from maskadapt.toydata import toy_entry_image, toy_skeleton


def square_image(n=16, lo=4, hi=12):
    img = np.zeros((n, n, 3))
    img[lo:hi, lo:hi] = 1.0
    return img


def test_request_needs_prompt():
    with pytest.raises(ValueError):
        SegmenterRequest(np.zeros((4, 4, 3)), "  ")


def test_oracle_segmenter():
    m = np.random.default_rng(0).random((8, 8)) > 0.5
    seg = OracleSegmenter({"a": m})
    assert np.array_equal(seg.segment(SegmenterRequest(np.zeros((8, 8, 3)), "x", "a")), m)
    with pytest.raises(BackendError):
        seg.segment(SegmenterRequest(np.zeros((8, 8, 3)), "x", "b"))


def test_threshold_square():
    img = square_image()
    mask = ThresholdSegmenter(0.5).segment(SegmenterRequest(img, "square"))
    expect = np.zeros((16, 16), bool)
    expect[4:12, 4:12] = True
    assert np.array_equal(mask, expect)
    page = 1.0 - img
    assert np.array_equal(white_page_segmenter().segment(SegmenterRequest(page, "x")), expect)


def test_unavailable_never_returns_mask():
    with pytest.raises(BackendUnavailable):
        UnavailableSegmenter().segment(SegmenterRequest(np.zeros((4, 4, 3)), "x"))


def test_callable_segmenter_wraps_errors():
    def bad(image, prompt):
        raise RuntimeError("boom")

    with pytest.raises(BackendError, match="boom"):
        CallableSegmenter(bad).segment(SegmenterRequest(np.zeros((4, 4, 3)), "x"))
    with pytest.raises(ShapeError):
        CallableSegmenter(lambda i, p: np.ones((3, 3))).segment(SegmenterRequest(np.zeros((4, 4, 3)), "x"))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 1000), factor=st.sampled_from([2, 3, 4]))
def test_resize_consistency(seed, factor):
    small = np.random.default_rng(seed).random((8, 8, 3))
    big = resize_nearest(small, 8 * factor, 8 * factor)
    seg = ThresholdSegmenter(0.5)
    a = seg.segment(SegmenterRequest(big, "x"))
    b = resize_nearest(seg.segment(SegmenterRequest(small, "x")), 8 * factor, 8 * factor)
    assert np.array_equal(a, b)


def test_skeleton_validation_and_text_roundtrip(tmp_path):
    sk = toy_skeleton(3)
    sk.save(tmp_path / "p.txt")
    assert PoseSkeleton.load(tmp_path / "p.txt") == sk
    with pytest.raises(ValueError):
        PoseSkeleton(np.full((NUM_JOINTS, 2), 1.5), np.ones(NUM_JOINTS), np.ones(NUM_JOINTS, bool))
    with pytest.raises(ValueError):
        PoseSkeleton(np.zeros((NUM_JOINTS, 2)), np.full(NUM_JOINTS, 2.0), np.ones(NUM_JOINTS, bool))
    # undetected joints may carry any coordinates
    PoseSkeleton(np.full((NUM_JOINTS, 2), 7.0), np.zeros(NUM_JOINTS), np.zeros(NUM_JOINTS, bool))
    with pytest.raises(ValueError):
        PoseSkeleton.from_text("0 0.1 0.1 1 1\n0 0.1 0.1 1 1\n")


def test_oracle_pose_roundtrip():
    sk = toy_skeleton(1)
    ex = OraclePoseExtractor({"a": sk})
    assert ex.extract_pose(np.zeros((4, 4, 3)), "a") == sk
    with pytest.raises(BackendError):
        ex.extract_pose(np.zeros((4, 4, 3)), "b")


def test_blank_image_has_no_joints():
    sk = StickFigureDetector().extract_pose(np.ones((32, 32, 3)))
    assert sk.num_detected == 0
    assert StickFigureDetector().extract_pose(np.zeros((32, 32, 3))).num_detected == 0


@pytest.mark.parametrize("size", [32, 64, 128])
def test_render_then_detect(size):
    sk = toy_skeleton(7, size)
    found = StickFigureDetector().extract_pose(render_stick_figure(sk, size))
    assert found.num_detected == NUM_JOINTS
    err_px = np.abs(found.xy - sk.xy) * size
    assert err_px.max() <= 1.0


def test_toy_character_pose_recoverable():
    img, sk = toy_entry_image("toy0003")
    found = StickFigureDetector().extract_pose(img)
    assert found.num_detected == NUM_JOINTS
    assert (np.abs(found.xy - sk.xy) * 32).max() <= 1.0


def test_callable_pose_wraps_errors():
    def bad(image):
        raise OSError("no model")

    with pytest.raises(BackendError):
        CallablePoseExtractor(bad).extract_pose(np.zeros((4, 4, 3)))


def test_png_roundtrips(tmp_path):
    m = np.random.default_rng(1).random((10, 12)) > 0.5
    save_mask_png(m, tmp_path / "m.png")
    assert np.array_equal(load_mask_png(tmp_path / "m.png"), m)
    img = np.round(np.random.default_rng(2).random((6, 5, 3)) * 255) / 255
    save_image_png(img, tmp_path / "i.png")
    assert np.allclose(load_image_png(tmp_path / "i.png"), img)
