import json
import sys
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxsearch.errors import DetectorError, UnknownModel
from cxsearch.imaging import RgbImage
from cxsearch.localiser import (
    BBox,
    Detection,
    DetectorRegistry,
    FixtureDetector,
    SubprocessDetector,
    WholeFrameDetector,
    average_precision,
    detect,
    evaluate,
    iou,
    load_detections,
    load_ground_truth,
    mean_ap,
    resolve_exclusions,
    save_detections,
    save_ground_truth,
)

from conftest import solid

boxes = st.builds(
    BBox,
    st.floats(0, 200, allow_nan=False),
    st.floats(0, 200, allow_nan=False),
    st.floats(0.5, 100, allow_nan=False),
    st.floats(0.5, 100, allow_nan=False),
)
categories = st.sampled_from(["dress", "top", "skirt", "jacket"])
detections = st.builds(Detection, categories, st.floats(0, 1, allow_nan=False), boxes)


# -- IoU ----------------------------------------------------------------------


def test_iou_examples():
    a = BBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(20, 20, 5, 5)) == 0.0
    assert iou(a, BBox(10, 0, 10, 10)) == 0.0  # touching edges
    assert iou(a, BBox(5, 0, 10, 10)) == pytest.approx(50 / 150)


def test_bbox_requires_positive_size():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 5)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    assert iou(a, b) == iou(b, a)
    assert 0.0 <= iou(a, b) <= 1.0
    assert iou(a, a) == pytest.approx(1.0)


# -- detectors and registry ---------------------------------------------------


def test_fixture_detector_echoes_store():
    img = solid(64, 64)
    dress = Detection("dress", 0.9, BBox(10, 10, 50, 100))
    reg = DetectorRegistry()
    reg.register("fixture", FixtureDetector({img.content_hash(): [dress]}))
    got = detect(reg, "fixture", RgbImage(np.zeros((200, 100, 3), np.uint8)), 0.0)
    assert got == []  # different image, no annotation
    big = RgbImage(np.full((200, 100, 3), 128, np.uint8))
    reg.register("fixture", FixtureDetector({big.content_hash(): [dress]}))
    assert detect(reg, "fixture", big) == [dress]
    assert detect(reg, "fixture", big, conf_thresh=0.95) == []


def test_detect_clips_boxes_to_image():
    img = solid(50, 40)
    reg = DetectorRegistry()
    reg.register("f", FixtureDetector({img.content_hash(): [Detection("top", 0.7, BBox(-10, 30, 30, 40))]}))
    (d,) = detect(reg, "f", img)
    assert d.box == BBox(0, 30, 20, 20)


def test_unknown_model_and_category():
    reg = DetectorRegistry()
    with pytest.raises(UnknownModel):
        detect(reg, None, solid(40, 40))
    reg.register("wf", WholeFrameDetector(["hat"]))
    with pytest.raises(UnknownModel):
        detect(reg, "nope", solid(40, 40))
    with pytest.raises(DetectorError):
        detect(reg, "wf", solid(40, 40))


def test_wholeframe_detector():
    reg = DetectorRegistry()
    reg.register("wf", WholeFrameDetector())
    dets = detect(reg, None, solid(40, 60))
    assert len(dets) == 7
    assert all(d.confidence == 0.5 and d.box == BBox(0, 0, 60, 40) for d in dets)


def test_detector_failure_becomes_detector_error():
    class Broken:
        def detect(self, img):
            raise RuntimeError("gpu on fire")

    reg = DetectorRegistry()
    reg.register("b", Broken())
    with pytest.raises(DetectorError):
        detect(reg, "b", solid(40, 40))


def test_subprocess_detector(tmp_path):
    script = tmp_path / "det.py"
    script.write_text(
        "import json, sys\n"
        "data = sys.stdin.buffer.read()\n"
        "print(json.dumps([{'category': 'shoe', 'confidence': 0.8, 'box': {'x': 1, 'y': 2, 'w': 30, 'h': 20}}]))\n"
    )
    reg = DetectorRegistry()
    reg.register("ext", SubprocessDetector([sys.executable, str(script)]))
    assert detect(reg, "ext", solid(40, 40)) == [Detection("shoe", 0.8, BBox(1, 2, 30, 20))]
    reg.register("bad", SubprocessDetector([sys.executable, "-c", "import sys; sys.exit(3)"]))
    with pytest.raises(DetectorError):
        detect(reg, "bad", solid(40, 40))


def test_registry_default_and_unregister():
    reg = DetectorRegistry()
    reg.register("a", WholeFrameDetector())
    reg.register("b", WholeFrameDetector())
    assert reg.default == "a" and reg.names() == ["a", "b"]
    reg.set_default("b")
    reg.unregister("b")
    assert reg.default == "a"
    with pytest.raises(UnknownModel):
        reg.set_default("zzz")


class _Tagged:
    """Detector that reports its own generation twice, sleeping in between."""

    def __init__(self, gen: int):
        self.gen = gen

    def detect(self, img):
        first = self.gen
        time.sleep(0.0005)
        return [Detection("top", first / 1000, BBox(0, 0, 10, 10)), Detection("top", self.gen / 1000, BBox(0, 0, 10, 10))]


def test_hot_swap_never_tears_in_flight_calls():
    reg = DetectorRegistry()
    reg.register("m", _Tagged(0))
    img = solid(40, 40)
    stop = threading.Event()
    seen, torn = set(), []

    def reader():
        while not stop.is_set():
            a, b = detect(reg, "m", img)
            if a.confidence != b.confidence:
                torn.append((a, b))
            seen.add(a.confidence)

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for gen in range(1, 200):
        reg.swap("m", _Tagged(gen))
        time.sleep(0.0002)
    stop.set()
    for t in threads:
        t.join()
    assert not torn
    assert len(seen) > 1  # swaps were observed while reading


# -- exclusions ---------------------------------------------------------------


def _at(cat, conf, dx=0.0):
    return Detection(cat, conf, BBox(dx, 0, 100, 100))


def test_exclusion_examples():
    dress, top, skirt = _at("dress", 0.9), _at("top", 0.6, 10), _at("skirt", 0.5, 10)
    assert resolve_exclusions([top, dress, skirt]) == [dress]
    weak_dress, strong_top = _at("dress", 0.4), _at("top", 0.8, 20)
    assert iou(weak_dress.box, strong_top.box) == pytest.approx(80 / 120)
    assert resolve_exclusions([weak_dress, strong_top]) == [strong_top]
    far = Detection("top", 0.8, BBox(70, 0, 100, 100))
    assert iou(weak_dress.box, far.box) < 0.5
    assert resolve_exclusions([weak_dress, far]) == [weak_dress, far]


def test_exclusion_tie_removes_later():
    a, b = _at("dress", 0.7), _at("top", 0.7)
    assert resolve_exclusions([a, b]) == [a]
    assert resolve_exclusions([b, a]) == [b]


def test_top_and_skirt_coexist_and_config_pairs():
    top, skirt = _at("top", 0.9), _at("skirt", 0.8)
    assert resolve_exclusions([top, skirt]) == [top, skirt]
    assert resolve_exclusions([top, skirt], groups=[("top", "skirt")]) == [top]


@settings(max_examples=200, deadline=None)
@given(st.lists(detections, max_size=8))
def test_exclusion_fixed_point_and_idempotent(dets):
    out = resolve_exclusions(dets)
    assert resolve_exclusions(out) == out
    pairs = {("dress", "top"), ("top", "dress"), ("dress", "skirt"), ("skirt", "dress")}
    for i, a in enumerate(out):
        for b in out[i + 1 :]:
            assert (a.category, b.category) not in pairs or iou(a.box, b.box) <= 0.5
    # only ever removes, keeps order
    it = iter(dets)
    assert all(any(d is x for x in it) for d in out)


# -- AP / mAP ---------------------------------------------------------------------


GT_BOX = BBox(0, 0, 10, 10)


def test_ap_single_perfect_detection():
    gt = {"img": [("dress", GT_BOX)]}
    det = Detection("dress", 0.9, BBox(0, 0, 10, 6))  # IoU 0.6
    assert average_precision([("img", det)], gt, "dress") == 1.0


def test_ap_false_positive_first_gives_half():
    gt = {"img": [("dress", GT_BOX)]}
    fp = Detection("dress", 0.9, BBox(50, 50, 10, 10))
    tp = Detection("dress", 0.8, GT_BOX)
    assert average_precision([("img", fp), ("img", tp)], gt, "dress") == 0.5


def test_ap_no_detections_and_strict_threshold():
    gt = {"img": [("dress", GT_BOX)]}
    assert average_precision([], gt, "dress") == 0.0
    exactly_half = Detection("dress", 0.9, BBox(0, 0, 10, 5))  # IoU == 0.5 is not "larger than"
    assert average_precision([("img", exactly_half)], gt, "dress") == 0.0


def test_ap_duplicate_detection_is_false_positive():
    gt = {"img": [("top", GT_BOX), ("top", BBox(30, 30, 10, 10))]}
    dets = [("img", Detection("top", 0.9, GT_BOX)), ("img", Detection("top", 0.8, GT_BOX)), ("img", Detection("top", 0.7, BBox(30, 30, 10, 10)))]
    # precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1 -> 0.5 * 1 + 0.5 * 2/3
    assert average_precision(dets, gt, "top") == pytest.approx(0.5 + 1 / 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["i1", "i2"]), detections), max_size=10), st.floats(0.1, 5))
def test_ap_depends_only_on_confidence_order(dets, power):
    gt = {"i1": [("dress", BBox(0, 0, 50, 50)), ("top", BBox(100, 0, 50, 50))], "i2": [("dress", BBox(10, 10, 80, 80))]}
    remapped = [(i, Detection(d.category, d.confidence**power, d.box)) for i, d in dets]
    for c in ("dress", "top"):
        assert average_precision(dets, gt, c) == average_precision(remapped, gt, c)


def test_mean_ap():
    assert mean_ap({"a": 1.0, "b": 0.0}) == 0.5
    assert mean_ap([0.763]) == 0.763
    table_row = [83, 73, 75, 69, 84, 63, 85]
    assert round(100 * mean_ap([v / 100 for v in table_row]), 2) == pytest.approx(76.0, abs=0.05)
    with pytest.raises(ValueError):
        mean_ap([])


def test_annotation_files_roundtrip(tmp_path):
    dets = {"h1": [Detection("dress", 0.9, BBox(1, 2, 3, 4))], "h2": []}
    gt = {"h1": [("dress", BBox(1, 2, 3, 4))]}
    save_detections(tmp_path / "d.json", dets)
    save_ground_truth(tmp_path / "g.json", gt)
    assert load_detections(tmp_path / "d.json") == dets
    assert load_ground_truth(tmp_path / "g.json") == gt
    assert json.loads((tmp_path / "g.json").read_text())["h1"][0] == {"category": "dress", "box": {"x": 1, "y": 2, "w": 3, "h": 4}}
    flat = [(k, d) for k, v in dets.items() for d in v]
    aps, m = evaluate(flat, gt, ["dress"])
    assert aps == {"dress": 1.0} and m == 1.0
