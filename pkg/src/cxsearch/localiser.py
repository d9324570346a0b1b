"""Detector registry with hot-swap, category mutual exclusion, and IoU/AP/mAP evaluation."""

from __future__ import annotations

import json
import subprocess
import threading
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from cxsearch.errors import CxSearchError, DetectorError, UnknownModel
from cxsearch.imaging import RgbImage, encode_png

DEFAULT_CATEGORIES = ("jacket", "dress", "skirt", "top", "trousers", "purse", "shoe")
DEFAULT_EXCLUSIONS = (("dress", "top"), ("dress", "skirt"))
DEFAULT_IOU = 0.5


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box; ``x``, ``y`` is the top-left corner."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive width and height, got {self.w}x{self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: Mapping) -> BBox:
        return cls(d["x"], d["y"], d["w"], d["h"])


@dataclass(frozen=True)
class Detection:
    category: str
    confidence: float
    box: BBox

    def to_dict(self) -> dict:
        return {"category": self.category, "confidence": self.confidence, "box": self.box.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> Detection:
        return cls(d["category"], float(d.get("confidence", 1.0)), BBox.from_dict(d["box"]))


GroundTruth = Mapping[str, Sequence[tuple[str, BBox]]]


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # edge arithmetic can round the intersection slightly above an area
    return min(1.0, inter / (a.area + b.area - inter))


# -- detectors -------------------------------------------------------------


class Detector(Protocol):
    def detect(self, img: RgbImage) -> list[Detection]: ...


class FixtureDetector:
    """Echoes stored detections, keyed by :meth:`RgbImage.content_hash`."""

    def __init__(self, annotations: Mapping[str, Sequence[Detection]]):
        self.annotations = {k: tuple(v) for k, v in annotations.items()}

    @classmethod
    def from_file(cls, path: str | Path) -> FixtureDetector:
        return cls(load_detections(path))

    def detect(self, img: RgbImage) -> list[Detection]:
        return list(self.annotations.get(img.content_hash(), ()))


class WholeFrameDetector:
    """One full-image box per category at confidence 0.5; for plumbing tests."""

    def __init__(self, categories: Sequence[str] = DEFAULT_CATEGORIES):
        self.categories = tuple(categories)

    def detect(self, img: RgbImage) -> list[Detection]:
        box = BBox(0, 0, img.width, img.height)
        return [Detection(c, 0.5, box) for c in self.categories]


class SubprocessDetector:
    """Adapter for an external detector program.

    The command receives the image as PNG on stdin and must print a JSON list of
    ``{category, confidence, box: {x, y, w, h}}`` objects on stdout.
    """

    def __init__(self, command: Sequence[str], timeout: float = 30.0):
        self.command = list(command)
        self.timeout = timeout

    def detect(self, img: RgbImage) -> list[Detection]:
        try:
            proc = subprocess.run(
                self.command, input=encode_png(img), capture_output=True, timeout=self.timeout, check=True
            )
            return [Detection.from_dict(d) for d in json.loads(proc.stdout)]
        except (OSError, subprocess.SubprocessError, ValueError, KeyError, TypeError) as exc:
            raise DetectorError(f"external detector {self.command[0]!r} failed: {exc}") from exc


class DetectorRegistry:
    """Named detectors plus a default name.

    Writers publish a fresh immutable snapshot under a lock; readers grab the
    current snapshot without locking, so a swap never tears an in-flight call.
    """

    def __init__(self, categories: Sequence[str] = DEFAULT_CATEGORIES):
        self.categories = tuple(categories)
        self._lock = threading.Lock()
        self._state: tuple[Mapping[str, Detector], str | None] = (MappingProxyType({}), None)

    def register(self, name: str, detector: Detector, default: bool = False) -> None:
        """Add or replace (hot-swap) the detector called ``name``."""
        with self._lock:
            impls, current = self._state
            new = dict(impls)
            new[name] = detector
            self._state = (MappingProxyType(new), name if default or current is None else current)

    swap = register

    def unregister(self, name: str) -> None:
        with self._lock:
            impls, current = self._state
            if name not in impls:
                raise UnknownModel(name)
            new = {k: v for k, v in impls.items() if k != name}
            self._state = (MappingProxyType(new), current if current != name else next(iter(new), None))

    def set_default(self, name: str) -> None:
        with self._lock:
            impls, _ = self._state
            if name not in impls:
                raise UnknownModel(name)
            self._state = (impls, name)

    @property
    def default(self) -> str | None:
        return self._state[1]

    def names(self) -> list[str]:
        return sorted(self._state[0])

    def __len__(self) -> int:
        return len(self._state[0])

    def get(self, name: str | None = None) -> Detector:
        impls, default = self._state
        key = name or default
        if key is None or key not in impls:
            raise UnknownModel(f"unknown model {key!r}")
        return impls[key]


def _clip_box(box: BBox, width: int, height: int) -> BBox | None:
    x0, y0 = max(box.x, 0), max(box.y, 0)
    x1, y1 = min(box.x + box.w, width), min(box.y + box.h, height)
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox(x0, y0, x1 - x0, y1 - y0)


def detect(reg: DetectorRegistry, model: str | None, img: RgbImage, conf_thresh: float = 0.0) -> list[Detection]:
    """Run a registered detector; keep detections at or above ``conf_thresh``, boxes clipped to the image."""
    impl = reg.get(model)
    try:
        raw = impl.detect(img)
    except CxSearchError:
        raise
    except Exception as exc:  # plug-ins may fail in arbitrary ways
        raise DetectorError(f"detector {model or reg.default!r} failed: {exc}") from exc
    out = []
    for d in raw:
        if d.category not in reg.categories:
            raise DetectorError(f"detector returned unknown category {d.category!r}")
        if d.confidence < conf_thresh:
            continue
        box = _clip_box(d.box, img.width, img.height)
        if box is not None:
            out.append(Detection(d.category, d.confidence, box))
    return out


def resolve_exclusions(
    dets: Sequence[Detection],
    groups: Iterable[tuple[str, str]] = DEFAULT_EXCLUSIONS,
    iou_thresh: float = DEFAULT_IOU,
) -> list[Detection]:
    """Drop the weaker of any two overlapping detections from mutually exclusive categories.

    Detections are visited by confidence (ties: input order) and each one is kept
    unless it overlaps an already kept, exclusive-category detection with IoU above
    ``iou_thresh``. The result is a fixed point: no exclusive pair above the
    threshold remains. Output keeps input order.
    """
    exclusive: set[tuple[str, str]] = set()
    for a, b in groups:
        exclusive.add((a, b))
        exclusive.add((b, a))
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[int] = []
    for i in order:
        d = dets[i]
        if all(
            (d.category, dets[j].category) not in exclusive or iou(d.box, dets[j].box) <= iou_thresh for j in kept
        ):
            kept.append(i)
    return [dets[i] for i in sorted(kept)]


# -- evaluation ------------------------------------------------------------


def average_precision(
    dets: Sequence[tuple[str, Detection]],
    gt: GroundTruth,
    category: str,
    iou_thresh: float = DEFAULT_IOU,
) -> float:
    """All-point interpolated AP for one category.

    A detection is a true positive when its best unmatched ground-truth box of the
    same category and image has IoU strictly above ``iou_thresh``. Returns 0.0 when
    the category has no ground truth.
    """
    truths = {img: [b for c, b in boxes if c == category] for img, boxes in gt.items()}
    n_pos = sum(len(v) for v in truths.values())
    if n_pos == 0:
        return 0.0
    cand = [(img, d) for img, d in dets if d.category == category]
    order = sorted(range(len(cand)), key=lambda i: (-cand[i][1].confidence, i))
    matched = {img: [False] * len(v) for img, v in truths.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, d = cand[i]
        best, best_j = iou_thresh, -1
        for j, box in enumerate(truths.get(img, ())):
            if matched[img][j]:
                continue
            o = iou(d.box, box)
            if o > best:
                best, best_j = o, j
        if best_j >= 0:
            matched[img][best_j] = True
            tp[rank] = 1.0
    if len(order) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_pos
    precision = ctp / np.arange(1, len(order) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def mean_ap(per_category_aps: Mapping[str, float] | Sequence[float]) -> float:
    values = list(per_category_aps.values()) if isinstance(per_category_aps, Mapping) else list(per_category_aps)
    if not values:
        raise ValueError("mean_ap needs at least one category")
    return float(np.mean(values))


def evaluate(
    dets: Sequence[tuple[str, Detection]],
    gt: GroundTruth,
    categories: Sequence[str],
    iou_thresh: float = DEFAULT_IOU,
) -> tuple[dict[str, float], float]:
    aps = {c: average_precision(dets, gt, c, iou_thresh) for c in categories}
    return aps, mean_ap(aps)


# -- annotation files ------------------------------------------------------


def load_detections(path: str | Path) -> dict[str, list[Detection]]:
    """Read ``{image key: [{category, confidence, box}]}``."""
    with open(path) as fh:
        doc = json.load(fh)
    return {key: [Detection.from_dict(d) for d in items] for key, items in doc.items()}


def load_ground_truth(path: str | Path) -> dict[str, list[tuple[str, BBox]]]:
    """Ground truth uses the detection schema without ``confidence``."""
    with open(path) as fh:
        doc = json.load(fh)
    return {key: [(d["category"], BBox.from_dict(d["box"])) for d in items] for key, items in doc.items()}


def save_detections(path: str | Path, annotations: Mapping[str, Sequence[Detection]]) -> None:
    doc = {k: [d.to_dict() for d in v] for k, v in annotations.items()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def save_ground_truth(path: str | Path, gt: GroundTruth) -> None:
    doc = {k: [{"category": c, "box": b.to_dict()} for c, b in v] for k, v in gt.items()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
