"""Multi-product search: detect, resolve exclusions, crop, and query per-category databases in parallel."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

from cxsearch.descriptor import describe_image
from cxsearch.errors import ConfigError, CxSearchError, EmptyCrop, NoShardsAvailable
from cxsearch.imaging import MIN_SIDE, RgbImage
from cxsearch.index import RankedResult, ShardSet, load_shard_set
from cxsearch.localiser import DEFAULT_EXCLUSIONS, DEFAULT_IOU, BBox, DetectorRegistry, detect, resolve_exclusions
from cxsearch.signature import Codebook, quantize

log = logging.getLogger(__name__)


def crop(img: RgbImage, box: BBox) -> RgbImage:
    """Sub-image covering the part of ``box`` inside the image (outer pixel rounding)."""
    x0 = max(0, math.floor(box.x))
    y0 = max(0, math.floor(box.y))
    x1 = min(img.width, math.ceil(box.x + box.w))
    y1 = min(img.height, math.ceil(box.y + box.h))
    if x1 - x0 < MIN_SIDE or y1 - y0 < MIN_SIDE:
        raise EmptyCrop(f"crop of {box} is empty or smaller than {MIN_SIDE}x{MIN_SIDE}")
    return RgbImage(img.pixels[y0:y1, x0:x1].copy())


@dataclass
class CategoryDatabase:
    shards: ShardSet
    codebook: Codebook

    def __post_init__(self) -> None:
        if self.shards.codebook_id != self.codebook.id:
            raise ConfigError("shard set and codebook do not match")

    def retrieve(self, img: RgbImage, top_k: int):
        """Describe ``img``, quantize it and search; returns a :class:`SearchOutcome`."""
        sig = quantize(describe_image(img), self.codebook)
        return self.shards.search(sig, top_k)


class CategoryDatabases(Mapping[str, CategoryDatabase]):
    def __init__(self, dbs: Mapping[str, CategoryDatabase]):
        self._dbs = dict(dbs)

    def __getitem__(self, key: str) -> CategoryDatabase:
        return self._dbs[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._dbs)

    def __len__(self) -> int:
        return len(self._dbs)


def load_database_registry(path: str | Path) -> CategoryDatabases:
    """Read ``category<TAB>shard manifest<TAB>codebook`` lines; relative paths resolve against the file."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read database registry {path}: {exc}") from exc
    codebooks: dict[Path, Codebook] = {}
    dbs = {}
    for n, line in enumerate(lines, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ConfigError(f"{path}:{n}: expected category, manifest and codebook separated by tabs")
        category, manifest, cb_path = parts
        manifest_path = path.parent / manifest
        cb_file = (path.parent / cb_path).resolve()
        try:
            if cb_file not in codebooks:
                codebooks[cb_file] = Codebook.load(cb_file)
            dbs[category] = CategoryDatabase(load_shard_set(manifest_path), codebooks[cb_file])
        except (OSError, CxSearchError) as exc:
            raise ConfigError(f"{path}:{n}: cannot load database {category!r}: {exc}") from exc
    return CategoryDatabases(dbs)


@dataclass(frozen=True)
class SearchOptions:
    model: str | None = None
    conf_thresh: float = 0.0
    top_k: int = 10
    exclusions: tuple[tuple[str, str], ...] = DEFAULT_EXCLUSIONS
    exclusion_iou: float = DEFAULT_IOU
    concurrent: bool = True


@dataclass
class ResultGroup:
    category: str
    confidence: float
    box: BBox
    ranked: list[RankedResult] = field(default_factory=list)
    degraded: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "confidence": self.confidence,
            "box": self.box.to_dict(),
            "results": [{"image_id": r.image_id, "distance": r.distance} for r in self.ranked],
            "degraded": self.degraded,
            "error": self.error,
        }


@dataclass
class MultiSearchResult:
    groups: list[ResultGroup]
    degraded: bool
    wall_time: float

    def to_dict(self) -> dict:
        return {"groups": [g.to_dict() for g in self.groups], "degraded": self.degraded}


def _retrieve_group(img: RgbImage, det, dbs: Mapping[str, CategoryDatabase], top_k: int) -> tuple[ResultGroup, bool]:
    """One detection's branch; returns the group and whether every shard of its database was down."""
    group = ResultGroup(det.category, det.confidence, det.box)
    db = dbs.get(det.category)
    if db is None:
        group.error = f"no database for category {det.category!r}"
        return group, False
    try:
        outcome = db.retrieve(crop(img, det.box), top_k)
    except NoShardsAvailable as exc:
        group.error = f"no_shards_available: {exc}"
        group.degraded = True
        return group, True
    except CxSearchError as exc:
        group.error = f"{type(exc).__name__}: {exc}"
        return group, False
    group.ranked = outcome.results
    group.degraded = outcome.degraded
    return group, False


def multi_search(
    img: RgbImage,
    dbs: Mapping[str, CategoryDatabase],
    reg: DetectorRegistry,
    opts: SearchOptions = SearchOptions(),
) -> MultiSearchResult:
    """Localise then retrieve, one branch per surviving detection.

    Per-detection failures become an empty ranked list with an error note.
    Raises NoShardsAvailable only when every queried database is fully down.
    """
    start = time.perf_counter()
    dets = detect(reg, opts.model, img, opts.conf_thresh)
    dets = resolve_exclusions(dets, opts.exclusions, opts.exclusion_iou)
    if opts.concurrent and len(dets) > 1:
        with ThreadPoolExecutor(max_workers=len(dets), thread_name_prefix="multisearch") as pool:
            branches = list(pool.map(lambda d: _retrieve_group(img, d, dbs, opts.top_k), dets))
    else:
        branches = [_retrieve_group(img, d, dbs, opts.top_k) for d in dets]
    groups = [g for g, _ in branches]
    queried = [down for g, down in branches if g.category in dbs]
    if queried and all(queried):
        raise NoShardsAvailable("every queried database is unavailable")
    return MultiSearchResult(groups, any(g.degraded for g in groups), time.perf_counter() - start)
