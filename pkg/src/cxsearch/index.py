"""Word-keyed inverted index, word-range sharding and fan-out chi-squared search.

Chi-squared between L1-normalized histograms q and d decomposes as

    chi2(q, d) = 2 - 4 * sum over shared words of q_w * d_w / (q_w + d_w)

so each shard only touches the posting lists of the query's own words and
returns partial sums; the merge adds them and converts to a distance.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cxsearch.errors import CodebookMismatch, CorruptIndex, DuplicateImageId, NoShardsAvailable
from cxsearch.signature import ID_BYTES, Signature
from cxsearch.varint import decode_uvarint, decode_uvarints, encode_uvarint, encode_uvarints

log = logging.getLogger(__name__)

INDEX_MAGIC = b"CXIX"
INDEX_VERSION = 1
CHECKSUM_BYTES = 8
MANIFEST_HEADER = "# cxsearch-shards"
_FIXED_SCALE = float(2**52)
# far above accumulated rounding (~1e-14), far below any meaningful distance gap
TIE_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class InvertedIndex:
    """Postings for word ids in ``[lo, hi)``.

    ``offsets[w - lo]`` is where word ``w`` starts in the flat ``image_ids`` /
    ``weights`` arrays; within a word postings are sorted by image id.
    """

    codebook_id: bytes
    word_range: tuple[int, int]
    offsets: np.ndarray
    image_ids: np.ndarray
    weights: np.ndarray
    image_norms: dict[int, int] = field(default_factory=dict)
    # dense renumbering of image ids, used by the accumulator
    _table: np.ndarray = field(init=False, repr=False)
    _post_doc: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        lo, hi = self.word_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad word range {self.word_range}")
        if len(self.offsets) != hi - lo + 1:
            raise ValueError("offsets must have hi - lo + 1 entries")
        for name in ("offsets", "image_ids", "weights"):
            getattr(self, name).setflags(write=False)
        table, post_doc = np.unique(self.image_ids, return_inverse=True)
        object.__setattr__(self, "_table", table)
        object.__setattr__(self, "_post_doc", post_doc.astype(np.int64).reshape(-1))

    @property
    def n_postings(self) -> int:
        return len(self.image_ids)

    def postings(self, word: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.word_range
        if not lo <= word < hi:
            raise KeyError(word)
        a, b = self.offsets[word - lo], self.offsets[word - lo + 1]
        return self.image_ids[a:b], self.weights[a:b]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        return (
            self.codebook_id == other.codebook_id
            and tuple(self.word_range) == tuple(other.word_range)
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.image_ids, other.image_ids)
            and np.array_equal(self.weights, other.weights)
            and self.image_norms == other.image_norms
        )

    def accumulate(self, q: Signature) -> tuple[np.ndarray, np.ndarray]:
        """Partial similarities for images sharing a word with ``q`` in this range.

        Returns ``(image_ids, partial_sims)`` sorted by image id.
        """
        if q.codebook_id != self.codebook_id:
            raise CodebookMismatch("query signature and index use different codebooks")
        lo, hi = self.word_range
        sel = (q.words >= lo) & (q.words < hi)
        words = q.words[sel] - lo
        qw = q.weights()[sel]
        starts = self.offsets[words]
        lengths = self.offsets[words + 1] - starts
        keep = lengths > 0
        starts, lengths, qw = starts[keep], lengths[keep], qw[keep]
        n = int(lengths.sum())
        if n == 0:
            return np.zeros(0, dtype=np.uint64), np.zeros(0)
        # positions of every posting of every query word, in word order
        pos = np.repeat(starts - np.cumsum(lengths) + lengths, lengths) + np.arange(n)
        qrep = np.repeat(qw, lengths)
        d = self.weights[pos]
        # snap to multiples of 2**-52: every partial sum below 1 is then exact, so
        # totals are bit-identical for any shard split or merge order
        contrib = np.rint(qrep * d / (qrep + d) * _FIXED_SCALE) / _FIXED_SCALE
        sims = np.bincount(self._post_doc[pos], weights=contrib, minlength=len(self._table))
        hit = np.flatnonzero(sims > 0)
        return self._table[hit], sims[hit]


def _as_id_array(ids: Iterable[int]) -> np.ndarray:
    ids = list(ids)
    for i in ids:
        if not 0 <= int(i) < 2**64:
            raise ValueError(f"image id {i} is not an unsigned 64-bit integer")
    return np.array(ids, dtype=np.uint64)


def build_index(
    sigs: Sequence[tuple[int, Signature]],
    word_range: tuple[int, int],
    codebook_id: bytes | None = None,
) -> InvertedIndex:
    """Transpose signatures into postings for the words in ``word_range``."""
    if codebook_id is None:
        if not sigs:
            raise ValueError("codebook_id is required to build an empty index")
        codebook_id = sigs[0][1].codebook_id
    lo, hi = word_range
    seen: set[int] = set()
    for image_id, sig in sigs:
        if sig.codebook_id != codebook_id:
            raise CodebookMismatch(f"image {image_id} was quantized with a different codebook")
        if image_id in seen:
            raise DuplicateImageId(f"image id {image_id} appears twice")
        seen.add(image_id)

    if sigs:
        lengths = np.array([len(s) for _, s in sigs])
        ids = np.repeat(_as_id_array(i for i, _ in sigs), lengths)
        words = np.concatenate([s.words for _, s in sigs])
        weights = np.concatenate([s.weights() for _, s in sigs])
    else:
        ids = np.zeros(0, dtype=np.uint64)
        words = np.zeros(0, dtype=np.int64)
        weights = np.zeros(0)
    sel = (words >= lo) & (words < hi)
    ids, words, weights = ids[sel], words[sel], weights[sel]
    order = np.lexsort((ids, words))
    ids, words, weights = ids[order], words[order], weights[order]
    offsets = np.zeros(hi - lo + 1, dtype=np.int64)
    np.cumsum(np.bincount(words - lo, minlength=hi - lo), out=offsets[1:])
    norms = {int(i): s.total for i, s in sigs}
    return InvertedIndex(bytes(codebook_id), (lo, hi), offsets, ids, weights, norms)


def query_shard(idx: InvertedIndex, q: Signature) -> dict[int, float]:
    ids, sims = idx.accumulate(q)
    return dict(zip(ids.tolist(), sims.tolist()))


def shard_ranges(k: int, n: int) -> list[tuple[int, int]]:
    """``n`` contiguous ranges of width ``ceil(k / n)`` covering ``[0, k)``; trailing ones may be empty."""
    if n < 1:
        raise ValueError("need at least one shard")
    width = math.ceil(k / n)
    return [(min(i * width, k), min((i + 1) * width, k)) for i in range(n)]


def slice_index(idx: InvertedIndex, word_range: tuple[int, int]) -> InvertedIndex:
    lo, hi = word_range
    base = idx.word_range[0]
    if not (idx.word_range[0] <= lo <= hi <= idx.word_range[1]):
        raise ValueError(f"{word_range} is outside {idx.word_range}")
    offs = idx.offsets[lo - base : hi - base + 1]
    a, b = int(offs[0]), int(offs[-1])
    present = set(np.unique(idx.image_ids[a:b]).tolist())
    norms = {i: t for i, t in idx.image_norms.items() if i in present}
    return InvertedIndex(
        idx.codebook_id, (lo, hi), offs - a, idx.image_ids[a:b].copy(), idx.weights[a:b].copy(), norms
    )


def build_shards(
    sigs: Sequence[tuple[int, Signature]], k: int, n_shards: int, codebook_id: bytes | None = None
) -> list[InvertedIndex]:
    full = build_index(sigs, (0, k), codebook_id)
    return [slice_index(full, r) for r in shard_ranges(k, n_shards)]


@dataclass(frozen=True)
class RankedResult:
    image_id: int
    distance: float
    degraded: bool = False


@dataclass
class SearchOutcome:
    results: list[RankedResult]
    degraded: bool
    unavailable: list[int]


@dataclass
class Shard:
    word_range: tuple[int, int]
    index: InvertedIndex | None
    source: str | None = None
    endpoint: str | None = None
    available: bool = True

    @property
    def usable(self) -> bool:
        return self.available and self.index is not None


class ShardSet:
    """Shards with disjoint contiguous word ranges covering ``[0, k)``.

    Queries fan out to every usable shard on a thread pool; the merge runs once
    all of them report, so results do not depend on scheduling.
    """

    def __init__(self, k: int, codebook_id: bytes, shards: Sequence[Shard | InvertedIndex], max_workers: int | None = None):
        self.k = k
        self.codebook_id = codebook_id
        self.shards = [s if isinstance(s, Shard) else Shard(s.word_range, s) for s in shards]
        expected = 0
        for s in sorted(self.shards, key=lambda s: s.word_range):
            lo, hi = s.word_range
            if lo != expected:
                raise ValueError(f"shard ranges do not partition [0, {k}): gap or overlap at {expected}")
            expected = hi
            if s.index is not None:
                if s.index.codebook_id != codebook_id:
                    raise CodebookMismatch(f"shard {s.word_range} uses a different codebook")
                if tuple(s.index.word_range) != (lo, hi):
                    raise ValueError(f"shard declares {s.word_range} but holds {s.index.word_range}")
        if expected != k:
            raise ValueError(f"shard ranges end at {expected}, expected {k}")
        self._pool = ThreadPoolExecutor(max_workers=max_workers or max(1, len(self.shards)), thread_name_prefix="shard")

    @classmethod
    def from_indexes(cls, indexes: Sequence[InvertedIndex], k: int | None = None) -> ShardSet:
        k = k if k is not None else max(i.word_range[1] for i in indexes)
        return cls(k, indexes[0].codebook_id, list(indexes))

    def set_available(self, i: int, available: bool) -> None:
        self.shards[i].available = available

    @property
    def availability(self) -> list[bool]:
        return [s.usable for s in self.shards]

    @property
    def n_images(self) -> int:
        ids = set()
        for s in self.shards:
            if s.index is not None:
                ids.update(s.index.image_norms)
        return len(ids)

    def close(self) -> None:
        self._pool.shutdown(wait=True)

    def search(self, q: Signature, top_k: int) -> SearchOutcome:
        if top_k < 1:
            raise ValueError("top_k must be >= 1")
        if q.codebook_id != self.codebook_id:
            raise CodebookMismatch("query signature and shard set use different codebooks")
        live = [s for s in self.shards if s.usable]
        down = [i for i, s in enumerate(self.shards) if not s.usable]
        if not live:
            raise NoShardsAvailable("every shard is unavailable")
        if len(live) == 1:
            parts = [live[0].index.accumulate(q)]
        else:
            parts = list(self._pool.map(lambda s: s.index.accumulate(q), live))
        ids, sims = merge_partials(parts)
        degraded = bool(down)
        dist = np.clip(2.0 - 4.0 * sims, 0.0, 2.0)
        order = _rank(ids, dist)[:top_k]
        results = [RankedResult(int(i), float(d), degraded) for i, d in zip(ids[order].tolist(), dist[order].tolist())]
        return SearchOutcome(results, degraded, down)


def _rank(ids: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Order by distance, then image id, treating distances within TIE_EPS as equal.

    Images with exactly equal chi-squared can come out an ulp apart when their
    shared words differ, so exact float comparison would order true ties by
    rounding noise instead of by id.
    """
    order = np.lexsort((ids, dist))
    if len(order) < 2:
        return order
    d = dist[order]
    run = np.cumsum(np.concatenate([[True], np.diff(d) > TIE_EPS]))
    return order[np.lexsort((ids[order], run))]


def merge_partials(parts: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    """Sum per-image partial similarities from several shards."""
    parts = [p for p in parts if len(p[0])]
    if not parts:
        return np.zeros(0, dtype=np.uint64), np.zeros(0)
    if len(parts) == 1:
        return parts[0]
    ids = np.concatenate([p[0] for p in parts])
    sims = np.concatenate([p[1] for p in parts])
    uniq, inv = np.unique(ids, return_inverse=True)
    return uniq, np.bincount(inv.reshape(-1), weights=sims, minlength=len(uniq))


def query(shard_set: ShardSet, q: Signature, top_k: int) -> list[RankedResult]:
    return shard_set.search(q, top_k).results


# -- serialization ---------------------------------------------------------


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=CHECKSUM_BYTES).digest()


def index_to_bytes(idx: InvertedIndex) -> bytes:
    lo, hi = idx.word_range
    # image ids as deltas, restarting at every word boundary
    ids = idx.image_ids
    deltas = ids.copy()
    if len(ids):
        deltas[1:] = ids[1:] - ids[:-1]
        starts = idx.offsets[:-1][np.diff(idx.offsets) > 0]
        deltas[starts] = ids[starts]
    norm_ids = np.array(sorted(idx.image_norms), dtype=np.uint64)
    norm_deltas = np.diff(norm_ids, prepend=np.uint64(0)) if len(norm_ids) else norm_ids
    norm_totals = np.array([idx.image_norms[i] for i in norm_ids.tolist()], dtype=np.int64)
    payload = b"".join(
        [
            INDEX_MAGIC,
            bytes([INDEX_VERSION]),
            idx.codebook_id,
            encode_uvarint(lo),
            encode_uvarint(hi),
            encode_uvarints(np.diff(idx.offsets, prepend=0)),
            encode_uvarints(deltas),
            np.asarray(idx.weights, dtype="<f8").tobytes(),
            encode_uvarint(len(norm_ids)),
            encode_uvarints(norm_deltas),
            encode_uvarints(norm_totals),
        ]
    )
    return payload + _checksum(payload)


def index_from_bytes(blob: bytes) -> InvertedIndex:
    header = 4 + 1 + ID_BYTES
    if len(blob) < header + CHECKSUM_BYTES or blob[:4] != INDEX_MAGIC:
        raise CorruptIndex("bad index magic or truncated header")
    if blob[4] != INDEX_VERSION:
        raise CorruptIndex(f"unsupported index version {blob[4]}")
    payload, trailer = blob[:-CHECKSUM_BYTES], blob[-CHECKSUM_BYTES:]
    if _checksum(payload) != trailer:
        raise CorruptIndex("index checksum mismatch")
    codebook_id = bytes(payload[5:header])
    try:
        lo, pos = decode_uvarint(payload, header)
        hi, pos = decode_uvarint(payload, pos)
        if hi < lo:
            raise ValueError("inverted word range")
        off_deltas, pos = decode_uvarints(payload, pos, hi - lo + 1)
        offsets = np.cumsum(off_deltas.astype(np.int64))
        n = int(offsets[-1])
        id_deltas, pos = decode_uvarints(payload, pos, n)
        if pos + 8 * n > len(payload):
            raise ValueError("truncated weights")
        weights = np.frombuffer(payload, dtype="<f8", count=n, offset=pos).astype(np.float64)
        pos += 8 * n
        n_norms, pos = decode_uvarint(payload, pos)
        norm_deltas, pos = decode_uvarints(payload, pos, n_norms)
        norm_totals, pos = decode_uvarints(payload, pos, n_norms)
    except ValueError as exc:
        raise CorruptIndex(str(exc)) from exc
    if pos != len(payload):
        raise CorruptIndex("trailing bytes in index payload")
    # undo the per-word delta coding: a global running sum minus the sum reached
    # before each word starts (uint64 wrap-around cancels out)
    running = np.cumsum(id_deltas, dtype=np.uint64)
    lengths = np.diff(offsets)
    starts = offsets[:-1][lengths > 0]
    base = np.zeros(len(starts), dtype=np.uint64)
    base[starts > 0] = running[starts[starts > 0] - 1]
    ids = running - np.repeat(base, lengths[lengths > 0])
    norm_ids = np.cumsum(norm_deltas, dtype=np.uint64)
    norms = dict(zip(norm_ids.tolist(), norm_totals.astype(np.int64).tolist()))
    return InvertedIndex(codebook_id, (lo, hi), offsets, ids, weights, norms)


def save_index(idx: InvertedIndex, path: str | Path) -> None:
    Path(path).write_bytes(index_to_bytes(idx))


def load_index(path: str | Path, codebook_id: bytes | None = None) -> InvertedIndex:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptIndex(f"cannot read index {path}: {exc}") from exc
    idx = index_from_bytes(blob)
    if codebook_id is not None and idx.codebook_id != codebook_id:
        raise CodebookMismatch(f"index {path} was built with a different codebook")
    return idx


# -- shard manifest --------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    word_range: tuple[int, int]
    endpoint: str | None = None


@dataclass(frozen=True)
class ShardManifest:
    k: int
    codebook_id: bytes
    entries: tuple[ManifestEntry, ...]


def write_manifest(path: str | Path, manifest: ShardManifest) -> None:
    lines = [f"{MANIFEST_HEADER} k={manifest.k} codebook={manifest.codebook_id.hex()}"]
    for e in manifest.entries:
        lines.append(f"{e.path}\t{e.word_range[0]}\t{e.word_range[1]}\t{e.endpoint or '-'}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> ShardManifest:
    """Parse a shard manifest: a header line, then ``path<TAB>lo<TAB>hi<TAB>endpoint|-``."""
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(MANIFEST_HEADER):
        raise CorruptIndex(f"{path}: missing shard manifest header")
    try:
        fields = dict(kv.split("=", 1) for kv in text[0][len(MANIFEST_HEADER) :].split())
        k = int(fields["k"])
        codebook_id = bytes.fromhex(fields["codebook"])
        entries = []
        for line in text[1:]:
            if not line.strip() or line.startswith("#"):
                continue
            shard_path, lo, hi, endpoint = line.split("\t")
            entries.append(ManifestEntry(shard_path, (int(lo), int(hi)), None if endpoint == "-" else endpoint))
    except (KeyError, ValueError) as exc:
        raise CorruptIndex(f"{path}: malformed shard manifest ({exc})") from exc
    return ShardManifest(k, codebook_id, tuple(entries))


def load_shard_set(manifest_path: str | Path) -> ShardSet:
    """Load every shard listed in a manifest.

    Missing or corrupt shard files do not fail the load; the shard is marked
    unavailable and queries run degraded. Endpoint-only entries are recorded
    but not contacted.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    shards = []
    for e in manifest.entries:
        shard_path = Path(e.path)
        if not shard_path.is_absolute():
            shard_path = manifest_path.parent / shard_path
        idx = None
        try:
            idx = load_index(shard_path, manifest.codebook_id)
        except (CorruptIndex, CodebookMismatch) as exc:
            log.warning("shard %s unavailable: %s", shard_path, exc)
        shards.append(Shard(e.word_range, idx, str(shard_path), e.endpoint, available=idx is not None))
    return ShardSet(manifest.k, manifest.codebook_id, shards)


def write_shards(
    shards: Sequence[InvertedIndex], k: int, out_dir: str | Path, stem: str = "shard"
) -> Path:
    """Save shards as ``<stem>-NNN.cxix`` next to a ``shards.manifest``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, idx in enumerate(shards):
        name = f"{stem}-{i:03d}.cxix"
        save_index(idx, out_dir / name)
        entries.append(ManifestEntry(name, tuple(idx.word_range)))
    manifest_path = out_dir / "shards.manifest"
    write_manifest(manifest_path, ShardManifest(k, shards[0].codebook_id, tuple(entries)))
    return manifest_path
