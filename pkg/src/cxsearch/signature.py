"""Codebook training, bag-of-words quantization, signature encoding and chi-squared distance."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from cxsearch.errors import (
    CodebookMismatch,
    CorruptCodebook,
    CorruptSignature,
    EmptyDescriptorSet,
    InsufficientSamples,
)
from cxsearch.varint import decode_uvarint, decode_uvarints, encode_uvarint, encode_uvarints

DEFAULT_K = 5000
ID_BYTES = 8
SIGNATURE_MAGIC = b"CXSG"
CODEBOOK_MAGIC = b"CXCB"
FORMAT_VERSION = 1

KMEANS_TOL = 1e-4
KMEANS_MAX_ITER = 100
_BLOCK = 2048


def content_id(*parts: bytes) -> bytes:
    h = hashlib.blake2b(digest_size=ID_BYTES)
    for p in parts:
        h.update(p)
    return h.digest()


@dataclass(frozen=True, eq=False)
class Codebook:
    """k-means centres, stored as float32 so the on-disk form is exact."""

    centres: np.ndarray
    id: bytes = field(init=False)

    def __post_init__(self) -> None:
        centres = np.ascontiguousarray(self.centres, dtype="<f4")
        if centres.ndim != 2 or centres.shape[0] < 2:
            raise ValueError("codebook needs a (k >= 2, dim) centre matrix")
        centres.setflags(write=False)
        object.__setattr__(self, "centres", centres)
        object.__setattr__(self, "id", content_id(self._shape_header(), centres.tobytes()))

    @property
    def k(self) -> int:
        return self.centres.shape[0]

    @property
    def dim(self) -> int:
        return self.centres.shape[1]

    def _shape_header(self) -> bytes:
        return encode_uvarint(self.centres.shape[0]) + encode_uvarint(self.centres.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Codebook):
            return NotImplemented
        return self.id == other.id and np.array_equal(self.centres, other.centres)

    def __hash__(self) -> int:
        return hash(self.id)

    def to_bytes(self) -> bytes:
        return b"".join(
            [CODEBOOK_MAGIC, bytes([FORMAT_VERSION]), self._shape_header(), self.centres.tobytes(), self.id]
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> Codebook:
        if blob[:4] != CODEBOOK_MAGIC:
            raise CorruptCodebook("bad codebook magic")
        if len(blob) < 5 or blob[4] != FORMAT_VERSION:
            raise CorruptCodebook("unsupported codebook version")
        try:
            k, pos = decode_uvarint(blob, 5)
            dim, pos = decode_uvarint(blob, pos)
        except ValueError as exc:
            raise CorruptCodebook(str(exc)) from exc
        n = k * dim * 4
        if len(blob) != pos + n + ID_BYTES:
            raise CorruptCodebook("codebook length does not match its header")
        centres = np.frombuffer(blob, dtype="<f4", count=k * dim, offset=pos).reshape(k, dim)
        cb = cls(centres)
        if cb.id != blob[pos + n :]:
            raise CorruptCodebook("codebook content hash mismatch")
        return cb

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Codebook:
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class KMeansResult:
    centres: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int


def _sq_distances(x: np.ndarray, c: np.ndarray, c_sq: np.ndarray | None = None) -> np.ndarray:
    if c_sq is None:
        c_sq = np.einsum("ij,ij->i", c, c)
    d = np.einsum("ij,ij->i", x, x)[:, None] - 2.0 * (x @ c.T) + c_sq[None, :]
    return np.maximum(d, 0.0)


def _assign(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centre labels and squared distances, block-wise over rows."""
    c_sq = np.einsum("ij,ij->i", c, c)
    labels = np.empty(len(x), dtype=np.int64)
    dists = np.empty(len(x))
    for start in range(0, len(x), _BLOCK):
        d = _sq_distances(x[start : start + _BLOCK], c, c_sq)
        lab = d.argmin(axis=1)
        labels[start : start + _BLOCK] = lab
        dists[start : start + _BLOCK] = d[np.arange(len(lab)), lab]
    return labels, dists


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centres = np.empty((k, x.shape[1]))
    x_sq = np.einsum("ij,ij->i", x, x)

    def dist_to(c: np.ndarray) -> np.ndarray:
        return np.maximum(x_sq - 2.0 * (x @ c) + c @ c, 0.0)

    centres[0] = x[rng.integers(n)]
    closest = dist_to(centres[0])
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # every sample already coincides with a centre
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centres[i] = x[idx]
        np.minimum(closest, dist_to(centres[i]), out=closest)
    return centres


def fit_kmeans(
    samples: np.ndarray,
    k: int,
    seed: int,
    tol: float = KMEANS_TOL,
    max_iter: int = KMEANS_MAX_ITER,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the largest centre shift drops below ``tol`` or after ``max_iter``
    iterations. Empty clusters keep their previous centre.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be a 2-D array")
    if len(x) < k:
        raise InsufficientSamples(f"need at least k={k} samples, got {len(x)}")
    rng = np.random.default_rng(seed)
    centres = _kmeans_pp(x, k, rng)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels, _ = _assign(x, centres)
        counts = np.bincount(labels, minlength=k)
        members = sparse.csr_matrix((np.ones(len(x)), (labels, np.arange(len(x)))), shape=(k, len(x)))
        sums = members @ x
        new = centres.copy()
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        shift = float(np.sqrt(((new - centres) ** 2).sum(axis=1)).max())
        centres = new
        if shift < tol:
            break
    labels, dists = _assign(x, centres)
    return KMeansResult(centres, labels, float(dists.sum()), n_iter)


def train_codebook(samples: np.ndarray | Sequence[np.ndarray], k: int = DEFAULT_K, seed: int = 0) -> Codebook:
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < k:
        raise InsufficientSamples(f"need at least k={k} samples, got {len(samples)}")
    return Codebook(fit_kmeans(samples, k, seed).centres)


class Signature:
    """Sparse bag of words: strictly increasing word ids with positive counts."""

    __slots__ = ("codebook_id", "words", "counts")

    def __init__(self, codebook_id: bytes, words: Iterable[int], counts: Iterable[int]):
        words = np.array(list(words) if not isinstance(words, np.ndarray) else words, dtype=np.int64)
        counts = np.array(list(counts) if not isinstance(counts, np.ndarray) else counts, dtype=np.int64)
        if words.shape != counts.shape or words.ndim != 1:
            raise ValueError("words and counts must be 1-D and equal length")
        if len(words) and ((words[0] < 0) or (np.diff(words) <= 0).any()):
            raise ValueError("word ids must be non-negative and strictly increasing")
        if (counts < 1).any():
            raise ValueError("counts must be >= 1")
        if len(codebook_id) != ID_BYTES:
            raise ValueError(f"codebook id must be {ID_BYTES} bytes")
        words.setflags(write=False)
        counts.setflags(write=False)
        self.codebook_id = bytes(codebook_id)
        self.words = words
        self.counts = counts

    @classmethod
    def from_entries(cls, codebook_id: bytes, entries: Iterable[tuple[int, int]]) -> Signature:
        entries = sorted(entries)
        return cls(codebook_id, [w for w, _ in entries], [c for _, c in entries])

    @property
    def entries(self) -> list[tuple[int, int]]:
        return list(zip(self.words.tolist(), self.counts.tolist()))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def weights(self) -> np.ndarray:
        return self.counts / float(self.counts.sum())

    def dense(self, k: int) -> np.ndarray:
        out = np.zeros(k)
        out[self.words] = self.weights()
        return out

    def __len__(self) -> int:
        return len(self.words)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Signature):
            return NotImplemented
        return (
            self.codebook_id == other.codebook_id
            and np.array_equal(self.words, other.words)
            and np.array_equal(self.counts, other.counts)
        )

    def __repr__(self) -> str:
        return f"Signature(codebook_id={self.codebook_id.hex()}, entries={len(self)}, total={self.total})"


def nearest_centres(descs: np.ndarray, cb: Codebook) -> np.ndarray:
    """Index of the nearest centre per row; exact ties go to the lowest index."""
    x = np.asarray(descs, dtype=np.float64)
    c = cb.centres.astype(np.float64)
    c_sq = np.einsum("ij,ij->i", c, c)
    labels = np.empty(len(x), dtype=np.int64)
    for start in range(0, len(x), _BLOCK):
        xb = x[start : start + _BLOCK]
        d = _sq_distances(xb, c, c_sq)
        best = d.min(axis=1)
        # expanded-form rounding can hide or fake ties; re-check close calls exactly
        tol = 1e-9 * (np.einsum("ij,ij->i", xb, xb) + c_sq.max() + 1.0)
        close = d <= (best + tol)[:, None]
        lab = d.argmin(axis=1)
        for row in np.flatnonzero(close.sum(axis=1) > 1):
            cand = np.flatnonzero(close[row])
            exact = ((c[cand] - xb[row]) ** 2).sum(axis=1)
            lab[row] = cand[int(np.argmin(exact))]
        labels[start : start + _BLOCK] = lab
    return labels


def quantize(descs: np.ndarray, cb: Codebook) -> Signature:
    """Hard-assign each descriptor to its nearest centre and count words."""
    descs = np.asarray(descs, dtype=np.float64)
    if descs.size == 0 or len(descs) == 0:
        raise EmptyDescriptorSet("no descriptors to quantize")
    if descs.ndim != 2 or descs.shape[1] != cb.dim:
        raise ValueError(f"descriptors must have shape (n, {cb.dim})")
    words, counts = np.unique(nearest_centres(descs, cb), return_counts=True)
    return Signature(cb.id, words, counts)


def encode(sig: Signature) -> bytes:
    """Binary form: magic, version, codebook id, entry count, then (word delta, count) varints."""
    deltas = np.diff(sig.words, prepend=0)
    body = np.empty(2 * len(sig), dtype=np.int64)
    body[0::2] = deltas
    body[1::2] = sig.counts
    return b"".join(
        [SIGNATURE_MAGIC, bytes([FORMAT_VERSION]), sig.codebook_id, encode_uvarint(len(sig)), encode_uvarints(body)]
    )


def decode_from(blob: bytes | memoryview, pos: int = 0, codebook_id: bytes | None = None) -> tuple[Signature, int]:
    """Decode one signature at ``pos``; returns it and the offset just past it."""
    header = 4 + 1 + ID_BYTES
    if len(blob) < pos + header:
        raise CorruptSignature("truncated signature header")
    if bytes(blob[pos : pos + 4]) != SIGNATURE_MAGIC:
        raise CorruptSignature("bad signature magic")
    if blob[pos + 4] != FORMAT_VERSION:
        raise CorruptSignature(f"unsupported signature version {blob[pos + 4]}")
    cb_id = bytes(blob[pos + 5 : pos + header])
    if codebook_id is not None and cb_id != codebook_id:
        raise CorruptSignature("signature was built with a different codebook")
    try:
        n, cur = decode_uvarint(blob, pos + header)
        body, cur = decode_uvarints(blob, cur, 2 * n)
    except ValueError as exc:
        raise CorruptSignature(str(exc)) from exc
    deltas = body[0::2].astype(np.int64)
    counts = body[1::2].astype(np.int64)
    if n and ((deltas[1:] == 0).any() or (counts == 0).any()):
        raise CorruptSignature("invalid signature entries")
    return Signature(cb_id, np.cumsum(deltas), counts), cur


def decode(blob: bytes, codebook_id: bytes | None = None) -> Signature:
    sig, end = decode_from(blob, 0, codebook_id)
    if end != len(blob):
        raise CorruptSignature(f"{len(blob) - end} trailing bytes after signature")
    return sig


def _check_pair(a: Signature, b: Signature) -> None:
    if a.codebook_id != b.codebook_id:
        raise CodebookMismatch("signatures come from different codebooks")
    if a.total <= 0 or b.total <= 0:
        raise ValueError("signatures must be non-empty")


def chi_squared(a: Signature, b: Signature) -> float:
    """Unhalved chi-squared distance of the L1-normalized word histograms, in [0, 2]."""
    _check_pair(a, b)
    words = np.union1d(a.words, b.words)
    q = np.zeros(len(words))
    d = np.zeros(len(words))
    q[np.searchsorted(words, a.words)] = a.weights()
    d[np.searchsorted(words, b.words)] = b.weights()
    # the sum is bounded by 2 mathematically; rounding can overshoot by an ulp
    return float(min(np.sum((q - d) ** 2 / (q + d)), 2.0))


def shared_similarity(a: Signature, b: Signature) -> float:
    """Sum of q*d/(q+d) over the words both signatures contain."""
    _check_pair(a, b)
    shared, ia, ib = np.intersect1d(a.words, b.words, assume_unique=True, return_indices=True)
    q = a.weights()[ia]
    d = b.weights()[ib]
    return float(np.sum(q * d / (q + d)))


def chi_squared_from_shared(a: Signature, b: Signature) -> float:
    """Chi-squared via ``2 - 4 * shared_similarity``; what the inverted index evaluates."""
    return 2.0 - 4.0 * shared_similarity(a, b)


def dense_chi_squared(q: np.ndarray, d: np.ndarray) -> float:
    """Chi-squared of two dense non-negative vectors; 0/0 terms contribute 0."""
    s = q + d
    nz = s > 0
    return float(np.sum((q[nz] - d[nz]) ** 2 / s[nz]))


__all__ = [
    "Codebook",
    "KMeansResult",
    "Signature",
    "chi_squared",
    "chi_squared_from_shared",
    "decode",
    "decode_from",
    "dense_chi_squared",
    "encode",
    "fit_kmeans",
    "quantize",
    "shared_similarity",
    "train_codebook",
]
