import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from cxsearch.descriptor import DESCRIPTOR_DIM
from cxsearch.errors import CodebookMismatch, CorruptCodebook, CorruptSignature, EmptyDescriptorSet, InsufficientSamples
from cxsearch.signature import (
    Codebook,
    Signature,
    chi_squared,
    chi_squared_from_shared,
    decode,
    decode_from,
    dense_chi_squared,
    encode,
    fit_kmeans,
    nearest_centres,
    quantize,
    shared_similarity,
    train_codebook,
)

CID = bytes(range(8))
OTHER = b"\xff" * 8


def _lift(points) -> np.ndarray:
    out = np.zeros((len(points), DESCRIPTOR_DIM))
    out[:, : len(points[0])] = points
    return out


@st.composite
def signatures(draw, k=300, max_words=60, cid=CID):
    words = draw(st.lists(st.integers(0, k - 1), min_size=1, max_size=max_words, unique=True))
    counts = draw(st.lists(st.integers(1, 20), min_size=len(words), max_size=len(words)))
    return Signature.from_entries(cid, zip(words, counts))


# -- codebook -----------------------------------------------------------------


def test_kmeans_two_separated_clusters_by_hand():
    pts = _lift([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
    cb = train_codebook(pts, k=2, seed=0)
    got = sorted(map(tuple, cb.centres[:, :2].tolist()))
    assert got == [(0.0, 0.5), (10.0, 10.5)]
    assert not cb.centres[:, 2:].any()


def test_kmeans_inertia_and_labels_by_hand():
    pts = _lift([[0.0, 0.0], [0.0, 1.0], [10.0, 10.0], [10.0, 11.0]])
    res = fit_kmeans(pts, 2, seed=3)
    assert res.inertia == pytest.approx(4 * 0.25)
    assert res.labels[0] == res.labels[1] != res.labels[2] == res.labels[3]


def test_insufficient_samples():
    with pytest.raises(InsufficientSamples):
        train_codebook(np.zeros((100, DESCRIPTOR_DIM)), k=5000, seed=0)


def test_codebook_training_is_deterministic(rng):
    x = rng.random((300, DESCRIPTOR_DIM))
    a = train_codebook(x, k=16, seed=7)
    b = train_codebook(x, k=16, seed=7)
    assert a.to_bytes() == b.to_bytes()
    assert a.id == b.id
    assert train_codebook(x, k=16, seed=8).id != a.id


def test_kmeans_matches_reference_lloyd(rng):
    """Lloyd iterations from our seeding agree with a plain loop implementation."""
    x = rng.random((200, 5))
    res = fit_kmeans(x, 6, seed=1, tol=0.0, max_iter=40)
    c = fit_kmeans(x, 6, seed=1, max_iter=0).centres  # k-means++ seeds only
    for _ in range(40):
        lab = np.array([np.argmin(((c - p) ** 2).sum(axis=1)) for p in x])
        c = np.array([x[lab == j].mean(axis=0) if (lab == j).any() else c[j] for j in range(6)])
    np.testing.assert_allclose(res.centres, c, atol=1e-10)


def test_codebook_roundtrip_keeps_id(tmp_path, rng):
    cb = Codebook(rng.random((12, DESCRIPTOR_DIM)))
    path = tmp_path / "cb.cxcb"
    cb.save(path)
    back = Codebook.load(path)
    assert back == cb and back.id == cb.id
    assert back.k == 12 and back.dim == DESCRIPTOR_DIM


def test_corrupt_codebook(rng):
    blob = bytearray(Codebook(rng.random((4, 8))).to_bytes())
    with pytest.raises(CorruptCodebook):
        Codebook.from_bytes(bytes(blob[:-3]))
    blob[20] ^= 0x01
    with pytest.raises(CorruptCodebook):
        Codebook.from_bytes(bytes(blob))
    with pytest.raises(CorruptCodebook):
        Codebook.from_bytes(b"XXXX" + bytes(blob[4:]))


# -- quantization -------------------------------------------------------------


def test_quantize_single_word():
    centres = np.zeros((10, 4))
    centres[7] = 1.0
    cb = Codebook(centres + np.arange(10)[:, None] * 10)  # centre j sits at 10j (+1 for 7)
    descs = np.full((3, 4), 71.0)
    sig = quantize(descs, cb)
    assert sig.entries == [(7, 3)] and sig.total == 3


def test_quantize_tie_goes_to_lowest_id():
    centres = np.zeros((10, 3))
    centres[2] = [1.0, 0.0, 0.0]
    centres[9] = [-1.0, 0.0, 0.0]
    centres[[0, 1, 3, 4, 5, 6, 7, 8]] = 50.0
    cb = Codebook(centres)
    assert quantize(np.zeros((1, 3)), cb).entries == [(2, 1)]


def test_quantize_against_brute_force(rng):
    cb = Codebook(rng.random((8, DESCRIPTOR_DIM)))
    descs = rng.random((20, DESCRIPTOR_DIM))
    sig = quantize(descs, cb)
    c = cb.centres.astype(np.float64)
    brute = [int(np.argmin([np.sum((d - cc) ** 2) for cc in c])) for d in descs]
    words, counts = np.unique(brute, return_counts=True)
    assert sig.entries == list(zip(words.tolist(), counts.tolist()))
    assert sig.total == 20 and sum(c for _, c in sig.entries) == 20
    np.testing.assert_array_equal(nearest_centres(descs, cb), brute)


def test_quantize_empty():
    cb = Codebook(np.eye(3))
    with pytest.raises(EmptyDescriptorSet):
        quantize(np.zeros((0, 3)), cb)


# -- signature type and encoding ---------------------------------------------


def test_signature_rejects_bad_entries():
    with pytest.raises(ValueError):
        Signature(CID, [3, 3], [1, 1])
    with pytest.raises(ValueError):
        Signature(CID, [1, 2], [1, 0])
    with pytest.raises(ValueError):
        Signature(b"short", [1], [1])


def test_signature_does_not_alias_inputs():
    words = np.array([1, 5])
    sig = Signature(CID, words, np.array([2, 3]))
    words[0] = 4
    assert sig.words.tolist() == [1, 5]
    assert words.flags.writeable


@settings(max_examples=200, deadline=None)
@given(signatures(k=2**20, max_words=512))
def test_encode_roundtrip(sig):
    blob = encode(sig)
    assert decode(blob) == sig
    assert decode(blob, codebook_id=CID) == sig


def test_worst_case_signature_fits_4kib():
    # 512 entries spread over k=5000 with the largest counts a 512-keypoint image can produce
    words = np.linspace(0, 4999, 512).astype(int)
    counts = np.ones(512, dtype=int)
    assert len(encode(Signature(CID, words, counts))) <= 4096
    # word ids near 2^20 with maximal deltas
    words = np.arange(512) * 2048
    assert len(encode(Signature(CID, words, counts))) <= 4096


def test_flipped_magic_is_corrupt():
    blob = bytearray(encode(Signature(CID, [1, 4], [2, 1])))
    blob[0] ^= 0xFF
    with pytest.raises(CorruptSignature):
        decode(bytes(blob))


@settings(max_examples=100, deadline=None)
@given(signatures(), st.data())
def test_truncation_is_corrupt(sig, data):
    blob = encode(sig)
    cut = data.draw(st.integers(0, len(blob) - 1))
    with pytest.raises(CorruptSignature):
        decode(blob[:cut])


def test_codebook_mismatch_on_decode():
    with pytest.raises(CorruptSignature):
        decode(encode(Signature(CID, [1], [1])), codebook_id=OTHER)


@settings(max_examples=50, deadline=None)
@given(st.lists(signatures(), min_size=1, max_size=5), st.binary(max_size=16))
def test_decoding_is_prefix_safe(sigs, junk):
    blob = b"".join(encode(s) for s in sigs) + junk
    pos = 0
    for s in sigs:
        got, pos = decode_from(blob, pos)
        assert got == s
    assert blob[pos:] == junk


# -- chi-squared ---------------------------------------------------------------


def test_chi_squared_examples():
    a = Signature(CID, [0, 1], [1, 1])
    b = Signature(CID, [0], [3])
    assert chi_squared(a, a) == 0.0
    assert chi_squared(a, b) == pytest.approx(2 / 3, abs=1e-9)
    assert chi_squared_from_shared(a, b) == pytest.approx(2 - 4 / 3, abs=1e-9)
    assert chi_squared(Signature(CID, [0, 1], [1, 1]), Signature(CID, [2, 3], [5, 1])) == 2.0


def test_chi_squared_codebook_mismatch():
    with pytest.raises(CodebookMismatch):
        chi_squared(Signature(CID, [1], [1]), Signature(OTHER, [1], [1]))


def test_dense_form_skips_zero_zero_terms():
    assert dense_chi_squared(np.array([0.5, 0.5, 0.0]), np.array([1.0, 0.0, 0.0])) == pytest.approx(2 / 3)


@settings(max_examples=300, deadline=None)
@given(signatures(), signatures())
def test_chi_squared_properties(a, b):
    x = chi_squared(a, b)
    assert x == chi_squared(b, a)
    assert 0.0 <= x <= 2.0 + 1e-12
    assert x == pytest.approx(chi_squared_from_shared(a, b), abs=1e-9)
    assert x == pytest.approx(dense_chi_squared(a.dense(300), b.dense(300)), abs=1e-12)
    assert shared_similarity(a, b) == shared_similarity(b, a)


@settings(max_examples=100, deadline=None)
@given(signatures(), st.integers(1, 5))
def test_chi_squared_zero_iff_equal_distributions(a, scale):
    scaled = Signature(CID, a.words, a.counts * scale)
    assert chi_squared(a, scaled) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(signatures(), signatures())
def test_chi_squared_positive_for_different_distributions(a, b):
    assume(not np.allclose(a.dense(300), b.dense(300)))
    assert chi_squared(a, b) > 0
