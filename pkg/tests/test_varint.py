import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cxsearch.varint import decode_uvarint, decode_uvarints, encode_uvarint, encode_uvarints


@pytest.mark.parametrize("value, blob", [(0, b"\x00"), (1, b"\x01"), (127, b"\x7f"), (128, b"\x80\x01"), (300, b"\xac\x02")])
def test_known_encodings(value, blob):
    assert encode_uvarint(value) == blob
    assert decode_uvarint(blob, 0) == (value, len(blob))


@given(st.lists(st.integers(0, 2**64 - 1), max_size=50))
def test_vector_roundtrip_agrees_with_scalar(values):
    blob = encode_uvarints(np.array(values, dtype=np.uint64))
    assert blob == b"".join(encode_uvarint(v) for v in values)
    out, end = decode_uvarints(blob + b"\x05", 0, len(values))
    assert out.tolist() == values and end == len(blob)


def test_truncated_and_overlong():
    with pytest.raises(ValueError):
        decode_uvarint(b"\x80\x80", 0)
    with pytest.raises(ValueError):
        decode_uvarint(b"\xff" * 11, 0)
    with pytest.raises(ValueError):
        decode_uvarints(b"\x01\x80", 0, 2)
