"""Text format helpers: %.17g round trips float64 bit-for-bit."""

import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from morphdet.textio import fmt, fmt_vector, parse_floats, parse_tensor, sha256_file, tensor_lines


def test_fmt_round_trips_awkward_floats():
    cases = [
        0.0, -0.0, 1.0, -1.0, 1e-300, -1e300, np.pi, 1 / 3, np.nextafter(1.0, 2.0),
        5e-324, 1.7976931348623157e308,
    ]
    for x in cases:
        back = float(fmt(x))
        assert back == x or (np.isnan(back) and np.isnan(x))
        assert np.signbit(back) == np.signbit(x)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_round_trip_property(x):
    assert float(fmt(x)) == x


def test_vector_round_trip_bitwise():
    rng = np.random.default_rng(0)
    vec = rng.normal(size=32) * 10 ** rng.uniform(-200, 200, size=32)
    back = parse_floats(fmt_vector(vec))
    assert np.array_equal(back, vec)


def test_parse_floats_accepts_string_or_tokens():
    assert np.array_equal(parse_floats("1 2.5 -3"), np.array([1.0, 2.5, -3.0]))
    assert np.array_equal(parse_floats(["1", "2.5"]), np.array([1.0, 2.5]))


def test_tensor_round_trip_2d():
    rng = np.random.default_rng(1)
    arr = rng.normal(size=(3, 5))
    header, data = tensor_lines("w", arr)
    name, back = parse_tensor(header, data)
    assert name == "w"
    assert back.shape == (3, 5)
    assert np.array_equal(back, arr)


def test_tensor_round_trip_1d_as_single_row():
    arr = np.array([1.5, -2.5, 1e-17])
    header, data = tensor_lines("b", arr)
    name, back = parse_tensor(header, data)
    assert back.shape == (1, 3)
    assert np.array_equal(back[0], arr)


def test_parse_tensor_rejects_malformed():
    with pytest.raises(ValueError):
        parse_tensor("tensor w 2", "1 2")
    with pytest.raises(ValueError):
        parse_tensor("matrix w 1 2", "1 2")
    with pytest.raises(ValueError):
        parse_tensor("tensor w 2 2", "1 2 3")


def test_sha256_file_matches_hashlib(tmp_path):
    payload = b"morphdet test payload\n" * 1000
    path = tmp_path / "blob.bin"
    path.write_bytes(payload)
    assert sha256_file(path) == hashlib.sha256(payload).hexdigest()
