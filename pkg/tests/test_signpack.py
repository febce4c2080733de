import numpy as np
import pytest
from hypothesis import given, strategies as st

from bitstack import signpack
from bitstack.errors import MalformedBuffer
from bitstack.signpack import PackedSignMatrix


def test_sign_split_zero_is_positive():
    signs, mag = signpack.sign_split([[-2.0, 0.0], [3.0, -1.0]])
    np.testing.assert_array_equal(signs, [[-1, 1], [1, -1]])
    np.testing.assert_array_equal(mag, [[2, 0], [3, 1]])


def test_sign_split_all_positive():
    w = np.random.default_rng(0).uniform(0.1, 1, (3, 3))
    signs, mag = signpack.sign_split(w)
    assert np.all(signs == 1)
    assert np.array_equal(mag, w)


def test_sign_split_reconstructs_exactly():
    w = np.random.default_rng(5).standard_normal((8, 8))
    w[0, 0] = 0.0
    w[1, 1] = -0.0
    signs, mag = signpack.sign_split(w)
    assert np.array_equal(signs * mag, w)


def test_pack_known_bytes():
    assert signpack.pack(np.ones((2, 2))).bits == b"\x0f"
    assert signpack.pack([[1, -1, 1]]).bits == b"\x05"


def test_unpack_known_bytes():
    np.testing.assert_array_equal(signpack.unpack(PackedSignMatrix(2, 2, b"\x0f")), np.ones((2, 2)))
    np.testing.assert_array_equal(signpack.unpack(PackedSignMatrix(2, 2, b"\x00")), -np.ones((2, 2)))


def test_round_trip_seed9():
    s = np.where(np.random.default_rng(9).standard_normal((8, 8)) >= 0, 1, -1)
    p = signpack.pack(s)
    assert len(p.bits) == 8
    np.testing.assert_array_equal(signpack.unpack(p), s)


def test_pack_rejects_non_signs():
    with pytest.raises(ValueError):
        signpack.pack([[1, 0]])


def test_unpack_rejects_bad_length_and_padding():
    with pytest.raises(MalformedBuffer):
        signpack.unpack(PackedSignMatrix(2, 2, b"\x0f\x00"))
    with pytest.raises(MalformedBuffer):
        signpack.unpack(PackedSignMatrix(1, 3, b"\x0d"))  # bit 3 set past the end


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_pack_unpack_round_trip(rows, cols, seed):
    s = np.where(np.random.default_rng(seed).random((rows, cols)) < 0.5, 1, -1)
    p = signpack.pack(s)
    assert len(p.bits) == (rows * cols + 7) // 8
    assert len(p.bits) * 8 - rows * cols < 8
    np.testing.assert_array_equal(signpack.unpack(p), s)


@given(st.integers(1, 20), st.integers(1, 20), st.data())
def test_unpack_pack_round_trip(rows, cols, data):
    n = rows * cols
    raw = bytearray(data.draw(st.binary(min_size=(n + 7) // 8, max_size=(n + 7) // 8)))
    if n % 8:
        raw[-1] &= (1 << (n % 8)) - 1
    p = PackedSignMatrix(rows, cols, bytes(raw))
    assert signpack.pack(signpack.unpack(p)) == p
