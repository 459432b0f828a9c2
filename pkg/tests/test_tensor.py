import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import matmul_loops, rel_error
from pattlite.tensor import (NonFiniteError, Rng, TensorFormatError, check_finite, crop2d, flat_index, matmul,
                             pad2d, rand_normal, rand_uniform, read_tensor, reduce_mean, truncated_normal,
                             unflat_index, write_tensor)


def test_pad_14_to_16():
    x = np.ones((1, 14, 14, 512), np.float32)
    y = pad2d(x, 1, 1, 1, 1)
    assert y.shape == (1, 16, 16, 512)
    assert np.array_equal(y[:, 1:-1, 1:-1], x)
    assert y[:, 0].sum() == 0 and y[:, -1].sum() == 0 and y[:, :, 0].sum() == 0 and y[:, :, -1].sum() == 0


def test_pad_zero_is_identity_and_sum_preserved():
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    assert np.array_equal(pad2d(x, 0, 0, 0, 0), x)
    y = pad2d(x, 2, 0, 1, 3)
    assert y.shape == (2, 5, 8, 5)
    assert np.isclose(y.sum(), x.sum(), rtol=1e-12)


def test_pad_errors():
    with pytest.raises(ValueError):
        pad2d(np.zeros((3, 3)), 1, 1, 1, 1)
    with pytest.raises(ValueError):
        pad2d(np.zeros((1, 3, 3, 1)), -1, 0, 0, 0)


@given(st.tuples(*[st.integers(0, 3)] * 4), st.integers(0, 100))
@settings(max_examples=30, deadline=None)
def test_pad_then_crop_is_identity(pads, seed):
    x = np.random.default_rng(seed).normal(size=(1, 3, 2, 2))
    assert np.array_equal(crop2d(pad2d(x, *pads), *pads), x)


def test_matmul_cases():
    a = np.random.default_rng(1).normal(size=(4, 3))
    assert np.array_equal(matmul(a, np.eye(3)), a)
    assert np.array_equal(matmul(np.array([[1., 2.], [3., 4.]]), np.array([[1.], [1.]])), [[3.], [7.]])
    a, b = np.random.default_rng(2).normal(size=(5, 7)), np.random.default_rng(3).normal(size=(7, 3))
    assert rel_error(matmul(a, b), matmul_loops(a, b)) < 1e-6
    with pytest.raises(ValueError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_reduce_mean_cases():
    assert np.all(reduce_mean(np.full((2, 3, 4), 5.0), [0, 2]) == 5.0)
    assert reduce_mean(np.array([1., 2., 3., 4.]), [0]) == 2.5
    x = np.random.default_rng(4).normal(size=(3, 4, 5))
    oracle = np.array([[sum(x[i, :, k]) / 4 for k in range(5)] for i in range(3)])
    assert np.allclose(reduce_mean(x, [1]), oracle, rtol=1e-12)
    for bad in ([0, 0], [3], [-4]):
        with pytest.raises(ValueError):
            reduce_mean(x, bad)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 50))
@settings(max_examples=30, deadline=None)
def test_reduce_mean_linear(a, b, seed):
    x = np.random.default_rng(seed).normal(size=(3, 4))
    assert np.allclose(reduce_mean(a * x + b, [1]), a * reduce_mean(x, [1]) + b, atol=1e-12)


def test_rng_determinism_and_children():
    a = rand_uniform(Rng(7), (50,), 0, 1)
    b = rand_uniform(Rng(7), (50,), 0, 1)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, rand_uniform(Rng(8), (50,), 0, 1))
    r = Rng(7)
    c1, c2 = r.child("x").uniform(5), r.child("x").uniform(5)
    assert np.array_equal(c1, c2)
    assert not np.array_equal(c1, r.child("y").uniform(5))


def test_uniform_law_of_large_numbers():
    draws = rand_uniform(Rng(11), (100_000,), 0.0, 1.0, np.float64)
    assert abs(draws.mean() - 0.5) < 0.01
    assert draws.min() >= 0.0 and draws.max() < 1.0


def test_normal_degenerate_and_errors():
    assert np.all(rand_normal(Rng(0), (10,), 3.0, 0.0) == 3.0)
    with pytest.raises(ValueError):
        rand_normal(Rng(0), (3,), 0.0, -1.0)
    with pytest.raises(ValueError):
        rand_uniform(Rng(0), (3,), 1.0, 1.0)


def test_truncated_normal_bounds():
    t = truncated_normal(Rng(5), (20_000,), 0.05, np.float64)
    assert np.abs(t).max() <= 0.1
    assert 0.04 < t.std() < 0.05


@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.data())
@settings(max_examples=50, deadline=None)
def test_flat_index_bijection(shape, data):
    size = int(np.prod(shape))
    idx = data.draw(st.integers(0, size - 1))
    coords = unflat_index(idx, shape)
    assert flat_index(coords, shape) == idx
    assert np.ravel_multi_index(coords, shape) == idx


def test_check_finite():
    check_finite(np.ones(3))
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.nan]))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_plt_round_trip(dtype, tmp_path):
    x = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(dtype)
    p = tmp_path / "x.plt"
    write_tensor(x, p)
    y = read_tensor(p)
    assert y.dtype == dtype and np.array_equal(x, y)
    buf = io.BytesIO()
    write_tensor(x, buf)
    assert np.array_equal(read_tensor(buf.getvalue()), x)


def test_plt_errors():
    with pytest.raises(TensorFormatError):
        read_tensor(b"NOTATENSOR" + b"\x00" * 16)
    buf = io.BytesIO()
    write_tensor(np.ones((2, 2), np.float32), buf)
    with pytest.raises(TensorFormatError):
        read_tensor(buf.getvalue()[:-3])
