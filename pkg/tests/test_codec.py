import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
import hypothesis.extra.numpy as hnp

from connseg.codec import (
    ConnectivityCube,
    agreement,
    decode,
    encode,
    fuse_cubes,
    hflip_cube,
    threshold_cube,
)
from connseg.grid import Pattern, remove_isolated, shift

import brute

PATTERNS = list(Pattern)


def masks(max_side=64):
    shapes = st.tuples(st.integers(1, max_side), st.integers(1, max_side))
    return shapes.flatmap(lambda s: hnp.arrays(bool, s))


def test_encode_all_background():
    cube = encode(np.zeros((4, 4), bool), Pattern.N8)
    assert cube.shape == (4, 4, 8)
    assert not cube.values.any()


def test_encode_horizontal_pair():
    cube = encode(np.array([[True, True]]), Pattern.N8)
    expected = np.zeros((1, 2, 8), np.uint8)
    expected[0, 0, 4] = 1
    expected[0, 1, 3] = 1
    np.testing.assert_array_equal(cube.values, expected)
    np.testing.assert_array_equal(cube.values, np.array(brute.encode([[1, 1]], "N8")))


def test_encode_single_centre_pixel():
    m = np.zeros((3, 3), bool)
    m[1, 1] = True
    assert not encode(m, Pattern.N4).values.any()


@pytest.mark.parametrize("p", PATTERNS)
def test_border_all_salient(p):
    h, w = 5, 7
    cube = encode(np.ones((h, w), bool), p).values
    for i in range(h):
        for j in range(w):
            for c, (dr, dc) in enumerate(p.offsets):
                inside = 0 <= i + dr < h and 0 <= j + dc < w
                assert cube[i, j, c] == int(inside)


def test_threshold_strict():
    p = Pattern.N4
    v = np.full((1, 1, 4), 0.5)
    v[0, 0, 1] = 0.51
    out = threshold_cube(ConnectivityCube(v, p), 0.5).values
    np.testing.assert_array_equal(out[0, 0], [0, 1, 0, 0])
    assert not threshold_cube(ConnectivityCube(np.zeros((3, 3, 4)), p), 0.2).values.any()
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            threshold_cube(ConnectivityCube(v, p), bad)


def test_agreement_requires_both_sides():
    v = np.zeros((1, 2, 8), np.uint8)
    v[0, 0, 4] = 1
    v[0, 1, 3] = 1
    a = agreement(ConnectivityCube(v, Pattern.N8))
    assert a[0, 0, 4] and a[0, 1, 3] and a.sum() == 2
    v[0, 1, 3] = 0
    assert not agreement(ConnectivityCube(v, Pattern.N8)).any()


@pytest.mark.parametrize("p", PATTERNS)
def test_agreement_of_ground_truth_is_identity(p):
    rng = np.random.default_rng(3)
    for _ in range(50):
        m = rng.random((rng.integers(1, 20), rng.integers(1, 20))) < 0.5
        cube = encode(m, p)
        np.testing.assert_array_equal(agreement(cube), cube.values.astype(bool))


def test_decode_errors():
    c = encode(np.ones((2, 2), bool), Pattern.N4)
    with pytest.raises(ValueError):
        decode(c, t=0.0)
    with pytest.raises(ValueError):
        decode(c, k=0)
    with pytest.raises(ValueError):
        decode(c, k=5)


def test_decode_examples():
    p = Pattern.N8
    assert not decode(ConnectivityCube(np.zeros((5, 5, 8)), p)).any()
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    assert not decode(encode(m, p)).any()


@pytest.mark.parametrize("p", PATTERNS)
@settings(max_examples=60, deadline=None)
@given(m=masks())
def test_symmetry_property(p, m):
    cube = encode(m, p).values
    for c, (dr, dc) in enumerate(p.offsets):
        neighbour = shift(cube[..., p.opposite[c]], dr, dc, 0)
        inb = shift(np.ones(m.shape, bool), dr, dc, False)
        np.testing.assert_array_equal(cube[..., c][inb], neighbour[inb])
        assert not cube[..., c][~inb].any()


@pytest.mark.parametrize("p", PATTERNS)
@settings(max_examples=60, deadline=None)
@given(m=masks())
def test_roundtrip_property(p, m):
    m = remove_isolated(m, p)
    np.testing.assert_array_equal(decode(encode(m, p), 0.5, 1), m)


@settings(max_examples=40, deadline=None)
@given(
    v=hnp.arrays(np.float64, (6, 7, 8), elements=st.floats(0, 1)),
    t1=st.floats(0.01, 0.99),
    t2=st.floats(0.01, 0.99),
    k=st.integers(1, 8),
)
def test_monotone_in_threshold(v, t1, t2, k):
    lo, hi = sorted((t1, t2))
    cube = ConnectivityCube(v, Pattern.N8)
    assert not (decode(cube, hi, k) & ~decode(cube, lo, k)).any()


@pytest.mark.parametrize("p", PATTERNS)
def test_soft_decode_matches_oracle(p):
    rng = np.random.default_rng(11)
    for _ in range(40):
        h, w = rng.integers(1, 9, size=2)
        v = rng.random((h, w, p.channels))
        t = float(rng.uniform(0.05, 0.95))
        k = int(rng.integers(1, p.channels + 1))
        got = decode(ConnectivityCube(v, p), t, k)
        np.testing.assert_array_equal(got, np.array(brute.decode(v.tolist(), p.name, t, k)))


def test_fuse():
    p = Pattern.N4
    a = ConnectivityCube(np.full((3, 3, 4), 0.25), p)
    assert fuse_cubes([a, a, a]) == a
    z = ConnectivityCube(np.zeros((2, 2, 4)), p)
    o = ConnectivityCube(np.ones((2, 2, 4)), p)
    np.testing.assert_array_equal(fuse_cubes([z, o]).values, 0.5)
    with pytest.raises(ValueError):
        fuse_cubes([])
    with pytest.raises(ValueError):
        fuse_cubes([z, ConnectivityCube(np.zeros((2, 3, 4)), p)])
    with pytest.raises(ValueError):
        fuse_cubes([z, ConnectivityCube(np.zeros((2, 2, 8)), Pattern.N8)])


def test_fuse_symmetric_mask_flip_unflip():
    m = np.zeros((6, 8), bool)
    m[1:5, 2:6] = True
    m[2, 0:8] = True
    assert np.array_equal(m, m[:, ::-1])
    c = encode(m, Pattern.N8)
    flipped_path = hflip_cube(encode(m[:, ::-1], Pattern.N8))
    np.testing.assert_array_equal(fuse_cubes([c, flipped_path]).values, c.values)


@pytest.mark.parametrize("p", PATTERNS)
def test_hflip_cube_commutes_with_encode(p):
    rng = np.random.default_rng(5)
    for _ in range(30):
        m = rng.random((9, 11)) < 0.5
        assert hflip_cube(encode(m[:, ::-1], p)) == encode(m, p)
        c = ConnectivityCube(rng.random((4, 5, p.channels)), p)
        assert hflip_cube(hflip_cube(c)) == c
