import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cosurf.config import FernConfig
from cosurf.fern import (FernDatabase, FernEncoding, FernSpec, Keyframe, boundary_flip_count, dissimilarity,
                         encode, encode_any, find_match, flip_codes, generate_spec, try_add_keyframe)
from cosurf.geometry import RigidTransform

from oracles import linear_fern_scan

I = RigidTransform.identity()


def two_fern_spec():
    # fern 0 tests R, G, B, D of pixel (0, 0); fern 1 tests D of every pixel of a 2x2 image
    xs = np.array([[0, 0, 0, 0], [0, 1, 0, 1]])
    ys = np.array([[0, 0, 0, 0], [0, 0, 1, 1]])
    ch = np.array([[0, 1, 2, 3], [3, 3, 3, 3]])
    th = np.array([[100.0, 100.0, 100.0, 1.0], [1.0, 2.0, 1.5, 0.7]])
    return FernSpec(xs, ys, ch, th, 2, 2)


def test_handcrafted_codes():
    spec = two_fern_spec()
    color = np.array([[[200, 50, 100], [0, 0, 0]], [[0, 0, 0], [0, 0, 0]]], np.uint8)
    depth = np.array([[0.9, 2.5], [0.0, 0.7]])
    enc = encode(color, depth, spec)
    # fern 0: R>=100 (1), G>=100 (0), B>=100 (1), D 0.9>=1 (0) -> 0b0101
    # fern 1: 0.9>=1 (0), 2.5>=2 (1), 0>=1.5 (0), 0.7>=0.7 (1) -> 0b1010
    assert enc.codes.tolist() == [5, 10]


def test_black_frame_has_all_zero_codes():
    spec = generate_spec()
    enc = encode(np.zeros((60, 80, 3), np.uint8), np.zeros((60, 80)), spec)
    assert not enc.codes.any()
    assert len(enc.codes) == 500


def test_encode_is_deterministic_and_seeded():
    rng = np.random.default_rng(0)
    color = rng.integers(0, 256, (60, 80, 3)).astype(np.uint8)
    depth = rng.uniform(0.5, 4, (60, 80))
    a, b = generate_spec(), generate_spec()
    assert a.same_as(b)
    assert encode(color, depth, a) == encode(color, depth, b)
    other = generate_spec(FernConfig(seed=99))
    assert not other.same_as(a)
    with pytest.raises(ValueError):
        dissimilarity(encode(color, depth, a), encode(color, depth, other))


def test_invalid_depth_reads_as_zero():
    spec = two_fern_spec()
    color = np.zeros((2, 2, 3), np.uint8)
    a = encode(color, np.array([[np.nan, np.inf], [-1.0, 0.0]]), spec)
    assert a.codes.tolist() == [0, 0]


def test_resolution_mismatch_rejected():
    spec = generate_spec()
    with pytest.raises(ValueError):
        encode(np.zeros((30, 40, 3), np.uint8), np.zeros((30, 40)), spec)
    with pytest.raises(ValueError):
        encode_any(np.zeros((100, 100, 3), np.uint8), np.zeros((100, 100)), spec)
    enc = encode_any(np.zeros((120, 160, 3), np.uint8), np.zeros((120, 160)), spec)
    assert len(enc.codes) == 500


def test_encoding_locality_under_small_noise():
    spec = two_fern_spec()
    color = np.array([[[200, 50, 180], [0, 0, 0]], [[0, 0, 0], [0, 0, 0]]], np.uint8)
    depth = np.array([[1.4, 2.5], [1.8, 0.3]])
    noisy_c = color.astype(int) + np.array([[[3, -3, 2], [1, 1, 1]], [[2, 2, 2], [0, 0, 0]]])
    noisy_d = depth + 0.02
    assert dissimilarity(encode(color, depth, spec), encode(noisy_c.astype(np.uint8), noisy_d, spec)) == 0


def _enc(codes, key=("k",)):
    return FernEncoding(np.asarray(codes, np.uint8), key)


def test_dissimilarity_examples():
    x = _enc(range(8))
    assert dissimilarity(x, x) == 0
    assert dissimilarity(x, _enc([(c + 1) % 16 for c in range(8)])) == 1
    assert dissimilarity(x, _enc([0, 1, 9, 3, 4, 5, 9, 7])) == 0.25


codes8 = st.lists(st.integers(0, 15), min_size=8, max_size=8).map(_enc)


@given(codes8, codes8, codes8)
def test_dissimilarity_is_pseudometric(a, b, c):
    assert dissimilarity(a, b) == dissimilarity(b, a)
    assert (dissimilarity(a, b) == 0) == (a == b)
    assert dissimilarity(a, c) <= dissimilarity(a, b) + dissimilarity(b, c) + 1e-12
    assert 0 <= dissimilarity(a, b) <= 1


def _random_frame(rng):
    return rng.integers(0, 256, (60, 80, 3)).astype(np.uint8), rng.uniform(0.5, 4.0, (60, 80))


def test_try_add_policy():
    rng = np.random.default_rng(1)
    db = FernDatabase.create()
    color, depth = _random_frame(rng)
    first = try_add_keyframe(db, color, depth, I, 0, 0)
    assert first.added and first.entry == 0
    again = try_add_keyframe(db, color, depth, I, 0, 1)
    assert not again.added and again.entry == 0 and again.dissimilarity == 0
    enc = db.entries[0].encoding
    n = boundary_flip_count(db.config)
    at = db.try_add(flip_codes(enc, n, rng), I, color, depth, 0, 2)
    assert at.dissimilarity == db.config.t_add and not at.added
    past = db.try_add(flip_codes(enc, n + 1, rng), I, color, depth, 0, 3)
    assert past.added and len(db) == 2
    assert db.check_index()


def test_find_match_examples():
    rng = np.random.default_rng(2)
    db = FernDatabase.create()
    color, depth = _random_frame(rng)
    assert find_match(db, color, depth) is None
    try_add_keyframe(db, color, depth, I, 0, 0)
    m = find_match(db, color, depth)
    assert m.entry == 0 and m.dissimilarity == 0
    far = flip_codes(db.entries[0].encoding, 200, rng)
    assert dissimilarity(far, db.entries[0].encoding) == 0.4
    assert db.find_match(far) is None
    # the match threshold is strict
    edge = flip_codes(db.entries[0].encoding, 100, rng)
    assert db.find_match(edge) is None
    assert db.find_match(flip_codes(db.entries[0].encoding, 99, rng)) is not None


def _random_db(rng, n, spec):
    db = FernDatabase(spec)
    for i in range(n):
        codes = rng.integers(0, 16, spec.n_ferns).astype(np.uint8)
        db._append(Keyframe(FernEncoding(codes, spec.key), I, None, None, i % 3, i))
    return db


def test_inverted_index_matches_linear_scan():
    rng = np.random.default_rng(3)
    spec = generate_spec(FernConfig(n_ferns=40))
    db = _random_db(rng, 300, spec)
    codes = np.array([e.encoding.codes for e in db.entries])
    for _ in range(30):
        base = codes[rng.integers(len(codes))]
        q = FernEncoding(flip_codes(FernEncoding(base, spec.key), int(rng.integers(0, 40)), rng).codes, spec.key)
        assert db.nearest(q) == linear_fern_scan(codes, q.codes)
        assert db.nearest(q) == db.nearest_linear(q)
    # ties go to the lowest id
    dup = _random_db(np.random.default_rng(4), 1, spec)
    db._append(dup.entries[0])
    db._append(dup.entries[0])
    assert db.nearest(dup.entries[0].encoding) == (300, 0.0)


def test_eligibility_filter():
    rng = np.random.default_rng(5)
    spec = generate_spec(FernConfig(n_ferns=20))
    db = _random_db(rng, 9, spec)
    q = db.entries[4].encoding
    best, _ = db.nearest(q, eligible=lambda e: e.camera != 1)
    assert db.entries[best].camera != 1
    assert db.nearest(q, eligible=lambda e: False) is None


def test_transform_and_extend():
    rng = np.random.default_rng(6)
    spec = generate_spec(FernConfig(n_ferns=20))
    a, b = _random_db(rng, 4, spec), _random_db(rng, 3, spec)
    shift = RigidTransform.from_translation([1, 2, 3])
    moved = b.transformed(shift)
    assert all(np.array_equal(e.pose.translation, [1, 2, 3]) for e in moved.entries)
    assert all(e.pose.allclose(I) for e in b.entries)
    a.extend(moved)
    assert len(a) == 7 and a.check_index()
    with pytest.raises(ValueError):
        a.extend(FernDatabase.create(FernConfig(n_ferns=20, seed=5)))
