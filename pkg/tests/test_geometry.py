"""Landmark sets, similarity alignment, disparity, and neighbor search."""

from __future__ import annotations

import math

import numpy as np
import pytest

from dagfaces.geometry import (
    CanonicalFrame,
    DegenerateShapeError,
    IndexEntry,
    LandmarkSet,
    NeighborIndex,
    NoNeighborError,
    SimilarityTransform,
    align_landmarks,
    landmark_disparity,
    mean_reference_shape,
    read_landmark_file,
    select_geometric_neighbor,
    write_landmark_file,
)

from _oracles import neighbor_brute_force, similarity_lstsq_oracle
from conftest import random_landmarks


class TestLandmarkSet:
    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            LandmarkSet(np.zeros((4, 3)))
        with pytest.raises(ValueError):
            LandmarkSet(np.zeros((2, 2)))  # fewer than 3 points
        with pytest.raises(ValueError):
            LandmarkSet(np.array([[0.0, np.nan], [1, 1], [2, 2]]))

    def test_vectorized_interleaves_xy(self):
        ls = LandmarkSet(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
        assert ls.vectorized().tolist() == [1, 2, 3, 4, 5, 6]

    def test_points_are_immutable(self):
        ls = LandmarkSet(np.zeros((3, 2)) + np.arange(3)[:, None])
        with pytest.raises(ValueError):
            ls.points[0, 0] = 99.0

    def test_spread_matches_direct_formula(self):
        pts = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
        ls = LandmarkSet(pts)
        centered = pts - pts.mean(axis=0)
        assert ls.spread() == pytest.approx(np.sqrt((centered**2).sum()), abs=1e-15)


class TestSimilarityTransform:
    def test_apply_matches_matrix_form(self):
        t = SimilarityTransform(a=1.5, b=0.5, tx=3.0, ty=-2.0)
        pts = np.array([[1.0, 2.0], [0.0, 0.0], [-4.0, 5.0]])
        expected = pts @ np.array([[1.5, 0.5], [-0.5, 1.5]]) + [3.0, -2.0]
        np.testing.assert_allclose(t.apply(pts), expected, atol=1e-15)

    def test_scale_and_rotation(self):
        ang = 0.7
        t = SimilarityTransform(a=2 * math.cos(ang), b=2 * math.sin(ang), tx=0, ty=0)
        assert t.scale == pytest.approx(2.0)
        assert t.rotation == pytest.approx(ang)

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a, b = rng.uniform(-2, 2, size=2)
            if a * a + b * b < 1e-3:
                continue
            t = SimilarityTransform(a, b, *rng.uniform(-5, 5, size=2))
            pts = rng.uniform(-10, 10, size=(6, 2))
            np.testing.assert_allclose(t.inverse().apply(t.apply(pts)), pts, atol=1e-9)

    def test_zero_scale_not_invertible(self):
        with pytest.raises(ValueError):
            SimilarityTransform(0.0, 0.0, 1.0, 1.0).inverse()

    def test_single_point_apply(self):
        t = SimilarityTransform(1.0, 0.0, 2.0, 3.0)
        np.testing.assert_allclose(t.apply(np.array([1.0, 1.0])), [3.0, 4.0])


def _frame(points: np.ndarray, size: tuple[int, int] = (32, 32)) -> CanonicalFrame:
    pts = np.asarray(points, dtype=np.float64)
    shift = np.array([size[0] / 2.0, size[1] / 2.0]) - pts.mean(axis=0)
    return CanonicalFrame(LandmarkSet(pts + shift), size)


class TestAlignLandmarks:
    def test_reference_maps_to_itself(self):
        frame = _frame(np.array([[10.0, 10.0], [22.0, 10.0], [16.0, 20.0]]))
        aligned, t = align_landmarks(frame.reference_shape, frame)
        assert t.is_identity(tol=1e-9)
        np.testing.assert_allclose(aligned.points, frame.reference_shape.points, atol=1e-9)

    def test_rotated_scaled_copy_recovers_reference(self):
        frame = _frame(np.array([[10.0, 10.0], [22.0, 10.0], [16.0, 20.0], [12.0, 16.0]]))
        ang = math.radians(30)
        rot = 2.0 * np.array(
            [[math.cos(ang), math.sin(ang)], [-math.sin(ang), math.cos(ang)]]
        )
        moved = LandmarkSet(frame.reference_shape.points @ rot + [5.0, -3.0])
        aligned, _ = align_landmarks(moved, frame)
        np.testing.assert_allclose(aligned.points, frame.reference_shape.points, atol=1e-9)

    def test_matches_dense_least_squares(self):
        rng = np.random.default_rng(3)
        frame = _frame(rng.uniform(8, 24, size=(5, 2)))
        for _ in range(25):
            src = random_landmarks(rng, 5)
            _, t = align_landmarks(src, frame)
            a, b, tx, ty = similarity_lstsq_oracle(src.points, frame.reference_shape.points)
            assert (t.a, t.b, t.tx, t.ty) == pytest.approx((a, b, tx, ty), abs=1e-9)

    def test_idempotent(self):
        rng = np.random.default_rng(11)
        frame = _frame(rng.uniform(8, 24, size=(6, 2)))
        for _ in range(10):
            once, _ = align_landmarks(random_landmarks(rng, 6), frame)
            twice, t = align_landmarks(once, frame)
            assert t.is_identity(tol=1e-9)
            np.testing.assert_allclose(twice.points, once.points, atol=1e-9)

    def test_count_mismatch(self):
        frame = _frame(np.array([[10.0, 10.0], [22.0, 10.0], [16.0, 20.0]]))
        with pytest.raises(ValueError, match="mismatch"):
            align_landmarks(LandmarkSet(np.array([[1.0, 1], [2, 2], [3, 3], [4, 4]])), frame)

    def test_degenerate_source(self):
        frame = _frame(np.array([[10.0, 10.0], [22.0, 10.0], [16.0, 20.0]]))
        flat = LandmarkSet(np.full((3, 2), 7.0))
        with pytest.raises(DegenerateShapeError):
            align_landmarks(flat, frame)


class TestMeanReferenceShape:
    def test_centroid_sits_at_frame_center(self):
        rng = np.random.default_rng(5)
        sets = [random_landmarks(rng, 5) for _ in range(8)]
        frame = mean_reference_shape(sets, (32, 32))
        np.testing.assert_allclose(frame.reference_shape.centroid(), [16.0, 16.0], atol=1e-9)

    def test_identical_inputs_give_that_shape_recentred(self):
        pts = np.array([[0.0, 0.0], [4.0, 0.0], [2.0, 3.0]])
        frame = mean_reference_shape([LandmarkSet(pts)] * 3, (32, 32))
        expected = pts - pts.mean(axis=0) + [16.0, 16.0]
        np.testing.assert_allclose(frame.reference_shape.points, expected, atol=1e-9)

    def test_validates_inputs(self):
        with pytest.raises(ValueError):
            mean_reference_shape([], (32, 32))
        a = LandmarkSet(np.array([[0.0, 0], [1, 0], [0, 1]]))
        b = LandmarkSet(np.array([[0.0, 0], [1, 0], [0, 1], [1, 1]]))
        with pytest.raises(ValueError):
            mean_reference_shape([a, b], (32, 32))


class TestLandmarkDisparity:
    def test_identical_sets_give_zero(self):
        ls = LandmarkSet(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]))
        assert landmark_disparity(ls, ls) == 0.0

    def test_hand_computed_value(self):
        # Right triangle shifted by (1, 0): numerator sqrt(3), denominator
        # sqrt(16/3) from centroid (2/3, 2/3), quotient exactly 3/4.
        l_a = LandmarkSet(np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]))
        l_b = LandmarkSet(l_a.points + [1.0, 0.0])
        assert landmark_disparity(l_a, l_b) == pytest.approx(0.75, abs=1e-15)

    def test_translation_invariance(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            l_a = random_landmarks(rng, 5)
            l_b = random_landmarks(rng, 5)
            t = rng.uniform(-50, 50, size=2)
            base = landmark_disparity(l_a, l_b)
            moved = landmark_disparity(
                LandmarkSet(l_a.points + t), LandmarkSet(l_b.points + t)
            )
            assert moved == pytest.approx(base, rel=1e-12)

    def test_nonnegative_and_symmetric_numerator(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            l_a = random_landmarks(rng, 4)
            l_b = random_landmarks(rng, 4)
            d = landmark_disparity(l_a, l_b)
            assert d >= 0.0
            # numerator is symmetric; denominators differ by each set's spread
            assert d * l_a.spread() == pytest.approx(
                landmark_disparity(l_b, l_a) * l_b.spread(), rel=1e-12
            )

    def test_errors(self):
        tri = LandmarkSet(np.array([[0.0, 0], [2, 0], [0, 2]]))
        quad = LandmarkSet(np.array([[0.0, 0], [2, 0], [0, 2], [2, 2]]))
        with pytest.raises(ValueError, match="mismatch"):
            landmark_disparity(tri, quad)
        flat = LandmarkSet(np.full((3, 2), 5.0))
        with pytest.raises(DegenerateShapeError):
            landmark_disparity(flat, tri)


def _entry(rid: int, ident: int, pts) -> IndexEntry:
    return IndexEntry(record_id=rid, identity=ident, landmarks=LandmarkSet(np.asarray(pts, float)))


def _tri(offset: float) -> np.ndarray:
    return np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]) + offset


class TestSelectGeometricNeighbor:
    def test_single_other_identity_is_forced(self):
        idx = NeighborIndex(
            entries=(
                _entry(0, 1, _tri(0.0)),
                _entry(1, 1, _tri(0.1)),  # same identity, much closer
                _entry(2, 2, _tri(50.0)),  # far but the only other identity
            )
        )
        assert select_geometric_neighbor(0, idx) == 2

    def test_hand_made_index_matches_brute_force(self):
        entries = (
            _entry(0, 1, _tri(0.0)),
            _entry(1, 2, _tri(3.0)),
            _entry(2, 2, _tri(1.0)),
            _entry(3, 3, _tri(2.0)),
            _entry(4, 1, _tri(0.5)),
            _entry(5, 3, _tri(-1.0)),
        )
        idx = NeighborIndex(entries=entries)
        flat = [(e.record_id, e.identity, e.landmarks.vectorized()) for e in entries]
        for q in range(6):
            assert select_geometric_neighbor(q, idx) == neighbor_brute_force(q, flat)

    def test_random_pools_match_brute_force_and_cross_identity(self):
        rng = np.random.default_rng(23)
        for trial in range(20):
            entries = tuple(
                _entry(rid, int(rng.integers(0, 6)), random_landmarks(rng, 4).points)
                for rid in range(40)
            )
            idx = NeighborIndex(entries=entries)
            flat = [(e.record_id, e.identity, e.landmarks.vectorized()) for e in entries]
            for q in rng.choice(40, size=8, replace=False):
                q = int(q)
                ident_q = entries[q].identity
                if all(e.identity == ident_q for e in entries if e.record_id != q):
                    continue
                got = select_geometric_neighbor(q, idx)
                assert got == neighbor_brute_force(q, flat)
                assert entries[got].identity != ident_q

    def test_same_identity_duplicate_is_never_picked(self):
        # An exact same-identity duplicate has distance 0; the objective with
        # a bare indicator denominator would rank it 0/eps = 0 and win. The
        # selection must still return a different identity.
        idx = NeighborIndex(
            entries=(
                _entry(0, 1, _tri(0.0)),
                _entry(1, 1, _tri(0.0)),  # exact duplicate of the query
                _entry(2, 2, _tri(4.0)),
            )
        )
        assert select_geometric_neighbor(0, idx) == 2

    def test_tie_breaks_to_lowest_record_id(self):
        idx = NeighborIndex(
            entries=(
                _entry(0, 1, _tri(0.0)),
                _entry(5, 2, _tri(1.0)),
                _entry(3, 3, _tri(1.0)),  # identical distance, lower id
            )
        )
        assert select_geometric_neighbor(0, idx) == 3

    def test_no_neighbor_error(self):
        idx = NeighborIndex(entries=(_entry(0, 1, _tri(0.0)), _entry(1, 1, _tri(1.0))))
        with pytest.raises(NoNeighborError):
            select_geometric_neighbor(0, idx)

    def test_unknown_query(self):
        idx = NeighborIndex(entries=(_entry(0, 1, _tri(0.0)), _entry(1, 2, _tri(1.0))))
        with pytest.raises(KeyError):
            select_geometric_neighbor(99, idx)

    def test_index_validation(self):
        with pytest.raises(ValueError):
            NeighborIndex(entries=())
        with pytest.raises(ValueError):
            NeighborIndex(entries=(_entry(0, 1, _tri(0.0)), _entry(0, 2, _tri(1.0))))
        with pytest.raises(ValueError):
            NeighborIndex(entries=(_entry(0, 1, _tri(0.0)),), epsilon=0.0)


class TestLandmarkFiles:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(29)
        rows = [(i, int(rng.integers(0, 4)), random_landmarks(rng, 5)) for i in range(12)]
        path = tmp_path / "landmarks.txt"
        write_landmark_file(path, rows)
        back = read_landmark_file(path)
        assert len(back) == len(rows)
        for (rid, ident, ls), (rid2, ident2, ls2) in zip(rows, back):
            assert (rid, ident) == (rid2, ident2)
            assert np.array_equal(ls.points, ls2.points)

    def test_rejects_empty_and_mixed_k(self, tmp_path):
        with pytest.raises(ValueError):
            write_landmark_file(tmp_path / "x.txt", [])
        rows = [
            (0, 0, LandmarkSet(np.array([[0.0, 0], [1, 0], [0, 1]]))),
            (1, 0, LandmarkSet(np.array([[0.0, 0], [1, 0], [0, 1], [1, 1]]))),
        ]
        with pytest.raises(ValueError):
            write_landmark_file(tmp_path / "y.txt", rows)

    def test_read_validates_header_and_row_width(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("0,1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            read_landmark_file(bad)
        bad.write_text("#K=3\n0,1,1.0,2.0\n")
        with pytest.raises(ValueError, match="fields"):
            read_landmark_file(bad)
