import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lesionforge.errors import DataError, ParameterError
from lesionforge.patches import (PatchBatch, augment, devectorize, extract_nonlesion,
                                 extract_systematic, extract_vicinity, rotate_patch, vectorize)
from lesionforge.preprocess import SEQUENCES, Study


def make_study(nx=41, ny=41, nz=1, labels=None, seed=0):
    rng = np.random.default_rng(seed)
    seqs = {n: rng.uniform(1, 2, (nz, ny, nx)).astype(np.float32) for n in SEQUENCES}
    if labels is None:
        labels = np.zeros((nz, ny, nx), np.uint8)
    return Study(seqs, labels, "s")


def coords(batch):
    return {tuple(c) for c in batch.centers.tolist()}


class TestSystematic:
    def test_41_grid(self):
        b = extract_systematic(make_study(), 21, 10)
        assert len(b) == 9
        assert coords(b) == {(x, y, 0) for x in (10, 20, 30) for y in (10, 20, 30)}
        assert b.vec_len == 1764

    def test_single_fit(self):
        b = extract_systematic(make_study(21, 21), 21, 10)
        assert len(b) == 1 and coords(b) == {(10, 10, 0)}

    def test_too_large(self):
        with pytest.raises(ParameterError):
            extract_systematic(make_study(15, 15), 21, 10)

    def test_row_layout(self):
        s = make_study(41, 41, 2, seed=5)
        b = extract_systematic(s, 21, 10)
        x, y, z = b.centers[4]
        img = b.images()[4]
        for k, name in enumerate(SEQUENCES):
            np.testing.assert_array_equal(img[k], s.sequences[name][z, y - 10:y + 11, x - 10:x + 11])

    def test_deterministic(self):
        s = make_study(50, 45, 3, seed=2)
        a, b = extract_systematic(s, 9, 3), extract_systematic(s, 9, 3)
        assert a.data.tobytes() == b.data.tobytes()
        np.testing.assert_array_equal(a.centers, b.centers)


class TestVicinity:
    def test_single_voxel_box(self):
        lab = np.zeros((1, 64, 64), np.uint8)
        lab[0, 30, 30] = 2
        b = extract_vicinity(make_study(64, 64, labels=lab), margin=10, p=21, stride=1)
        xs, ys = b.centers[:, 0], b.centers[:, 1]
        assert xs.min() == 20 and xs.max() == 40 and ys.min() == 20 and ys.max() == 40
        assert len(b) == 21 * 21
        assert b.labels[(xs == 30) & (ys == 30)].tolist() == [2]
        assert np.count_nonzero(b.labels) == 1

    def test_margin_zero(self):
        lab = np.zeros((1, 64, 64), np.uint8)
        lab[0, 25:35, 28:33] = 1
        b = extract_vicinity(make_study(64, 64, labels=lab), margin=0, p=21, stride=1)
        assert len(b) == 50 and np.all(b.labels == 1)

    def test_empty(self):
        b = extract_vicinity(make_study(), 10, 21, 1)
        assert len(b) == 0 and b.empty_reason
        assert b.labels is not None

    def test_no_labels(self):
        s = make_study()
        s.labels = None
        with pytest.raises(DataError):
            extract_vicinity(s)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32))
    def test_labels_are_center_voxels(self, seed):
        rng = np.random.default_rng(seed)
        lab = (rng.random((2, 40, 40)) < 0.02) * rng.integers(1, 5, (2, 40, 40))
        s = make_study(40, 40, 2, labels=lab.astype(np.uint8))
        b = extract_vicinity(s, 4, 11, 2)
        if len(b):
            x, y, z = b.centers.T
            np.testing.assert_array_equal(b.labels, s.labels[z, y, x])
            assert x.min() >= 5 and x.max() <= 34 and y.min() >= 5 and y.max() <= 34


class TestNonlesion:
    def test_row_length_and_grid(self):
        b = extract_nonlesion(make_study(), 21, 10)
        assert b.vec_len == 882 and len(b) == 9

    def test_full_lesion(self):
        lab = np.ones((1, 41, 41), np.uint8)
        assert len(extract_nonlesion(make_study(labels=lab), 21, 10)) == 0

    def test_window_must_be_clean(self):
        lab = np.zeros((1, 41, 41), np.uint8)
        lab[0, 0, 0] = 3  # inside only the (10, 10) window
        b = extract_nonlesion(make_study(labels=lab), 21, 10)
        assert len(b) == 8 and (10, 10, 0) not in coords(b)

    def test_brain_fraction(self):
        s = make_study()
        for v in s.sequences.values():
            v[:, :, :20] = 0  # the x=20 window keeps 11 of 21 columns
        b = extract_nonlesion(s, 21, 10)
        assert {c[0] for c in coords(b)} == {20, 30}


class TestRotation:
    def test_group(self):
        rng = np.random.default_rng(0)
        p = rng.random((2, 7, 7))
        r = p
        for _ in range(4):
            r = rotate_patch(r, 90)
        np.testing.assert_array_equal(r, p)
        np.testing.assert_array_equal(rotate_patch(p, 180), rotate_patch(rotate_patch(p, 90), 90))
        np.testing.assert_array_equal(rotate_patch(rotate_patch(p, 90), -90), p)

    def test_45_matches_right_angle_convention(self):
        rng = np.random.default_rng(1)
        p = rng.random((9, 9))
        np.testing.assert_allclose(rotate_patch(rotate_patch(p, 45), 45)[3:6, 3:6],
                                   rotate_patch(p, 90)[3:6, 3:6], atol=0.35)

    def test_45_round_trip_on_ramp(self):
        yy, xx = np.mgrid[:21, :21]
        ramp = (0.05 * yy + 0.03 * xx).astype(np.float64)
        back = rotate_patch(rotate_patch(ramp, 45), -45)
        assert np.abs(back[5:16, 5:16] - ramp[5:16, 5:16]).max() <= 0.15

    def test_45_fill(self):
        out = rotate_patch(np.ones((21, 21)), 45, fill=0.0)
        assert out[0, 0] == 0 and out[10, 10] == pytest.approx(1.0)

    def test_bad_angle(self):
        with pytest.raises(ParameterError):
            rotate_patch(np.ones((3, 3)), 30)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32), st.sampled_from([90, -90, 180]))
    def test_right_angles_keep_values(self, seed, angle):
        p = np.random.default_rng(seed).random((4, 5, 5))
        np.testing.assert_array_equal(np.sort(rotate_patch(p, angle).ravel()), np.sort(p.ravel()))


class TestAugment:
    def batch(self, n=7):
        rng = np.random.default_rng(0)
        return PatchBatch(rng.random((n, 2 * 25)).astype(np.float32), 5, 2,
                          rng.integers(0, 5, n), np.zeros((n, 3), np.int64))

    @pytest.mark.parametrize("policy,factor", [("st_one_of_three", 2), ("lt_all_three", 4),
                                               ("lgg_five", 6)])
    def test_counts_and_labels(self, policy, factor):
        b = self.batch()
        out = augment(b, policy, np.random.default_rng(1))
        assert len(out) == factor * len(b)
        np.testing.assert_array_equal(out.data[:len(b)], b.data)
        np.testing.assert_array_equal(out.labels, np.tile(b.labels, factor))

    def test_seeded(self):
        b = self.batch(30)
        a1 = augment(b, "st_one_of_three", np.random.default_rng(3))
        a2 = augment(b, "st_one_of_three", np.random.default_rng(3))
        assert a1.data.tobytes() == a2.data.tobytes()

    def test_errors(self):
        b = self.batch()
        with pytest.raises(ParameterError):
            augment(b, "nope")
        with pytest.raises(ParameterError):
            augment(b, "st_one_of_three")
        with pytest.raises(DataError):
            augment(PatchBatch(b.data, 5, 2), "lt_all_three")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.sampled_from([1, 3, 5, 21]), st.integers(0, 2**32))
def test_vectorize_round_trip(n_seq, p, seed):
    patch = np.random.default_rng(seed).random((n_seq, p, p))
    np.testing.assert_array_equal(devectorize(vectorize(patch), p, n_seq), patch)
