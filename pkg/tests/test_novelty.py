import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lesionforge.autoencoder import TrainedNetwork
from lesionforge.errors import DataError, DegenerateError, ParameterError, ShapeError
from lesionforge.nn_core import DenseLayer, LayerSpec, make_rng, xavier_init, zero_layer
from lesionforge.novelty import (ErrorMap, cnd_map, nd_map, otsu_binarize, otsu_threshold,
                                 patch_error, sigma_binarize)
from lesionforge.preprocess import Study

from oracles import exhaustive_otsu, naive_cnd, naive_nd


def random_nd(p, hidden=8, seed=0):
    rng = make_rng(seed)
    d = 2 * p * p
    enc = xavier_init(LayerSpec(d, hidden, "sigmoid"), rng)
    dec = xavier_init(LayerSpec(hidden, d, "linear"), rng)
    dec.biases[...] = rng.normal(0, 0.5, d)
    return TrainedNetwork([enc, dec], "nd")


def zero_nd(p):
    d = 2 * p * p
    return TrainedNetwork([zero_layer(LayerSpec(d, 4, "sigmoid")),
                           zero_layer(LayerSpec(4, d, "linear"))], "nd")


def random_study(shape=(2, 17, 19), seed=0):
    rng = np.random.default_rng(seed)
    return Study({n: rng.normal(0, 1, shape).astype(np.float32) for n in ("FLAIR", "T2")})


def test_patch_error_examples():
    F, T = np.zeros((3, 3)), np.zeros((3, 3))
    assert np.all(patch_error(F, T, F, T) == 0)
    RF, RT = F.copy(), T.copy()
    RF[1, 1], RT[1, 1] = 1, 2
    E = patch_error(F, T, RF, RT)
    assert E[1, 1] == 5 and E.sum() == 5
    np.testing.assert_array_equal(patch_error(RF, RT, F, T), E)
    with pytest.raises(ShapeError):
        patch_error(F, T, RF, np.zeros((2, 2)))


def test_nd_single_pixel_by_hand():
    enc = DenseLayer(LayerSpec(2, 1, "sigmoid"), np.zeros((1, 2), np.float32),
                     np.zeros(1, np.float32))
    dec = DenseLayer(LayerSpec(1, 2, "linear"), np.zeros((2, 1), np.float32),
                     np.array([0.7, 0.1], np.float32))
    net = TrainedNetwork([enc, dec], "nd")
    s = Study({"FLAIR": np.full((1, 1, 1), 0.5, np.float32),
               "T2": np.full((1, 1, 1), 0.1, np.float32)})
    emap = nd_map(s, net, p=1)
    assert emap.values[0, 0, 0] == pytest.approx(0.02, rel=1e-5)


class TestOracles:
    @pytest.mark.parametrize("p", [3, 5])
    def test_nd_matches_definition(self, p):
        s, net = random_study(seed=p), random_nd(p, seed=p)
        emap = nd_map(s, net, p)
        rng = np.random.default_rng(0)
        h = p // 2
        for _ in range(20):
            z, y, x = rng.integers(0, 2), rng.integers(h, 17 - h), rng.integers(h, 19 - h)
            assert emap.values[z, y, x] == pytest.approx(naive_nd(s, net, p, z, y, x), rel=1e-5)

    @pytest.mark.parametrize("p", [3, 5])
    def test_cnd_matches_definition(self, p):
        s, net = random_study(seed=10 + p), random_nd(p, seed=p)
        emap = cnd_map(s, net, p)
        rng = np.random.default_rng(1)
        for _ in range(20):
            z, y, x = rng.integers(0, 2), rng.integers(0, 17), rng.integers(0, 19)
            assert emap.values[z, y, x] == pytest.approx(naive_cnd(s, net, p, z, y, x),
                                                          rel=1e-5)

    def test_border_band(self):
        p = 5
        emap = nd_map(random_study(), random_nd(p), p)
        assert not emap.valid[:, :2].any() and not emap.valid[:, :, -2:].any()
        assert np.all(emap.values[~emap.valid] == 0)
        assert np.all(emap.values >= 0)

    def test_constant_closed_forms(self):
        p = 5
        # every squared residual is 0.25, so E = 0.5 at each window position
        s = Study({n: np.full((1, 15, 15), 0.5, np.float32) for n in ("FLAIR", "T2")})
        net = zero_nd(p)
        nd = nd_map(s, net, p)
        assert np.all(nd.values[nd.valid] == 0.25)
        cnd = cnd_map(s, net, p)
        assert np.all(cnd.values[:, 4:11, 4:11] == 0.5 * p * p)
        # a corner voxel sits in exactly one window
        assert cnd.values[0, 0, 0] == 0.5

    def test_stride(self):
        p = 3
        s, net = random_study(), random_nd(p)
        dense, sparse = nd_map(s, net, p), nd_map(s, net, p, stride=2)
        assert sparse.valid.sum() < dense.valid.sum()
        np.testing.assert_array_equal(sparse.values[sparse.valid], dense.values[sparse.valid])

    def test_errors(self):
        p = 3
        net = random_nd(p)
        with pytest.raises(DataError):
            nd_map(Study({"FLAIR": np.ones((1, 5, 5), np.float32)}), net, p)
        with pytest.raises(ShapeError):
            nd_map(random_study(), net, 5)
        classifier = TrainedNetwork([zero_layer(LayerSpec(18, 5, "softmax"))], "sdae_classifier")
        with pytest.raises(ParameterError):
            cnd_map(random_study(), classifier, p)


class TestOtsu:
    def test_two_deltas(self):
        t = otsu_threshold(np.r_[np.full(1000, 0.1), np.full(100, 0.9)])
        assert 0.1 < t < 0.9

    def test_constant(self):
        with pytest.raises(DegenerateError):
            otsu_threshold(np.full(10, 2.0))

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            k = rng.integers(1, 4)
            vals = np.concatenate([rng.normal(rng.uniform(0, 10), rng.uniform(0.1, 2),
                                              rng.integers(20, 2000)) for _ in range(k)])
            assert otsu_threshold(vals) == exhaustive_otsu(vals)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32), st.floats(0.01, 100), st.floats(-50, 50))
    def test_affine_invariance(self, seed, scale, shift):
        rng = np.random.default_rng(seed)
        vals = np.r_[rng.normal(0, 1, 500), rng.normal(6, 1, 200)]
        t = otsu_threshold(vals)
        t2 = otsu_threshold(vals * scale + shift)
        width = (vals.max() - vals.min()) / 256
        assert abs((t2 - shift) / scale - t) <= width * (1 + 1e-6)

    def test_binarize_excludes_invalid(self):
        values = np.zeros((1, 4, 4), np.float32)
        values[0, 1:3, 1:3] = [[1, 2], [3, 9]]
        valid = np.zeros((1, 4, 4), bool)
        valid[0, 1:3, 1:3] = True
        t, mask = otsu_binarize(ErrorMap(values, valid, "nd", 3))
        assert mask.sum() == 1 and mask[0, 2, 2]
        assert 3 <= t < 9


class TestSigma:
    def emap(self, vals):
        vals = np.asarray(vals, np.float32).reshape(1, 1, -1)
        return ErrorMap(vals, np.ones(vals.shape, bool), "cnd", 1)

    def test_gaussian_tail(self):
        vals = np.random.default_rng(0).standard_normal(100000)
        frac = sigma_binarize(self.emap(vals), 1.0).mean()
        assert abs(frac - 0.1587) <= 0.015

    def test_k_zero_and_inf(self):
        vals = np.arange(10.0)
        np.testing.assert_array_equal(sigma_binarize(self.emap(vals), 0).ravel(), vals > 4.5)
        assert not sigma_binarize(self.emap(vals), np.inf).any()
