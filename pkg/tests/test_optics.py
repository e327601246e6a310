import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import binary_masks, ones_masks, positive_masks, rand_cube
from cassikit.core import CodedAperture, HyperCube, MaskKind, MeasurementSet, SensingConfig
from cassikit.optics import (
    EnhancedMask,
    ShapeError,
    adjoint,
    appendix_weights,
    build_dense_phi,
    coverage_gram,
    forward,
    operator_norm,
    pinv_appendix,
    pinv_exact,
    project_null,
    project_range,
    rayleigh_sequence,
)
from cassikit.sampling import complement_mask, random_mask


def dense_by_hand(masks, cfg):
    """Sensing matrix written straight from the per-pixel sum, independent of the package."""
    C, H, W = cfg.cube_shape
    Wm = cfg.meas_width
    rows = []
    for i in range(cfg.shots):
        m = masks[i].data
        for r in range(H):
            for n in range(Wm):
                row = np.zeros(C * H * W)
                for c in range(C):
                    col = n - c * cfg.step
                    if 0 <= col < W:
                        row[(c * H + r) * W + col] = m[r, col]
                rows.append(row)
    return np.array(rows)


def rand_meas(cfg, seed):
    rng = np.random.default_rng(seed)
    return MeasurementSet.from_array(cfg, rng.normal(size=(cfg.shots, *cfg.meas_shape)))


configs = st.builds(
    SensingConfig,
    height=st.integers(1, 6),
    width=st.integers(1, 6),
    bands=st.integers(1, 4),
    step=st.integers(0, 2),
    shots=st.integers(1, 3),
)


class TestForward:
    def test_single_band_identity(self):
        cfg = SensingConfig(3, 4, 1, 2)
        x = rand_cube(cfg, 0)
        y = forward(x, ones_masks(cfg), cfg)
        np.testing.assert_array_equal(y[0].data, x.data[0])

    def test_overlap_counting_row(self):
        cfg = SensingConfig(1, 4, 3, 2)
        y = forward(HyperCube(np.ones(cfg.cube_shape)), ones_masks(cfg), cfg)
        np.testing.assert_array_equal(y[0].data[0], [1, 1, 2, 2, 2, 2, 1, 1])

    def test_matches_dense_on_seeded_instance(self):
        cfg = SensingConfig(2, 3, 2, 1)
        masks = [random_mask(cfg, 0.5, 0)]
        x = rand_cube(cfg, 1)
        y = forward(x, masks, cfg)
        np.testing.assert_allclose(y.stack().ravel(), dense_by_hand(masks, cfg) @ x.data.ravel(), atol=1e-14)

    def test_shape_mismatch_reports_dims(self):
        cfg = SensingConfig(3, 4, 2, 1)
        with pytest.raises(ShapeError, match=r"\(2, 3, 4\)"):
            forward(HyperCube(np.zeros((2, 3, 5))), ones_masks(cfg), cfg)

    def test_bitwise_deterministic(self):
        cfg = SensingConfig(5, 6, 4, 2, shots=2)
        masks = positive_masks(cfg, 3)
        x = rand_cube(cfg, 4)
        assert forward(x, masks, cfg).stack().tobytes() == forward(x, masks, cfg).stack().tobytes()


class TestAdjoint:
    def test_single_band_identity(self):
        cfg = SensingConfig(3, 4, 1, 2)
        y = rand_meas(cfg, 0)
        np.testing.assert_array_equal(adjoint(y, ones_masks(cfg), cfg).data[0], y[0].data)

    def test_zero_in_zero_out(self):
        cfg = SensingConfig(3, 4, 3, 1, shots=2)
        y = MeasurementSet.from_array(cfg, np.zeros((2, *cfg.meas_shape)))
        assert np.all(adjoint(y, binary_masks(cfg, 0), cfg).data == 0)

    @given(cfg=configs, seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_dot_product(self, cfg, seed):
        masks = positive_masks(cfg, seed)
        x = rand_cube(cfg, seed + 1)
        y = rand_meas(cfg, seed + 2)
        lhs = float(np.sum(forward(x, masks, cfg).stack() * y.stack()))
        rhs = float(np.sum(x.data * adjoint(y, masks, cfg).data))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs), abs(rhs))


class TestGram:
    def test_scalar_overlap(self):
        cfg = SensingConfig(1, 4, 3, 2)
        np.testing.assert_array_equal(coverage_gram(ones_masks(cfg), cfg).scalar()[0], [1, 1, 2, 2, 2, 2, 1, 1])

    def test_complementary_cross_terms_vanish(self):
        cfg = SensingConfig(6, 7, 4, 2, shots=2)
        m = random_mask(cfg, 0.5, 11)
        g = coverage_gram([m, complement_mask(m)], cfg).data
        assert np.all(g[..., 0, 1] == 0) and np.all(g[..., 1, 0] == 0)

    @given(cfg=configs, seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_blocks_match_dense_and_are_psd(self, cfg, seed):
        masks = positive_masks(cfg, seed)
        g = coverage_gram(masks, cfg).data
        phi = dense_by_hand(masks, cfg)
        full = phi @ phi.T
        H, Wm, N = cfg.height, cfg.meas_width, cfg.shots
        for m in range(H):
            for n in range(Wm):
                idx = [(i * H + m) * Wm + n for i in range(N)]
                np.testing.assert_allclose(g[m, n], full[np.ix_(idx, idx)], atol=1e-13)
        np.testing.assert_array_equal(g, np.swapaxes(g, -1, -2))
        assert np.linalg.eigvalsh(g).min() >= -1e-12


class TestPinvExact:
    def test_single_band_identity(self):
        cfg = SensingConfig(3, 4, 1, 0)
        y = rand_meas(cfg, 0)
        np.testing.assert_allclose(pinv_exact(y, ones_masks(cfg), cfg).data[0], y[0].data, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_svd_pinv(self, seed):
        cfg = SensingConfig(4, 5, 3, 1, shots=2)
        masks = binary_masks(cfg, seed)
        y = rand_meas(cfg, seed + 100)
        expected = np.linalg.pinv(dense_by_hand(masks, cfg), rcond=1e-5) @ y.stack().ravel()
        np.testing.assert_allclose(pinv_exact(y, masks, cfg).data.ravel(), expected, atol=1e-8)

    @given(cfg=configs, seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_right_inverse_on_covered_pixels(self, cfg, seed):
        masks = binary_masks(cfg, seed)
        y = rand_meas(cfg, seed + 1)
        back = forward(pinv_exact(y, masks, cfg), masks, cfg).stack()
        covered = coverage_gram(masks, cfg).covered()
        err = np.abs(back - y.stack()).max(axis=0)
        assert np.all(err[covered] <= 1e-9)

    def test_zero_coverage_maps_to_zero(self):
        cfg = SensingConfig(2, 3, 2, 1)
        zero = [CodedAperture(np.zeros(cfg.mask_shape), MaskKind.BINARY)]
        assert np.all(pinv_exact(rand_meas(cfg, 0), zero, cfg).data == 0)


class TestProjectors:
    @given(cfg=configs, seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_decomposition_and_idempotence(self, cfg, seed):
        masks = binary_masks(cfg, seed)
        x = rand_cube(cfg, seed + 1)
        pr = project_range(x, masks, cfg)
        pn = project_null(x, masks, cfg)
        np.testing.assert_allclose(pr.data + pn.data, x.data, atol=1e-10)
        np.testing.assert_allclose(project_range(pr, masks, cfg).data, pr.data, atol=1e-10)
        np.testing.assert_allclose(project_null(pn, masks, cfg).data, pn.data, atol=1e-10)

    @given(cfg=configs, seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_null_component_invisible_on_covered_pixels(self, cfg, seed):
        masks = binary_masks(cfg, seed)
        pn = project_null(rand_cube(cfg, seed + 1), masks, cfg)
        covered = coverage_gram(masks, cfg).covered()
        assert np.all(np.abs(forward(pn, masks, cfg).stack()).max(axis=0)[covered] <= 1e-9)

    @given(cfg=configs, seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_data_consistency_for_any_null_content(self, cfg, seed):
        masks = binary_masks(cfg, seed)
        y = forward(rand_cube(cfg, seed + 1), masks, cfg)
        s = HyperCube(np.random.default_rng(seed + 2).normal(size=cfg.cube_shape) * 10)
        x = HyperCube(pinv_exact(y, masks, cfg).data + project_null(s, masks, cfg).data)
        np.testing.assert_allclose(forward(x, masks, cfg).stack(), y.stack(), atol=1e-9)

    def test_range_projector_matches_dense(self):
        cfg = SensingConfig(3, 4, 3, 1, shots=2)
        masks = binary_masks(cfg, 9)
        x = rand_cube(cfg, 10)
        phi = dense_by_hand(masks, cfg)
        expected = np.linalg.pinv(phi, rcond=1e-5) @ phi @ x.data.ravel()
        np.testing.assert_allclose(project_range(x, masks, cfg).data.ravel(), expected, atol=1e-8)
        np.testing.assert_allclose(project_null(x, masks, cfg).data.ravel(), x.data.ravel() - expected, atol=1e-8)


class TestAppendix:
    def test_alpha_weights(self):
        cfg = SensingConfig(1, 4, 3, 2)
        assert appendix_weights(cfg).tolist() == [1, 1, 0.5, 0.5, 0.5, 0.5, 1, 1]

    def test_single_band_returns_measurement(self):
        cfg = SensingConfig(3, 5, 1, 2)
        y = rand_meas(cfg, 1)[0]
        em = EnhancedMask.from_aperture(ones_masks(cfg)[0], cfg, "uniform")
        np.testing.assert_array_equal(pinv_appendix(y, em, cfg).data[0], y.data)

    @pytest.mark.parametrize("step", [0, 1, 2])
    def test_right_inverse_for_open_aperture(self, step):
        cfg = SensingConfig(4, 5, 3, step)
        masks = ones_masks(cfg)
        y = rand_meas(cfg, step)
        em = EnhancedMask.from_aperture(masks[0], cfg, "uniform")
        back = forward(pinv_appendix(y[0], em, cfg), masks, cfg)
        np.testing.assert_allclose(back[0].data, y[0].data, atol=1e-10)
        # the dense route agrees
        phi = dense_by_hand(masks, cfg)
        np.testing.assert_allclose(phi @ pinv_appendix(y[0], em, cfg).data.ravel(), y[0].data.ravel(), atol=1e-10)

    def test_rectification_floor(self):
        cfg = SensingConfig(2, 2, 2, 1)
        m = CodedAperture(np.array([[0.0, 1.0], [0.5, 0.0]]))
        em = EnhancedMask.from_aperture(m, cfg)
        assert em.rectification.min() == 1e-3
        np.testing.assert_array_equal(em.modulation[1], m.data)
        with pytest.raises(ValueError):
            EnhancedMask(np.ones((1, 1, 1)), np.zeros((1, 1, 1)))


class TestDense:
    def test_identity_for_single_band_open_mask(self):
        cfg = SensingConfig(2, 3, 1, 2)
        np.testing.assert_array_equal(build_dense_phi(ones_masks(cfg), cfg), np.eye(6))

    @given(cfg=configs, seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_shape_and_agreement(self, cfg, seed):
        masks = positive_masks(cfg, seed)
        phi = build_dense_phi(masks, cfg)
        assert phi.shape == (cfg.shots * cfg.height * cfg.meas_width, cfg.bands * cfg.height * cfg.width)
        np.testing.assert_array_equal(phi, dense_by_hand(masks, cfg))
        x = rand_cube(cfg, seed)
        np.testing.assert_allclose(phi @ x.data.ravel(), forward(x, masks, cfg).stack().ravel(), atol=1e-13)

    def test_cap(self):
        cfg = SensingConfig(6, 6, 4, 2, shots=3)
        with pytest.raises(ValueError, match="entries"):
            build_dense_phi(ones_masks(cfg), cfg, cap=100)


class TestOperatorNorm:
    def test_identity(self):
        cfg = SensingConfig(3, 4, 1, 0)
        assert abs(operator_norm(ones_masks(cfg), cfg) - 1.0) <= 1e-6

    def test_homogeneity(self):
        cfg = SensingConfig(4, 5, 3, 1, shots=2)
        rng = np.random.default_rng(0)
        base = [rng.random(cfg.mask_shape) * 0.5 for _ in range(2)]
        small = operator_norm([CodedAperture(b) for b in base], cfg)
        big = operator_norm([CodedAperture(2 * b) for b in base], cfg)
        assert abs(big - 2 * small) <= 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_svd(self, seed):
        # binary random apertures; continuous ones can have a nearly tied top
        # pair of singular values, which power iteration resolves slowly
        cfg = SensingConfig(4, 5, 3, 1, shots=2)
        masks = [random_mask(cfg, 0.5, seed), random_mask(cfg, 0.5, seed + 1)]
        top = np.linalg.svd(dense_by_hand(masks, cfg), compute_uv=False)[0]
        assert abs(operator_norm(masks, cfg, iters=100) - top) <= 1e-3

    def test_rayleigh_estimates_non_decreasing(self):
        cfg = SensingConfig(5, 6, 4, 2, shots=2)
        seq = rayleigh_sequence(positive_masks(cfg, 1), cfg, iters=50)
        assert all(b >= a - 1e-12 * abs(a) for a, b in zip(seq, seq[1:]))
