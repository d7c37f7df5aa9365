import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cachenet import partitioner as pt

PI = math.pi
SIGMA = pt.sigma_from(4, 0.3, 0.3)


def soft_code_oracle(theta, K, sigma):
    """Scalar evaluation of the wrapped-Gaussian soft code."""
    out = []
    for k in range(1, K + 1):
        zeta = 2 * PI * (k - 0.5) / K
        out.append(sum(math.exp(-((zeta - theta + 2 * PI * n) ** 2) / (2 * sigma ** 2))
                       for n in (-1, 0, 1)))
    return out


def nearest_midpoint(theta, K):
    best, best_d = None, math.inf
    for k in range(1, K + 1):
        zeta = 2 * PI * (k - 0.5) / K
        d = abs(theta - zeta) % (2 * PI)
        d = min(d, 2 * PI - d)
        if d < best_d - 1e-15:
            best, best_d = k, d
    return best


class TestAngle:
    @pytest.mark.parametrize("z, expected", [
        ((1, 1), PI / 4), ((-1, 0), PI), ((0, -2), -PI / 2), ((0, 0), 0.0),
        ((-1, -1), -3 * PI / 4), ((0, 3), PI / 2), ((2, 0), 0.0), ((-1, 1), 3 * PI / 4),
    ])
    def test_cases(self, z, expected):
        assert pt.angle_of(z) == pytest.approx(expected, abs=1e-15)

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
    def test_agrees_with_atan2_off_axis(self, x, y):
        if x == 0 and y == 0:
            return
        y += 0.0  # the case split has no signed zero; atan2 does
        theta = pt.angle_of((x, y))
        assert -PI < theta <= PI
        diff = (theta - math.atan2(y, x)) % (2 * PI)
        assert min(diff, 2 * PI - diff) <= 1e-12

    def test_vectorised(self):
        np.testing.assert_allclose(pt.angle_of(np.array([[1, 1], [-1, 0]])), [PI / 4, PI])


class TestJitter:
    def test_wraparound(self):
        assert pt.jitter(2 * PI - 0.01, 0.02) == pytest.approx(0.01, abs=1e-12)

    def test_negative_input(self):
        assert pt.jitter(-PI / 2) == pytest.approx(3 * PI / 2)

    @given(st.floats(-100, 100), st.floats(-1, 1))
    def test_range(self, theta, eps):
        t = pt.jitter(theta, eps)
        assert 0.0 <= t < 2 * PI


class TestGeometry:
    def test_midpoints(self):
        np.testing.assert_allclose(pt.midpoints(4), [PI / 4, 3 * PI / 4, 5 * PI / 4, 7 * PI / 4])
        np.testing.assert_allclose(pt.midpoints(2), [PI / 2, 3 * PI / 2])
        assert pt.midpoints(8)[0] == pytest.approx(PI / 8)
        with pytest.raises(ValueError):
            pt.midpoints(1)

    def test_sigma_value(self):
        assert SIGMA == pytest.approx(0.65798, abs=5e-6)

    def test_zero_overlap_half_width(self):
        cfg = pt.PartitionConfig(K=4, gamma=0.0, tau=0.3)
        assert cfg.half_width == pytest.approx(PI / 4, abs=1e-15)

    @pytest.mark.parametrize("tau", [0.0, 1.0, 1.5, -0.1])
    def test_sigma_rejects_tau(self, tau):
        with pytest.raises(ValueError):
            pt.sigma_from(4, 0.3, tau)

    @given(st.integers(2, 64), st.floats(0, 0.99), st.floats(0.001, 0.999))
    def test_half_width_identity(self, K, gamma, tau):
        sigma = pt.sigma_from(K, gamma, tau)
        assert abs(sigma * math.sqrt(-2 * math.log(tau)) - PI * (1 + gamma) / K) <= 1e-12


class TestSoftCode:
    def test_pi_over_four(self):
        c = pt.soft_code(PI / 4, pt.midpoints(4), SIGMA)
        np.testing.assert_allclose(c, [1.0, 0.0579, 0.0, 0.0579], atol=5e-5)
        assert c[1] == c[3]

    def test_one_partition_at_pi_over_three(self):
        c = pt.soft_code(PI / 3, pt.midpoints(4), SIGMA)
        assert c[0] == pytest.approx(0.924, abs=5e-4)
        assert c[1] == pytest.approx(0.138, abs=5e-4)
        assert int(np.sum(c >= 0.3)) == 1

    def test_two_partitions_at_four_pi_over_nine(self):
        c = pt.soft_code(4 * PI / 9, pt.midpoints(4), SIGMA)
        assert c[0] == pytest.approx(0.650, abs=5e-4)
        assert c[1] == pytest.approx(0.345, abs=5e-4)
        assert int(np.sum(c >= 0.3)) == 2

    @given(st.floats(0, 2 * PI, exclude_max=True), st.integers(2, 12))
    def test_matches_scalar_oracle(self, theta, K):
        sigma = pt.sigma_from(K, 0.3, 0.3)
        np.testing.assert_allclose(pt.soft_code(theta, pt.midpoints(K), sigma),
                                   soft_code_oracle(theta, K, sigma), rtol=0, atol=1e-12)

    @given(st.floats(0, 2 * PI, exclude_max=True), st.integers(2, 12))
    def test_rotation_shifts_code(self, theta, K):
        sigma = pt.sigma_from(K, 0.3, 0.3)
        zeta = pt.midpoints(K)
        base = pt.soft_code(theta, zeta, sigma)
        # rotate without folding so both evaluations use the same wrap terms
        rotated = pt.soft_code(theta + 2 * PI / K, zeta, sigma)
        shifted = np.roll(base, 1)
        # the wrap window is three periods wide, so only entries far from its edge match
        inside = np.abs(zeta - theta - 2 * PI / K) < PI
        np.testing.assert_allclose(rotated[inside], shifted[inside], atol=1e-12)

    def test_rotation_sweep_with_folding(self):
        K, sigma = 4, SIGMA
        zeta = pt.midpoints(K)
        for theta in np.linspace(0, 2 * PI, 400, endpoint=False):
            a = pt.soft_code(theta, zeta, sigma)
            b = pt.soft_code(pt.jitter(theta + 2 * PI / K), zeta, sigma)
            np.testing.assert_allclose(b, np.roll(a, 1), atol=1e-12)

    @given(st.floats(0, 2 * PI, exclude_max=True))
    def test_entries_bounded(self, theta):
        c = pt.soft_code(theta, pt.midpoints(4), SIGMA)
        assert np.all((c >= 0) & (c <= 3))


class TestMembership:
    def test_sector_equivalence_sweep(self):
        cfg = pt.PartitionConfig()
        theta = np.linspace(0, 2 * PI, 10_000, endpoint=False)
        c = pt.soft_code(theta, cfg.midpoints, cfg.sigma)
        d = pt.circular_distance(theta, cfg.midpoints)
        clear = np.abs(d - cfg.half_width) > 1e-9
        assert np.array_equal((c >= cfg.tau)[clear], (d <= cfg.half_width)[clear])

    def test_select_matches_nearest_midpoint(self):
        theta = np.linspace(0, 2 * PI, 10_000, endpoint=False)
        got = pt.select_submodel(pt.soft_code(theta, pt.midpoints(4), SIGMA))
        expected = [nearest_midpoint(t, 4) for t in theta]
        np.testing.assert_array_equal(got, expected)

    def test_selection_sequence_over_rotation(self):
        theta = np.linspace(0, 2 * PI, 8, endpoint=False) + PI / 8
        sel = pt.select_submodel(pt.soft_code(theta, pt.midpoints(4), SIGMA))
        assert list(dict.fromkeys(sel.tolist())) == [1, 2, 3, 4]

    def test_select_tie_lowest(self):
        assert pt.select_submodel([0.9, 0.1, 0.0, 0.1]) == 1
        assert pt.select_submodel(pt.soft_code(PI / 2, pt.midpoints(4), SIGMA)) == 1

    def test_uncertainty_code(self):
        np.testing.assert_array_equal(pt.uncertainty_code([0.5, 0.2, 0.9, 0.4], 0.3), [0, 0.3, 0, 0])
        np.testing.assert_array_equal(pt.uncertainty_code([0.7] * 4, 0.3), [0.3, 0, 0, 0])
        np.testing.assert_array_equal(pt.uncertainty_code([1.2], 0.3), [0.3])

    def test_combine_example(self):
        c = pt.combine([1.0, 0.058, 0.0, 0.058], [0, 0.3, 0, 0], 0.5)
        np.testing.assert_allclose(c, [0.5, 0.179, 0.0, 0.029])
        assert pt.partition_set(c, 0.3) == {1, 2}

    def test_combine_length_mismatch(self):
        with pytest.raises(ValueError):
            pt.combine([1.0, 0.0], [0.3, 0.0, 0.0], 0.5)

    def test_alpha_one_uses_geometry_only(self):
        c = pt.combine([0.2, 0.1, 0.0, 0.05], [0, 0, 0.3, 0], 1.0)
        assert pt.partition_set(c, 0.3) == {1}

    def test_fallback_to_argmax(self):
        # c = [0.039, 0.108, 0, 0], all below tau / 2
        c = pt.combine([0.01, 0.12, 0.0, 0.0], [0.3, 0, 0, 0], 0.9)
        assert pt.partition_set(c, 0.3) == {2}

    @given(st.lists(st.floats(0, 1), min_size=4, max_size=4),
           st.lists(st.floats(0, 3), min_size=4, max_size=4),
           st.floats(0, 1), st.floats(0.01, 0.99))
    def test_never_empty(self, cbar, entropies, alpha, tau):
        c = pt.combine(cbar, pt.uncertainty_code(entropies, tau), alpha)
        P = pt.partition_set(c, tau)
        assert P
        if alpha <= 0.5:
            assert int(np.argmin(entropies)) + 1 in P


class TestConfig:
    def test_defaults(self):
        cfg = pt.PartitionConfig()
        assert cfg.sigma == pytest.approx(0.657975764, abs=1e-9)

    @pytest.mark.parametrize("kwargs", [dict(K=1), dict(tau=1.0), dict(gamma=1.0),
                                        dict(alpha_mix=1.5), dict(epsilon_std=-1)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            pt.PartitionConfig(**kwargs)

    def test_no_jitter_without_rng(self):
        z = np.array([[1.0, 1.0]])
        np.testing.assert_array_equal(pt.soft_codes_from_latent(z, pt.PartitionConfig()),
                                      pt.soft_code(np.array([PI / 4]), pt.midpoints(4), SIGMA))
