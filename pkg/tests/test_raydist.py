import numpy as np
import pytest

from rayvis.counters import counters
from rayvis.errors import InputError, IntervalOrderError
from rayvis.raydist import (
    DensityProfile,
    DistributionMap,
    MixtureOfLogistics,
    RawRayParams,
    SIGMA_MIN_FRACTION,
    decode,
    density_visibility_oracle,
    fit_logistics_to_density,
    grad_cdf,
    hit_prob_interval,
    input_ray_alpha,
    mixture_cdf_param_grads,
    occlusion_cdf,
    visibility,
)


def random_raw(rng, n=2):
    return RawRayParams(*rng.normal(0, 1.5, size=(3, n)))


SINGLE = MixtureOfLogistics([1.0], [0.5], [1.0])


class TestDecode:
    def test_all_zero_raw(self):
        mix = decode(RawRayParams(np.zeros(2), np.zeros(2), np.zeros(2)), (1.0, 3.0))
        np.testing.assert_allclose(mix.means, [2.0, 2.0], atol=1e-12)
        np.testing.assert_allclose(mix.weights, [0.5, 0.5], atol=1e-12)
        expected_sigma = SIGMA_MIN_FRACTION * 2.0 + np.log(2.0)
        np.testing.assert_allclose(mix.scales, expected_sigma, atol=1e-12)

    def test_weight_logit_saturation(self):
        mix = decode(RawRayParams([0, 0], [0, 0], [20.0, -20.0]), (1.0, 3.0))
        np.testing.assert_allclose(mix.weights, [1.0, 0.0], atol=1e-8)

    def test_mean_saturation_to_far(self):
        mix = decode(RawRayParams([20.0], [0.0], [0.0]), (1.0, 3.0))
        assert abs(mix.means[0] - 3.0) < 1e-6 * 2.0

    def test_always_valid(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            mix = decode(random_raw(rng), (0.5, 4.5))
            assert abs(mix.weights.sum() - 1.0) <= 1e-9
            assert np.all(mix.scales >= SIGMA_MIN_FRACTION * 4.0)

    def test_total_function_at_extreme_raw_values(self):
        # decode must stay valid even where sigmoid/softmax saturate
        mix = decode(RawRayParams([1e6, -1e6], [-1e3, 1e3], [800.0, -800.0]), (1, 3))
        assert np.all(mix.weights > 0)
        assert abs(mix.weights.sum() - 1.0) <= 1e-9
        assert np.all(mix.scales > 0)
        assert np.all((1.0 <= mix.means) & (mix.means <= 3.0))


class TestOcclusionCdf:
    def test_sigmoid_symmetry_at_mean(self):
        assert occlusion_cdf(SINGLE, 1.0) == pytest.approx(0.5, abs=1e-12)

    def test_quarter_point(self):
        assert occlusion_cdf(SINGLE, 1.0 + 0.5 * np.log(3)) == pytest.approx(0.75, abs=1e-12)

    def test_two_component_mirror_symmetry(self):
        mix = MixtureOfLogistics([1.0, 2.0], [0.1, 0.1], [0.5, 0.5])
        assert occlusion_cdf(mix, 1.5) == pytest.approx(0.5, abs=1e-12)

    def test_monotone_and_open_interval(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            mix = decode(random_raw(rng), (1.0, 5.0))
            grid = np.linspace(1.0, 5.0, 256)
            t = occlusion_cdf(mix, grid)
            assert np.all(np.diff(t) >= 0)
            assert np.all(t > 0) and np.all(t < 1)


class TestVisibility:
    def test_complement(self):
        assert visibility(SINGLE, 1.0) == pytest.approx(0.5, abs=1e-12)

    def test_limits(self):
        assert visibility(SINGLE, -1e6) == pytest.approx(1.0, abs=1e-12)
        assert visibility(SINGLE, 1e6) == pytest.approx(0.0, abs=1e-12)

    def test_nonincreasing(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            mix = decode(random_raw(rng), (1.0, 5.0))
            z0, z1 = sorted(rng.uniform(0.0, 6.0, size=2))
            assert visibility(mix, z1) <= visibility(mix, z0) + 1e-15


class TestHitProbInterval:
    def test_quarter_interval(self):
        v = hit_prob_interval(SINGLE, 1.0, 1.0 + 0.5 * np.log(3))
        assert v == pytest.approx(0.25, abs=1e-12)

    def test_degenerate_interval(self):
        assert hit_prob_interval(SINGLE, 1.7, 1.7) == 0.0

    def test_ordering_enforced(self):
        with pytest.raises(IntervalOrderError):
            hit_prob_interval(SINGLE, 2.0, 1.0)

    def test_telescoping_64_bins(self):
        rng = np.random.default_rng(3)
        mix = decode(random_raw(rng), (1.0, 5.0))
        edges = np.linspace(1.0, 5.0, 65)
        total = sum(hit_prob_interval(mix, a, b) for a, b in zip(edges[:-1], edges[1:]))
        expected = occlusion_cdf(mix, 5.0) - occlusion_cdf(mix, 1.0)
        assert total == pytest.approx(expected, abs=1e-12)

    def test_telescoping_ten_thousand_bins(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            mix = decode(random_raw(rng), (1.0, 5.0))
            edges = np.linspace(1.0, 5.0, 10_001)
            probs = hit_prob_interval(mix, edges[:-1], edges[1:])
            expected = occlusion_cdf(mix, 5.0) - occlusion_cdf(mix, 1.0)
            assert abs(probs.sum() - expected) <= 1e-12


class TestInputRayAlpha:
    def test_half(self):
        alpha = input_ray_alpha(SINGLE, 1.0, 1.0 + 0.5 * np.log(3))
        assert alpha == pytest.approx(0.5, abs=1e-12)

    def test_unocculted_prefix(self):
        alpha = input_ray_alpha(SINGLE, -40.0, 1.0 + 0.5 * np.log(3))
        assert alpha == pytest.approx(0.75, abs=1e-9)

    def test_composition_identity(self):
        rng = np.random.default_rng(5)
        mix = decode(random_raw(rng), (1.0, 5.0))
        edges = np.linspace(1.4, 4.6, 33)
        alphas = np.array(
            [input_ray_alpha(mix, a, b) for a, b in zip(edges[:-1], edges[1:])]
        )
        lhs = 1.0 - np.prod(1.0 - alphas)
        t0 = occlusion_cdf(mix, edges[0])
        t1 = occlusion_cdf(mix, edges[-1])
        assert lhs == pytest.approx((t1 - t0) / (1 - t0), abs=1e-12)

    def test_saturation_clamps_with_flag(self):
        mix = MixtureOfLogistics([1.0], [1e-4], [1.0])
        alpha, saturated = input_ray_alpha(mix, 500.0, 600.0, return_saturated=True)
        assert alpha == 1.0
        assert saturated
        alpha, saturated = input_ray_alpha(mix, 1.0, 2.0, return_saturated=True)
        assert not saturated


class TestGradCdf:
    def test_mean_gradient_at_center(self):
        # constrained layer: dt/dmu at z = mu is -w * S'(0) / sigma = -w / (4 sigma)
        mu, sig, w = np.array([2.0]), np.array([0.4]), np.array([1.0])
        _, dmu, _, dw = mixture_cdf_param_grads(mu, sig, w, np.array(2.0))
        assert dmu[0] == pytest.approx(-0.25 / 0.4, abs=1e-12)
        assert dw[0] == pytest.approx(0.5, abs=1e-12)

    def test_matches_central_differences(self):
        rng = np.random.default_rng(6)
        eps = 1e-5
        checked = 0
        for _ in range(500):
            n = int(rng.integers(1, 4))
            raw = random_raw(rng, n)
            z = rng.uniform(0.0, 6.0)
            grad = grad_cdf(raw, z, (1.0, 5.0))
            flat = raw.as_array().reshape(-1)
            for i in range(flat.size):
                p = flat.copy()
                p[i] += eps
                tp = occlusion_cdf(decode(RawRayParams.from_array(p.reshape(3, n)), (1, 5)), z)
                p[i] -= 2 * eps
                tm = occlusion_cdf(decode(RawRayParams.from_array(p.reshape(3, n)), (1, 5)), z)
                fd = (tp - tm) / (2 * eps)
                if abs(grad[i]) > 1e-6:
                    assert abs(grad[i] - fd) / abs(fd) < 1e-4
                    checked += 1
        assert checked > 1000

    def test_weight_logit_gradients_sum_to_zero(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(1, 5))
            raw = random_raw(rng, n)
            grad = grad_cdf(raw, rng.uniform(0, 6), (1.0, 5.0))
            assert abs(grad[2 * n :].sum()) < 1e-12


class TestDensityOracle:
    def test_vacuum(self):
        profile = DensityProfile([0, 1, 2, 3], [0.0, 0.0, 0.0])
        for z in (0.5, 1.5, 3.0):
            assert density_visibility_oracle(profile, z) == 1.0

    def test_single_segment_half_transparent(self):
        profile = DensityProfile([0.0, 1.0], [np.log(2.0)])
        assert density_visibility_oracle(profile, 1.0) == pytest.approx(0.5, abs=1e-12)

    def test_monotone_nonincreasing(self):
        rng = np.random.default_rng(8)
        knots = np.cumsum(rng.uniform(0.1, 1.0, size=9))
        profile = DensityProfile(knots, rng.uniform(0, 2, size=8))
        zs = np.linspace(knots[0], knots[-1], 50)
        vals = density_visibility_oracle(profile, zs)
        assert np.all(np.diff(vals) <= 1e-15)

    def test_negative_density_treated_as_zero(self):
        profile = DensityProfile([0.0, 1.0], [-3.0])
        assert density_visibility_oracle(profile, 1.0) == 1.0


class TestEvaluationCounters:
    def test_one_cdf_evaluation_per_visibility_query(self):
        counters.reset()
        visibility(SINGLE, 2.0)
        assert counters.snapshot().cdf_evals == 1

    def test_density_oracle_costs_one_evaluation_per_segment(self):
        knots = np.linspace(0.0, 1.0, 33)
        profile = DensityProfile(knots, np.full(32, 0.3))
        counters.reset()
        density_visibility_oracle(profile, 1.0)
        assert counters.snapshot().density_evals == 32
        counters.reset()
        visibility(SINGLE, 2.0)
        assert counters.snapshot().cdf_evals == 1
        assert counters.snapshot().density_evals == 0


class TestFitLogisticsToDensity:
    def test_opaque_spike_recovers_location(self):
        knots = np.linspace(1.0, 5.0, 41)
        dens = np.zeros(40)
        spike_index = 17
        dens[spike_index] = 200.0
        profile = DensityProfile(knots, dens)
        grid = np.linspace(1.0, 5.0, 161)
        mix = fit_logistics_to_density(profile, 1, grid)
        spike_lo, spike_hi = knots[spike_index], knots[spike_index + 1]
        cell = knots[1] - knots[0]
        assert spike_lo - cell <= mix.means[0] <= spike_hi + cell

    def test_zero_density_fits_to_zero(self):
        profile = DensityProfile(np.linspace(1.0, 5.0, 11), np.zeros(10))
        grid = np.linspace(1.0, 5.0, 101)
        mix = fit_logistics_to_density(profile, 2, grid)
        assert np.max(occlusion_cdf(mix, grid)) < 0.05

    def test_two_opaque_surfaces(self):
        knots = np.linspace(1.0, 5.0, 41)
        dens = np.zeros(40)
        dens[10] = 50.0
        dens[30] = 50.0
        profile = DensityProfile(knots, dens)
        grid = np.linspace(1.0, 5.0, 201)
        mix = fit_logistics_to_density(profile, 2, grid)
        target = 1.0 - density_visibility_oracle(profile, grid)
        assert np.max(np.abs(occlusion_cdf(mix, grid) - target)) < 0.05


class TestDistributionMapFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        params = rng.normal(size=(5, 7, 3, 2)).astype(np.float32).astype(np.float64)
        dmap = DistributionMap(view=3, params=params)
        path = tmp_path / "m.nray"
        dmap.save(path)
        first = path.read_bytes()
        loaded = DistributionMap.load(path)
        assert loaded.view == 3
        assert loaded.height == 5 and loaded.width == 7 and loaded.n_components == 2
        loaded.save(path)
        assert path.read_bytes() == first

    def test_header_layout(self, tmp_path):
        dmap = DistributionMap(view=1, params=np.zeros((2, 2, 3, 1)))
        path = tmp_path / "m.nray"
        dmap.save(path)
        blob = path.read_bytes()
        assert blob[:4] == b"NRAY"
        assert int.from_bytes(blob[4:8], "little") == 1   # version
        assert int.from_bytes(blob[8:12], "little") == 1  # view
        assert int.from_bytes(blob[12:16], "little") == 2
        assert int.from_bytes(blob[16:20], "little") == 2
        assert int.from_bytes(blob[20:24], "little") == 1
        assert len(blob) == 24 + 2 * 2 * 3 * 1 * 4

    def test_rejects_bad_files(self, tmp_path):
        path = tmp_path / "bad.nray"
        path.write_bytes(b"XRAY" + b"\0" * 40)
        with pytest.raises(InputError):
            DistributionMap.load(path)
        path.write_bytes(b"NRAY" + b"\0" * 10)
        with pytest.raises(InputError):
            DistributionMap.load(path)

    def test_raw_at_round_trip(self):
        rng = np.random.default_rng(10)
        dmap = DistributionMap(view=0, params=rng.normal(size=(3, 4, 3, 2)))
        raw = dmap.raw_at(1, 2)
        assert np.array_equal(raw.as_array(), dmap.params[1, 2])
        decode(raw, (1.0, 2.0))  # decodes validly
