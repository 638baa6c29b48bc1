"""Pair estimation: exact 2-point fits, least squares, RANSAC, frame fusion."""

import math

import numpy as np
import pytest

from tircal.errors import DegenerateSampleError, EstimationFailedError
from tircal.model import (
    DriftConfig,
    ParamChain,
    RelativeParams,
    apply_forward,
    compose,
)
from tircal.temporal import (
    CorrespondenceSet,
    RansacConfig,
    fit_pair_exact,
    fit_pair_lsq,
    process_frame,
    ransac_estimate,
)

NO_DRIFT = DriftConfig(xi_gap=0.0, xi_base=0.0, gap_floor=1e-6)


def make_set(params, n, rng, from_frame=1, to_frame=2, noise=0.0, lo=0.05, hi=0.95):
    """Forward-model oracle: draw source intensities, map them exactly.

    Source intensities are restricted so targets stay inside [0, 1]; clipping
    would silently corrupt near-boundary pairs.
    """
    margin = 0.02 + 4 * noise
    lo = max(lo, params.b + margin)
    hi = min(hi, math.exp(params.a) + params.b - margin)
    assert hi > lo, "map leaves no usable source range"
    i_from = rng.uniform(lo, hi, size=n)
    i_to = apply_forward(params, i_from)
    if noise > 0.0:
        i_to = i_to + rng.normal(0.0, noise, size=n)
    i_to = np.clip(i_to, 0.0, 1.0)
    xy = rng.uniform(0, 100, size=(n, 2))
    return CorrespondenceSet(from_frame, to_frame, xy, xy.copy(), i_from, i_to)


class TestFitPairExact:
    def test_hand_value(self):
        p = fit_pair_exact((0.2, 0.15), (0.6, 0.35))
        assert p.a == pytest.approx(math.log(2), abs=1e-12)
        assert p.b == pytest.approx(-0.1, abs=1e-12)
        # Both points must reproduce through the fitted map.
        assert apply_forward(p, 0.2) == pytest.approx(0.15, abs=1e-12)
        assert apply_forward(p, 0.6) == pytest.approx(0.35, abs=1e-12)

    def test_identity(self):
        p = fit_pair_exact((0.2, 0.2), (0.6, 0.6))
        assert p.is_identity(tol=1e-12)

    def test_vertical_pair_degenerate(self):
        with pytest.raises(DegenerateSampleError):
            fit_pair_exact((0.3, 0.4), (0.3, 0.5))

    def test_negative_scale_degenerate(self):
        with pytest.raises(DegenerateSampleError):
            fit_pair_exact((0.2, 0.5), (0.6, 0.3))


class TestFitPairLsq:
    def test_recovers_noiseless(self):
        rng = np.random.default_rng(0)
        truth = RelativeParams(math.log(2), -0.1)
        i_from = rng.uniform(0.05, 0.95, size=200)
        i_to = apply_forward(truth, i_from)
        p = fit_pair_lsq(i_from, i_to)
        assert p.a == pytest.approx(truth.a, abs=1e-10)
        assert p.b == pytest.approx(truth.b, abs=1e-10)

    def test_repeated_point_degenerate(self):
        with pytest.raises(DegenerateSampleError):
            fit_pair_lsq(np.full(10, 0.4), np.full(10, 0.6))

    def test_mask_selects_subset(self):
        truth = RelativeParams(0.2, 0.05)
        i_from = np.linspace(0.1, 0.9, 50)
        i_to = apply_forward(truth, i_from)
        i_to_bad = i_to.copy()
        i_to_bad[:10] += 0.3  # corrupted rows excluded by the mask
        mask = np.ones(50, dtype=bool)
        mask[:10] = False
        p = fit_pair_lsq(i_from, np.clip(i_to_bad, 0, 1), mask)
        assert p.a == pytest.approx(truth.a, abs=1e-10)

    def test_identity_with_noise_monte_carlo(self):
        # sigma = 0.01, n = 500: estimate errors scale like 3*sigma/sqrt(n).
        rng = np.random.default_rng(42)
        i_from = rng.uniform(0.05, 0.95, size=500)
        i_to = np.clip(i_from + rng.normal(0, 0.01, size=500), 0, 1)
        p = fit_pair_lsq(i_from, i_to)
        assert abs(p.a) < 0.01
        assert abs(p.b) < 0.01


class TestRansac:
    def test_mixture_recovers_truth(self):
        rng = np.random.default_rng(123)
        truth = RelativeParams(math.log(1.5), 0.05, 1, 2)
        cset = make_set(truth, 100, rng)
        # 20 spatial-bias outliers: shifted target intensities.
        out_idx = rng.choice(100, size=20, replace=False)
        i_to = cset.i_to.copy()
        i_to[out_idx] = np.clip(i_to[out_idx] + 0.2, 0, 1)
        cset = CorrespondenceSet(1, 2, cset.xy_from, cset.xy_to, cset.i_from, i_to)
        est = ransac_estimate(cset, RansacConfig(rng_seed=7))
        assert est.params.a == pytest.approx(truth.a, abs=1e-3)
        assert est.params.b == pytest.approx(truth.b, abs=1e-3)
        assert 78 <= est.inlier_count <= 82

    def test_identity_full_consensus(self):
        rng = np.random.default_rng(5)
        cset = make_set(RelativeParams(0, 0, 1, 2), 100, rng)
        est = ransac_estimate(cset, RansacConfig(rng_seed=1))
        assert est.params.is_identity(tol=1e-9)
        assert est.inlier_count == 100
        assert est.residual_rms == pytest.approx(0.0, abs=1e-12)

    def test_too_few_consistent(self):
        cset = CorrespondenceSet(
            1, 2,
            np.zeros((3, 2)), np.zeros((3, 2)),
            np.array([0.1, 0.5, 0.9]),
            np.array([0.9, 0.1, 0.5]),
        )
        with pytest.raises(EstimationFailedError):
            ransac_estimate(cset, RansacConfig(min_inliers=4, rng_seed=0))

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        cset = make_set(RelativeParams(0.3, -0.05, 2, 5), 80, rng, 2, 5, noise=0.005)
        cfg = RansacConfig(rng_seed=99)
        a = ransac_estimate(cset, cfg)
        b = ransac_estimate(cset, cfg)
        assert a == b  # bit-identical result

    def test_outlier_robustness_within_5x(self):
        # <= 30% outliers must not inflate the error more than 5x over the
        # inlier-only fit.
        rng = np.random.default_rng(17)
        truth = RelativeParams(math.log(1.3), 0.04, 1, 2)
        cset = make_set(truth, 200, rng, noise=0.005)
        clean_est = ransac_estimate(cset, RansacConfig(rng_seed=3))
        i_to = cset.i_to.copy()
        out_idx = rng.choice(200, size=60, replace=False)
        i_to[out_idx] = np.clip(i_to[out_idx] + rng.uniform(0.1, 0.3, 60), 0, 1)
        dirty = CorrespondenceSet(1, 2, cset.xy_from, cset.xy_to, cset.i_from, i_to)
        dirty_est = ransac_estimate(dirty, RansacConfig(rng_seed=3))
        err = lambda e: math.hypot(e.params.a - truth.a, e.params.b - truth.b)
        assert err(dirty_est) <= 5 * max(err(clean_est), 1e-4)

    def test_bias_direction_without_ransac(self):
        # Positive spatial residuals on a minority of pairs inflate the
        # unguarded least-squares scale estimate; RANSAC resists.
        rng = np.random.default_rng(31)
        truth = RelativeParams(math.log(1.5), 0.05, 1, 2)
        cset = make_set(truth, 200, rng, noise=0.003)
        order = np.argsort(cset.i_from)
        biased = order[:40]  # darkest source pixels gain positive bias
        i_to = cset.i_to.copy()
        i_to[biased] = np.clip(i_to[biased] + 0.15, 0, 1)
        dirty = CorrespondenceSet(1, 2, cset.xy_from, cset.xy_to, cset.i_from, i_to)

        plain = fit_pair_lsq(dirty.i_from, dirty.i_to)
        robust = ransac_estimate(dirty, RansacConfig(rng_seed=11)).params
        assert math.exp(plain.a) > math.exp(robust.a)
        assert math.exp(plain.a) > math.exp(truth.a)


class TestProcessFrame:
    def test_single_exact_set_extends_chain(self):
        rng = np.random.default_rng(2)
        s12 = RelativeParams(0.1, 0.02, 1, 2)
        chain = ParamChain()
        chain.append_step(s12)
        s23 = RelativeParams(-0.2, 0.05, 2, 3)
        cset = make_set(s23, 150, rng, 2, 3)
        process_frame([cset], chain, RansacConfig(rng_seed=0), NO_DRIFT)
        expected = compose(chain.entry(2), s23)
        got = chain.entry(3)
        assert got.a == pytest.approx(expected.a, abs=1e-9)
        assert got.b == pytest.approx(expected.b, abs=1e-9)

    def test_two_set_fusion_matches_truth(self):
        rng = np.random.default_rng(8)
        s12 = RelativeParams(0.15, -0.03, 1, 2)
        s23 = RelativeParams(-0.1, 0.06, 2, 3)
        chain = ParamChain()
        chain.append_step(s12)
        set_23 = make_set(s23, 300, rng, 2, 3)
        set_13 = make_set(compose(s12, s23), 100, rng, 1, 3)
        process_frame([set_23, set_13], chain, RansacConfig(rng_seed=4), NO_DRIFT)
        expected = compose(chain.entry(2), s23)
        got = chain.entry(3)
        assert got.a == pytest.approx(expected.a, abs=1e-6)
        assert got.b == pytest.approx(expected.b, abs=1e-6)

    def test_fusion_weights_by_pair_count(self):
        # Two exact sets embedding different maps fuse 3:1 on (a, b).
        rng = np.random.default_rng(21)
        s12 = RelativeParams(0.05, 0.01, 1, 2)
        chain = ParamChain()
        chain.append_step(s12)
        p = RelativeParams(0.2, -0.02, 2, 3)
        q = RelativeParams(-0.1, 0.04, 2, 3)
        set_p = make_set(p, 300, rng, 2, 3)
        set_q = make_set(compose(s12, q), 100, rng, 1, 3)
        process_frame([set_p, set_q], chain, RansacConfig(rng_seed=4), NO_DRIFT)
        fused_a = (300 * p.a + 100 * q.a) / 400
        fused_b = (300 * p.b + 100 * q.b) / 400
        expected = compose(chain.entry(2), RelativeParams(fused_a, fused_b, 2, 3))
        got = chain.entry(3)
        assert got.a == pytest.approx(expected.a, abs=1e-6)
        assert got.b == pytest.approx(expected.b, abs=1e-6)

    def test_empty_sets_flags_untracked(self):
        chain = ParamChain()
        process_frame([], chain, RansacConfig(), NO_DRIFT)
        assert chain.last_frame == 2
        assert chain.entry(2).is_identity()
        assert 2 in chain.untracked

    def test_all_failed_flags_untracked(self):
        cset = CorrespondenceSet(
            1, 2,
            np.zeros((3, 2)), np.zeros((3, 2)),
            np.array([0.1, 0.5, 0.9]),
            np.array([0.9, 0.1, 0.5]),
        )
        chain = ParamChain()
        process_frame([cset], chain, RansacConfig(min_inliers=4), NO_DRIFT)
        assert chain.entry(2).is_identity()
        assert chain.untracked == {2}

    def test_parallel_matches_serial(self):
        rng = np.random.default_rng(13)
        s12 = RelativeParams(0.1, 0.0, 1, 2)
        s23 = RelativeParams(0.05, 0.01, 2, 3)
        sets = [
            make_set(s23, 120, rng, 2, 3, noise=0.004),
            make_set(compose(s12, s23), 80, rng, 1, 3, noise=0.004),
        ]
        cfg = RansacConfig(rng_seed=5)
        serial = ParamChain()
        serial.append_step(s12)
        process_frame(sets, serial, cfg, NO_DRIFT, workers=1)
        parallel = ParamChain()
        parallel.append_step(s12)
        process_frame(sets, parallel, cfg, NO_DRIFT, workers=4)
        assert serial.entry(3) == parallel.entry(3)

    def test_fusion_reduces_variance(self):
        # Over 100 seeded trials the fused two-set estimate is at least as
        # accurate (RMSE) as the single-set estimate.
        rng = np.random.default_rng(77)
        s12 = RelativeParams(0.1, -0.02, 1, 2)
        s23 = RelativeParams(-0.15, 0.05, 2, 3)
        single_err, fused_err = [], []
        cfg = RansacConfig(rng_seed=1, min_inliers=5, inlier_threshold=0.05)
        for _ in range(100):
            chain_a = ParamChain()
            chain_a.append_step(s12)
            chain_b = ParamChain()
            chain_b.append_step(s12)
            near = make_set(s23, 60, rng, 2, 3, noise=0.01)
            far = make_set(compose(s12, s23), 60, rng, 1, 3, noise=0.01)
            process_frame([near], chain_a, cfg, NO_DRIFT)
            process_frame([near, far], chain_b, cfg, NO_DRIFT)
            truth = compose(RelativeParams(s12.a, s12.b, 1, 2), s23)
            for chain, sink in ((chain_a, single_err), (chain_b, fused_err)):
                e = chain.entry(3)
                sink.append((e.a - truth.a) ** 2 + (e.b - truth.b) ** 2)
        assert math.sqrt(np.mean(fused_err)) <= math.sqrt(np.mean(single_err))
