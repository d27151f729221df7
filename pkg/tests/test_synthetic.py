import logging
import math

import numpy as np
import pytest

from qbin.measures import Measure, e_cpv, e_mha, s_mha
from qbin.synthetic import (
    NoiseSpec,
    SyntheticConfig,
    end_to_end_synthetic,
    extract_records,
    generate_cases,
    run_synthetic,
    split_folds,
)

pytestmark = pytest.mark.filterwarnings("ignore::qbin.binning.TieWarning")

QUIET = dict(epistemic_jitter_sigma=0.0, aleatoric=NoiseSpec(0.0), difficulty_sd=0.0, ambiguity_sd=0.0,
             amplitude_noise=0.0, outlier_rate=0.0)


def ecpv_monte_carlo(draws, t, jitter, difficulty_sd=0.0, aleatoric=0.0, ambiguity_sd=0.0, seed=1234):
    """Mean ensemble dispersion of rounded peak offsets, simulated directly."""
    rng = np.random.default_rng(seed)
    scale = jitter * np.exp(difficulty_sd * rng.standard_normal((draws, 1, 1)))
    amb = aleatoric * np.exp(ambiguity_sd * rng.standard_normal((draws, 1, 1)))
    offsets = rng.standard_normal((draws, t, 2)) * scale + rng.standard_normal((draws, t, 2)) * amb
    # isotropic blobs factor per axis, so the argmax pixel is the rounded centre
    peaks = np.rint(offsets)
    centre = peaks.mean(axis=1, keepdims=True)
    return float(np.linalg.norm(peaks - centre, axis=2).mean())


class TestGenerator:
    def test_noise_free(self):
        cfg = SyntheticConfig(seed=3, n_images=20, grid=(40, 40), **QUIET)
        for case in generate_cases(cfg):
            assert all(p == case.true_coord for p in case.member_peaks)
            assert case.annotated_coord == case.true_coord
            ex = e_cpv(case.ensemble)
            assert ex.uncertainty == 0.0 and ex.coord == case.true_coord

    def test_identical_members_emha_equals_smha(self):
        cfg = SyntheticConfig(seed=5, n_images=10, grid=(40, 40), **QUIET)
        for case in generate_cases(cfg):
            a, b = e_mha(case.ensemble), s_mha(case.ensemble[0])
            assert (a.coord, a.uncertainty) == (b.coord, b.uncertainty)

    def test_same_seed_bit_identical(self):
        cfg = SyntheticConfig(seed=42, n_images=15, grid=(64, 64), outlier_rate=0.3)
        a, b = generate_cases(cfg), generate_cases(cfg)
        assert [c.ensemble for c in a] == [c.ensemble for c in b]
        assert [(c.annotated_coord, c.is_outlier) for c in a] == [(c.annotated_coord, c.is_outlier) for c in b]

    def test_thread_count_does_not_matter(self):
        cfg = SyntheticConfig(seed=7, n_images=24, grid=(48, 48), outlier_rate=0.2)
        one = generate_cases(cfg, workers=1)
        many = generate_cases(cfg, workers=4)
        assert [c.ensemble for c in one] == [c.ensemble for c in many]

    def test_different_seeds_differ(self):
        a = generate_cases(SyntheticConfig(seed=1, n_images=5, grid=(48, 48)))
        b = generate_cases(SyntheticConfig(seed=2, n_images=5, grid=(48, 48)))
        assert [c.true_coord for c in a] != [c.true_coord for c in b]

    def test_coords_inside_grid(self):
        cfg = SyntheticConfig(seed=0, n_images=50, grid=(40, 30), epistemic_jitter_sigma=6.0, outlier_rate=0.5,
                              outlier_displacement=25.0)
        for case in generate_cases(cfg):
            for p in case.member_peaks:
                assert 0 <= p.row <= 39 and 0 <= p.col <= 29
            assert all(h.shape == (40, 30) for h in case.ensemble)

    def test_clamps_with_warning(self, caplog):
        cfg = SyntheticConfig(seed=0, n_images=3, grid=(20, 20), margin=2, outlier_rate=1.0,
                              outlier_displacement=100.0, max_retries=2)
        with caplog.at_level(logging.WARNING, logger="qbin.synthetic"):
            cases = generate_cases(cfg)
        assert "clamping" in caplog.text
        for case in cases:
            assert all(0 <= p.row <= 19 and 0 <= p.col <= 19 for p in case.member_peaks)

    def test_outlier_displacement_magnitude(self):
        cfg = SyntheticConfig(seed=4, n_images=40, grid=(160, 160), outlier_rate=1.0, outlier_displacement=50.0,
                              aleatoric=NoiseSpec(0.0), margin=55)
        for case in generate_cases(cfg):
            assert case.is_outlier
            for p in case.member_peaks:
                d = math.hypot(p.row - case.true_coord.row, p.col - case.true_coord.col)
                assert d == pytest.approx(50.0, abs=1e-9)

    @pytest.mark.parametrize("kw", [dict(outlier_rate=1.5), dict(n_images=-1), dict(ensemble_size=0),
                                    dict(grid=(10, 10), margin=5), dict(peak_sigma=0.0),
                                    dict(epistemic_jitter_sigma=-1.0), dict(pixel_spacing=0.0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SyntheticConfig(**kw)


class TestNoiseSpec:
    def test_isotropic_matching_keeps_trace(self):
        a = NoiseSpec(8.0, 2.0, 0.6)
        b = NoiseSpec.isotropic_matching(a)
        assert b.total_variance == pytest.approx(a.total_variance)
        assert np.trace(a.cov()) == pytest.approx(68.0)
        assert b.sigma_major == b.sigma_minor

    def test_sample_covariance(self):
        spec = NoiseSpec(3.0, 1.0, 0.9)
        rng = np.random.default_rng(0)
        draws = np.array([spec.sample(rng) for _ in range(40000)])
        np.testing.assert_allclose(np.cov(draws.T), spec.cov(), atol=0.15)

    def test_rejects_minor_above_major(self):
        with pytest.raises(ValueError):
            NoiseSpec(1.0, 2.0)


class TestMonteCarloOracle:
    def test_pure_jitter(self):
        cfg = SyntheticConfig(seed=11, n_images=500, grid=(64, 64), ensemble_size=5, epistemic_jitter_sigma=2.0,
                              aleatoric=NoiseSpec(0.0), difficulty_sd=0.0, ambiguity_sd=0.0)
        got = np.mean([r.uncertainty for r in extract_records(cfg, ["ECPV"])[Measure.ECPV]])
        ref = ecpv_monte_carlo(100_000, 5, 2.0)
        assert got == pytest.approx(ref, rel=0.15)

    def test_default_noise_law(self):
        cfg = SyntheticConfig(seed=12, n_images=500, grid=(96, 96), ensemble_size=5, epistemic_jitter_sigma=2.0)
        got = np.mean([r.uncertainty for r in extract_records(cfg, ["ECPV"])[Measure.ECPV]])
        ref = ecpv_monte_carlo(100_000, 5, 2.0, cfg.difficulty_sd, cfg.aleatoric.sigma_major, cfg.ambiguity_sd)
        assert got == pytest.approx(ref, rel=0.15)


class TestEndToEnd:
    def test_split_folds(self):
        (val, test), = split_folds(10, 1, 0.3)
        assert val.tolist() == [0, 1, 2] and test.tolist() == list(range(3, 10))
        folds = split_folds(9, 3)
        assert [t.tolist() for _, t in folds] == [[0, 1, 2], [3, 4, 5], [6, 7, 8]]
        assert [v.tolist() for v, _ in folds] == [[3, 4, 5], [6, 7, 8], [0, 1, 2]]

    def test_outliers_land_in_top_bin(self):
        cfg = SyntheticConfig(seed=0, n_images=300, outlier_rate=0.2, outlier_displacement=50.0)
        rep = end_to_end_synthetic(cfg, 5, "ECPV")
        err = rep.mean["bin_mean_error"]
        assert err[-1] > err[0]

    def test_noise_free_errors_vanish(self):
        cfg = SyntheticConfig(seed=1, n_images=60, grid=(40, 40), **QUIET)
        rep = end_to_end_synthetic(cfg, 3, "EMHA")
        assert all(e == 0.0 for e in rep.mean["bin_mean_error"] if not math.isnan(e))

    def test_multi_fold_report(self):
        cfg = SyntheticConfig(seed=2, n_images=120, grid=(64, 64), outlier_rate=0.1)
        reps = run_synthetic(cfg, 3, n_folds=4)
        assert set(reps) == set(Measure)
        for rep in reps.values():
            assert len(rep.folds) == 4
            assert all(0 <= j <= 1 for j in rep.mean["jaccard"])

    def test_outlier_rate_raises_pooled_error(self):
        means = {}
        for rate in (0.0, 0.1, 0.3):
            vals = []
            for seed in range(4):
                cfg = SyntheticConfig(seed=seed, n_images=150, outlier_rate=rate)
                recs = extract_records(cfg, ["EMHA"])[Measure.EMHA]
                vals.append(np.mean([r.error for r in recs]))
            means[rate] = np.mean(vals)
        assert means[0.0] < means[0.1] < means[0.3]
