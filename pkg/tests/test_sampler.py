"""Sampler behavior on analytic targets plus diagnostic correctness."""

import math

import numpy as np
import pytest
from scipy.stats import kstest

import momentum.sampler as sampler_mod
from momentum.sampler import (
    PosteriorDraws, SamplerConfig, SummaryRow, _mass_window_ends,
    effective_sample_size, load_draws, sample, save_draws, split_rhat,
    summarize, write_summary_csv,
)


def std_normal(u):
    return -0.5 * float(u @ u), -u


CFG = SamplerConfig(chains=4, warmup_iters=1000, sampling_iters=1000, seed=123)


@pytest.fixture(scope="module")
def normal5_draws():
    return sample(std_normal, 5, CFG)


class TestAnalyticTargets:
    def test_standard_normal_moments(self, normal5_draws):
        flat = normal5_draws.flat_matrix()
        for i in range(5):
            col = flat[:, i]
            ess, _ = effective_sample_size(normal5_draws.draws[:, :, i])
            mcse = col.std(ddof=1) / math.sqrt(ess)
            assert abs(col.mean()) <= 3 * mcse
            assert abs(col.var(ddof=1) - 1.0) <= 0.10

    def test_standard_normal_diagnostics(self, normal5_draws):
        for i in range(5):
            mat = normal5_draws.draws[:, :, i]
            assert split_rhat(mat) <= 1.01
            ess_bulk, ess_tail = effective_sample_size(mat)
            assert ess_bulk >= 400
            assert ess_tail >= 400

    def test_correlated_bivariate_normal(self):
        rho = 0.9
        prec = np.linalg.inv(np.array([[1.0, rho], [rho, 1.0]]))

        def target(u):
            return -0.5 * float(u @ prec @ u), -(prec @ u)

        draws = sample(target, 2, CFG)
        flat = draws.flat_matrix()
        got = np.corrcoef(flat.T)[0, 1]
        assert abs(got - rho) <= 0.05

    def test_fixed_seed_is_bit_identical(self, normal5_draws):
        again = sample(std_normal, 5, CFG)
        assert np.array_equal(normal5_draws.draws, again.draws)
        assert np.array_equal(normal5_draws.divergences, again.divergences)
        assert np.array_equal(normal5_draws.tree_depths, again.tree_depths)

    def test_different_seed_differs(self):
        cfg2 = SamplerConfig(chains=2, warmup_iters=200, sampling_iters=200, seed=9)
        cfg3 = SamplerConfig(chains=2, warmup_iters=200, sampling_iters=200, seed=10)
        assert not np.array_equal(sample(std_normal, 3, cfg2).draws,
                                  sample(std_normal, 3, cfg3).draws)

    def test_empirical_cdf_ks(self):
        cfg = SamplerConfig(chains=4, warmup_iters=1000, sampling_iters=1000,
                            seed=2024)
        draws = sample(std_normal, 1, cfg)
        stat, pvalue = kstest(draws.flat_matrix()[:, 0], "norm")
        assert pvalue > 0.01

    def test_chain_independence(self, normal5_draws):
        mat = normal5_draws.draws[:, :, 0]
        for a in range(mat.shape[0]):
            for b in range(a + 1, mat.shape[0]):
                r = np.corrcoef(mat[a], mat[b])[0, 1]
                assert abs(r) < 0.1

    def test_nonfinite_initialization_aborts(self):
        def busted(u):
            return -math.inf, np.zeros_like(u)

        with pytest.raises(RuntimeError, match="no finite initialization"):
            sample(busted, 3, SamplerConfig(chains=1, warmup_iters=10,
                                            sampling_iters=10, seed=0))

    def test_divergence_warning_attached(self, monkeypatch):
        def fake_run_chain(f, dim, config, chain):
            draws = np.zeros((config.sampling_iters, dim))
            div = np.ones(config.sampling_iters, dtype=bool)
            depths = np.ones(config.sampling_iters, dtype=np.int8)
            return draws, div, depths, 0.5

        monkeypatch.setattr(sampler_mod, "_run_chain", fake_run_chain)
        draws = sample(std_normal, 2, SamplerConfig(chains=2, warmup_iters=10,
                                                    sampling_iters=10, seed=0))
        assert any("divergent" in w for w in draws.warnings)


def _reference_split_rhat(x):
    """Direct textbook evaluation on explicitly split halves."""
    m, n = x.shape
    half = n // 2
    chains = [x[c, :half] for c in range(m)] + [x[c, n - half:] for c in range(m)]
    chains = np.asarray(chains)
    means = chains.mean(axis=1)
    variances = chains.var(axis=1, ddof=1)
    w = variances.mean()
    b = half * means.var(ddof=1)
    var_plus = (half - 1) / half * w + b / half
    return math.sqrt(var_plus / w)


class TestSplitRhat:
    def test_stationary_chains_near_one(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 5000))
        r = split_rhat(x)
        assert 0.99 <= r <= 1.01

    def test_offset_chains_large(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 1000))
        x[1] += 10.0
        r = split_rhat(x)
        assert r > 1.5
        assert r == pytest.approx(_reference_split_rhat(x), rel=1e-12)

    def test_matches_reference_on_random_input(self):
        rng = np.random.default_rng(2)
        x = rng.normal(2.0, 3.0, (5, 73))
        assert split_rhat(x) == pytest.approx(_reference_split_rhat(x), rel=1e-12)

    def test_constant_chains_nan(self):
        with pytest.warns(RuntimeWarning):
            r = split_rhat(np.ones((2, 10)))
        assert math.isnan(r)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            split_rhat(np.zeros((1, 10)))
        with pytest.raises(ValueError):
            split_rhat(np.zeros((2, 3)))


class TestEffectiveSampleSize:
    def test_iid_draws(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 2000))
        total = x.size
        bulk, tail = effective_sample_size(x)
        assert abs(bulk - total) / total <= 0.15
        assert abs(tail - total) / total <= 0.25

    def test_ar1_autocorrelation(self):
        phi = 0.9
        rng = np.random.default_rng(4)
        m, n = 4, 20_000
        x = np.zeros((m, n))
        for c in range(m):
            innov = rng.standard_normal(n)
            for t in range(1, n):
                x[c, t] = phi * x[c, t - 1] + innov[t] * math.sqrt(1 - phi * phi)
        expected = x.size * (1 - phi) / (1 + phi)
        bulk, _ = effective_sample_size(x)
        assert abs(bulk - expected) / expected <= 0.25

    def test_antithetic_chain_exceeds_n_but_finite(self):
        base = np.tile([1.0, -1.0], 500)
        x = np.vstack([base, -base])
        bulk, _ = effective_sample_size(x)
        assert math.isfinite(bulk)
        assert bulk > x.size

    def test_degenerate_input_nan(self):
        bulk, tail = effective_sample_size(np.ones((2, 10)))
        assert math.isnan(bulk) and math.isnan(tail)


class TestSummarize:
    def test_constant_parameter(self):
        draws = PosteriorDraws(
            draws=np.full((2, 50, 1), 3.25), names=["c"],
            divergences=np.zeros((2, 50), dtype=bool),
            tree_depths=np.ones((2, 50), dtype=np.int8),
            step_sizes=np.ones(2), config=SamplerConfig(chains=2, warmup_iters=10,
                                                        sampling_iters=50))
        (row,) = summarize(draws)
        assert row.mean == 3.25
        assert row.sd == 0.0
        assert row.q2_5 == row.q50 == row.q97_5 == 3.25

    def test_uniform_median(self):
        rng = np.random.default_rng(5)
        draws = PosteriorDraws(
            draws=rng.uniform(0, 1, (4, 2000, 1)), names=["u"],
            divergences=np.zeros((4, 2000), dtype=bool),
            tree_depths=np.ones((4, 2000), dtype=np.int8),
            step_sizes=np.ones(4), config=SamplerConfig())
        (row,) = summarize(draws)
        assert row.q50 == pytest.approx(0.5, abs=0.02)
        assert row.q2_5 == pytest.approx(0.025, abs=0.01)

    def test_quantile_ordering_invariant(self, normal5_draws):
        for row in summarize(normal5_draws):
            assert row.q2_5 <= row.q17 <= row.q50 <= row.q83 <= row.q97_5


class TestWarmupSchedule:
    def test_thousand_iteration_windows(self):
        ends, init_buf = _mass_window_ends(1000)
        assert init_buf == 75
        assert ends[0] == 100
        assert ends[-1] == 950
        sizes = np.diff([75] + ends)
        assert all(b >= a for a, b in zip(sizes, sizes[1:]))  # non-decreasing

    def test_short_warmup_disables_mass_adaptation(self):
        ends, _ = _mass_window_ends(10)
        assert ends == []

    def test_scaled_buffers(self):
        ends, init_buf = _mass_window_ends(500)
        assert init_buf == round(75 * 0.5)
        assert ends[-1] == 500 - round(50 * 0.5)


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path, normal5_draws):
        save_draws(normal5_draws, tmp_path / "d", runtime_seconds=1.5)
        back = load_draws(tmp_path / "d")
        assert np.array_equal(back.draws, normal5_draws.draws)
        assert back.names == normal5_draws.names
        assert np.array_equal(back.divergences, normal5_draws.divergences)
        assert back.config == normal5_draws.config

    def test_summary_csv(self, tmp_path, normal5_draws):
        rows = summarize(normal5_draws)
        path = tmp_path / "summary.csv"
        write_summary_csv(rows, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "name,mean,sd,q2.5,q17,q50,q83,q97.5,rhat,ess_bulk,ess_tail"
        assert len(lines) == 6

    def test_draw_csvs_one_per_chain(self, tmp_path, normal5_draws):
        save_draws(normal5_draws, tmp_path / "d")
        for c in range(4):
            assert (tmp_path / "d" / f"chain_{c}.csv").exists()
