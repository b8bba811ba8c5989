"""Session segmentation, rolling histories, and dataset construction."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momentum.features import (
    FeatureConfig, build_dataset, compute_win_history, read_dataset,
    segment_sessions, session_statistics, write_dataset,
)

from conftest import make_record, stream_from_outcomes


def stream_with_gaps(gaps, outcomes=None, **kwargs):
    """Records whose consecutive start-time differences are `gaps`."""
    times = [1_700_000_000.0]
    for g in gaps:
        times.append(times[-1] + g)
    outcomes = outcomes or ["win"] * len(times)
    return [make_record(t, o, **kwargs) for t, o in zip(times, outcomes)]


class TestSegmentSessions:
    def test_all_gaps_under_threshold_single_session(self):
        recs = stream_with_gaps([120, 290])
        out = segment_sessions(recs, 300)
        assert [s.session_id for s in out] == [0, 0, 0]
        assert [s.index_in_session for s in out] == [0, 1, 2]

    def test_one_gap_over_threshold_splits(self):
        recs = stream_with_gaps([120, 400])
        out = segment_sessions(recs, 300)
        assert [s.session_id for s in out] == [0, 0, 1]
        assert [s.index_in_session for s in out] == [0, 1, 0]

    def test_gap_exactly_at_threshold_stays(self):
        recs = stream_with_gaps([300])
        out = segment_sessions(recs, 300)
        assert [s.session_id for s in out] == [0, 0]

    def test_unsorted_input_errors_with_index(self):
        recs = [make_record(2000), make_record(1000)]
        with pytest.raises(ValueError, match="index 1"):
            segment_sessions(recs, 300)

    def test_mixed_players_rejected(self):
        recs = [make_record(1000, focal_id="a"), make_record(2000, focal_id="b")]
        with pytest.raises(ValueError, match="single focal player"):
            segment_sessions(recs, 300)

    def test_synthetic_stream_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(42)
        gaps = rng.exponential(scale=250.0, size=999)
        recs = stream_with_gaps(gaps)
        out = segment_sessions(recs, 300)
        # independent scan: count boundaries directly from the raw times
        times = [r.start_time for r in recs]
        oracle_sessions = 1 + sum(1 for i in range(1, len(times))
                                  if times[i] - times[i - 1] > 300)
        assert out[-1].session_id + 1 == oracle_sessions
        # per-game ids must match a cumulative-boundary recount
        boundary = [0] + [1 if times[i] - times[i - 1] > 300 else 0
                          for i in range(1, len(times))]
        assert [s.session_id for s in out] == list(np.cumsum(boundary) - boundary[0])


class TestSessionStatistics:
    def test_explicit_lengths(self):
        # sessions of sizes [5, 1, 3]
        gaps = [10] * 4 + [9999] + [10] * 0 + [9999] + [10] * 2
        recs = stream_with_gaps(gaps)
        stats = session_statistics(segment_sessions(recs, 300))
        assert stats.total_sessions == 3
        assert stats.fraction_multigame == pytest.approx(2 / 3)
        assert stats.median_session_length == 3.0

    def test_all_singletons(self):
        recs = stream_with_gaps([9999] * 6)
        stats = session_statistics(segment_sessions(recs, 300))
        assert stats.fraction_multigame == 0.0
        assert stats.fraction_games_within_gap == 0.0

    def test_empty_errors(self):
        with pytest.raises(ValueError):
            session_statistics([])

    def test_threshold_fractions(self):
        # one session of 12 games, one of 2
        gaps = [10] * 11 + [9999] + [10]
        stats = session_statistics(segment_sessions(stream_with_gaps(gaps), 300),
                                   thresholds=(1, 10))
        assert stats.fraction_sessions_gt[10] == pytest.approx(0.5)
        assert stats.fraction_sessions_gt[1] == pytest.approx(1.0)

    def test_tuned_multigame_fraction_reproduced(self):
        # 10000 sessions, 7800 with two games: multigame fraction 0.78
        gaps = []
        for i in range(10_000):
            if i > 0:
                gaps.append(9999)
            if i < 7800:
                gaps.append(60)
        stats = session_statistics(segment_sessions(stream_with_gaps(gaps), 300))
        assert abs(stats.fraction_multigame - 0.78) <= 0.01

    def test_within_gap_fraction(self):
        gaps = [10, 9999, 10, 10]
        stats = session_statistics(segment_sessions(stream_with_gaps(gaps), 300))
        assert stats.fraction_games_within_gap == pytest.approx(3 / 4)


class TestWinHistory:
    def test_n1_previous_game_indicator(self):
        recs = stream_from_outcomes(["win", "loss", "win"])
        assert compute_win_history(recs, 1) == [None, 1.0, 0.0]

    def test_n2_window(self):
        recs = stream_from_outcomes(["win", "win", "loss", "loss"])
        assert compute_win_history(recs, 2) == [None, None, 1.0, 0.5]

    def test_bad_n(self):
        with pytest.raises(ValueError):
            compute_win_history([], 0)

    @pytest.mark.parametrize("n", [1, 5, 10])
    def test_rolling_recount_oracle(self, n):
        rng = np.random.default_rng(7)
        outcomes = ["win" if rng.random() < 0.47 else "loss" for _ in range(500)]
        recs = stream_from_outcomes(outcomes)
        hist = compute_win_history(recs, n)
        wins = [1 if o == "win" else 0 for o in outcomes]
        for i in range(len(recs)):
            if i < n:
                assert hist[i] is None
            else:
                assert hist[i] == pytest.approx(sum(wins[i - n:i]) / n)


class TestBuildDataset:
    def test_alternating_outcomes_centering(self):
        recs = {"p": stream_from_outcomes(["win", "loss", "win", "loss"])}
        ds = build_dataset(recs, FeatureConfig(n=1))
        assert ds.xbar == (0.5,)
        assert [o.xtilde for o in ds.observations] == [0.5, -0.5, 0.5]
        assert [o.y for o in ds.observations] == [0, 1, 0]

    def test_all_wins_player_centers_to_zero(self):
        recs = {"p": stream_from_outcomes(["win"] * 6)}
        ds = build_dataset(recs, FeatureConfig(n=1))
        assert ds.xbar == (1.0,)
        assert all(o.xtilde == 0.0 for o in ds.observations)

    def test_three_player_fixture_observation_count(self):
        # draws removed first; each player then contributes games - n
        streams = {
            "a": stream_from_outcomes(["win", "loss", "draw", "win", "win"], focal_id="a"),
            "b": stream_from_outcomes(["loss"] * 7 + ["win"] * 2, focal_id="b"),
            "c": stream_from_outcomes(["draw", "win", "loss", "win"], focal_id="c"),
        }
        n = 2
        ds = build_dataset(streams, FeatureConfig(n=n))
        decisive = {k: sum(1 for r in v if r.outcome != "draw")
                    for k, v in streams.items()}
        assert len(ds.observations) == sum(c - n for c in decisive.values())

    def test_draws_removed_before_everything(self):
        recs = {"p": stream_from_outcomes(["win", "draw", "loss", "win"])}
        ds = build_dataset(recs, FeatureConfig(n=1))
        # decisive stream is W L W: histories [_, 1, 0], xbar 2/3
        assert ds.xbar[0] == pytest.approx(2 / 3)
        assert [o.xtilde for o in ds.observations] == pytest.approx([1 / 3, -2 / 3])

    def test_player_with_too_few_games_dropped(self, caplog):
        streams = {
            "tiny": stream_from_outcomes(["win"], focal_id="tiny"),
            "ok": stream_from_outcomes(["win", "loss", "win"], focal_id="ok"),
        }
        with caplog.at_level("WARNING"):
            ds = build_dataset(streams, FeatureConfig(n=1))
        assert ds.player_ids == ("ok",)
        assert "tiny" in caplog.text

    def test_all_players_too_small_errors(self):
        streams = {"p": stream_from_outcomes(["win"])}
        with pytest.raises(ValueError):
            build_dataset(streams, FeatureConfig(n=1))

    def test_player_indices_dense_and_sorted(self):
        streams = {
            "zeta": stream_from_outcomes(["win", "loss", "win"], focal_id="zeta"),
            "alpha": stream_from_outcomes(["loss", "win", "loss"], focal_id="alpha"),
        }
        ds = build_dataset(streams, FeatureConfig(n=1))
        assert ds.player_ids == ("alpha", "zeta")
        assert sorted(set(o.player_index for o in ds.observations)) == [0, 1]

    def test_covariates_from_record(self):
        recs = {"p": [
            make_record(1000, "win", color="black", focal_rating=2100,
                        opponent_rating=1950),
            make_record(1060, "loss", color="white", focal_rating=2105,
                        opponent_rating=2200),
        ]}
        ds = build_dataset(recs, FeatureConfig(n=1))
        (o,) = ds.observations
        assert o.z_color == 1
        assert o.z_rating_diff == pytest.approx(-95.0)

    def test_keep_draws_mode_counts_draws_as_losses(self):
        recs = {"p": stream_from_outcomes(["win", "draw", "win"])}
        ds = build_dataset(recs, FeatureConfig(n=1, drop_draws=False))
        assert len(ds.observations) == 2
        assert ds.xbar[0] == pytest.approx(2 / 3)
        assert [o.y for o in ds.observations] == [0, 1]


@st.composite
def outcome_streams(draw):
    n_players = draw(st.integers(1, 3))
    streams = {}
    for j in range(n_players):
        pid = f"p{j}"
        outcomes = draw(st.lists(st.sampled_from(["win", "loss", "draw"]),
                                 min_size=4, max_size=30))
        streams[pid] = stream_from_outcomes(outcomes, focal_id=pid)
    return streams


class TestDatasetProperties:
    @given(outcome_streams(), st.integers(1, 3))
    @settings(max_examples=50, deadline=None)
    def test_centering_is_a_pure_shift_and_bounded(self, streams, n):
        try:
            ds = build_dataset(streams, FeatureConfig(n=n))
        except ValueError:
            return  # every player too small for this n
        for j, pid in enumerate(ds.player_ids):
            xt = [o.xtilde for o in ds.observations if o.player_index == j]
            xbar = ds.xbar[j]
            raw = [x + xbar for x in xt]
            assert np.mean([x - xbar for x in raw]) == pytest.approx(np.mean(xt))
            for x in xt:
                assert -xbar - 1e-12 <= x <= 1 - xbar + 1e-12

    @given(outcome_streams(), st.integers(1, 2))
    @settings(max_examples=30, deadline=None)
    def test_no_cross_player_leakage(self, streams, n):
        try:
            joint = build_dataset(streams, FeatureConfig(n=n))
        except ValueError:
            return
        for j, pid in enumerate(joint.player_ids):
            try:
                solo = build_dataset({pid: streams[pid]}, FeatureConfig(n=n))
            except ValueError:
                continue
            joint_x = [o.xtilde for o in joint.observations if o.player_index == j]
            solo_x = [o.xtilde for o in solo.observations]
            assert joint_x == solo_x

    @given(outcome_streams())
    @settings(max_examples=20, deadline=None)
    def test_build_is_deterministic(self, streams):
        try:
            a = build_dataset(streams, FeatureConfig(n=1))
            b = build_dataset(streams, FeatureConfig(n=1))
        except ValueError:
            return
        assert a.observations == b.observations
        assert a.xbar == b.xbar


class TestDatasetIO:
    def test_roundtrip(self, tmp_path):
        streams = {
            "a": stream_from_outcomes(["win", "loss", "win", "win"], focal_id="a"),
            "b": stream_from_outcomes(["loss", "loss", "win", "draw"], focal_id="b"),
        }
        ds = build_dataset(streams, FeatureConfig(n=1))
        write_dataset(ds, tmp_path / "d")
        back = read_dataset(tmp_path / "d")
        assert back.observations == ds.observations
        assert back.player_ids == ds.player_ids
        assert back.xbar == ds.xbar
        assert back.n == ds.n
        assert back.lead_outcomes == ds.lead_outcomes

    def test_arrays_view(self):
        streams = {"a": stream_from_outcomes(["win", "loss", "win"])}
        ds = build_dataset(streams, FeatureConfig(n=1))
        a = ds.arrays
        assert a["y"].dtype == np.float64
        assert a["player_index"].dtype == np.int64
        assert len(a["xtilde"]) == len(ds.observations)


class TestPooledSessionStatistics:
    def test_two_players_pooled(self):
        from momentum.features import pooled_session_statistics

        a = segment_sessions(stream_with_gaps([10, 9999], focal_id="a"), 300)
        b = segment_sessions(stream_with_gaps([10, 10], focal_id="b"), 300)
        stats = pooled_session_statistics({"a": a, "b": b})
        # sessions: a -> [2, 1], b -> [3]
        assert stats.total_sessions == 3
        assert stats.fraction_multigame == pytest.approx(2 / 3)
        # within-gap games: a has 1 of 2 predecessors, b has 2 of 2
        assert stats.fraction_games_within_gap == pytest.approx(3 / 4)

    def test_empty_errors(self):
        from momentum.features import pooled_session_statistics

        with pytest.raises(ValueError):
            pooled_session_statistics({})
