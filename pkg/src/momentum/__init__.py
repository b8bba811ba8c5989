"""Winner-loser effect estimation for repeated-competition game streams."""

from .ingest import (
    GameRecord, TimeControlFilter, Reject, BULLET, BLITZ,
    parse_ndjson_export, parse_pgn_export, filter_games, clean_stream,
    read_canonical, write_canonical, fetch_export,
)
from .features import (
    FeatureConfig, SessionizedGame, SessionStats, ModelObservation, Dataset,
    segment_sessions, session_statistics, compute_win_history, build_dataset,
    read_dataset, write_dataset,
)
from .model import (
    ModelParams, constrain, unconstrain, log_likelihood, log_prior,
    LogPosterior, win_probability, effect_to_delta_win_prob, logistic,
    param_names, dim_for,
)
from .sampler import (
    SamplerConfig, PosteriorDraws, SummaryRow, sample, fit_model,
    split_rhat, effective_sample_size, summarize,
    save_draws, load_draws, write_summary_csv,
)
from .glicko import GlickoState, GlickoConfig, glicko2_update, replay_ratings
from .validate import (
    PPCConfig, PPCMeta, PermutationResult, SyntheticSpec, SyntheticTruth,
    posterior_predictive_trajectories, permutation_test, simulate_synthetic,
    parameter_recovery, recovery_study, sbc_ranks,
)

__version__ = "0.1.0"

