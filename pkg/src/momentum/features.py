"""Session segmentation and construction of the model's observation set.

A session is a maximal run of games each starting within a configurable gap
of the previous game's start. Sessions are descriptive only: the rolling win
history deliberately spans session boundaries, so a window of n games may
include idle gaps.

For each game past the first n of a player's stream, one observation is
built: the binary outcome, the win ratio over the previous n decisive games
centered by the player's overall win proportion, the color played, and the
pre-game rating difference.
"""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
from dataclasses import dataclass, asdict
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ingest import GameRecord, read_canonical

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureConfig:
    """Feature construction knobs.

    n is the history window length (1 and 10 are the usual choices, 5 for
    sensitivity checks; any n >= 1 is accepted). Draws are removed before
    histories, centering, and the likelihood are computed, keeping the win
    ratio a proportion among decisive games.
    """

    n: int = 1
    session_gap_seconds: int = 300
    drop_draws: bool = True

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"history window must be >= 1, got {self.n}")
        if self.session_gap_seconds <= 0:
            raise ValueError("session gap must be positive")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class SessionizedGame:
    record: GameRecord
    session_id: int
    index_in_session: int


@dataclass(frozen=True)
class ModelObservation:
    """One likelihood term: outcome plus covariates for a single game."""

    y: int
    xtilde: float
    z_color: int
    z_rating_diff: float
    player_index: int


@dataclass(frozen=True)
class SessionStats:
    total_sessions: int
    fraction_multigame: float
    median_session_length: float
    fraction_sessions_gt: dict[int, float]
    fraction_games_within_gap: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fraction_sessions_gt"] = {str(k): v for k, v in self.fraction_sessions_gt.items()}
        return d


def _check_sorted(records: Sequence[GameRecord]) -> None:
    for i in range(1, len(records)):
        if records[i].start_time <= records[i - 1].start_time:
            raise ValueError(f"records not strictly sorted by start_time at index {i}")


def segment_sessions(records: Sequence[GameRecord], gap_seconds: int) -> list[SessionizedGame]:
    """Assign session ids: a game opens a new session iff it starts more than
    `gap_seconds` after the previous game's start. The first game opens
    session 0. Input must be one player's stream, strictly sorted."""
    _check_sorted(records)
    focal_ids = {r.focal_id for r in records}
    if len(focal_ids) > 1:
        raise ValueError(f"expected a single focal player, got {sorted(focal_ids)}")
    out: list[SessionizedGame] = []
    session_id = 0
    index_in_session = 0
    for i, r in enumerate(records):
        if i > 0:
            if r.start_time - records[i - 1].start_time > gap_seconds:
                session_id += 1
                index_in_session = 0
            else:
                index_in_session += 1
        out.append(SessionizedGame(r, session_id, index_in_session))
    return out


def session_statistics(
    sessionized: Sequence[SessionizedGame],
    thresholds: Sequence[int] = (10,),
) -> SessionStats:
    """Summary statistics of session lengths and between-game gaps."""
    if not sessionized:
        raise ValueError("no games to summarize")
    lengths: list[int] = []
    for g in sessionized:
        if g.index_in_session == 0:
            lengths.append(1)
        else:
            lengths[-1] += 1
    n_games = len(sessionized)
    n_sessions = len(lengths)
    within = sum(1 for g in sessionized if g.index_in_session > 0)
    return SessionStats(
        total_sessions=n_sessions,
        fraction_multigame=sum(1 for L in lengths if L > 1) / n_sessions,
        median_session_length=float(statistics.median(lengths)),
        fraction_sessions_gt={
            int(k): sum(1 for L in lengths if L > k) / n_sessions for k in thresholds
        },
        fraction_games_within_gap=within / (n_games - 1) if n_games > 1 else 0.0,
    )


def pooled_session_statistics(
    per_player: Mapping[str, Sequence[SessionizedGame]],
    thresholds: Sequence[int] = (10,),
) -> SessionStats:
    """Session statistics pooled over several players' segmented streams.

    Lengths pool directly; the within-gap fraction counts games with a
    predecessor in their own player's stream as the denominator.
    """
    if not per_player or all(len(v) == 0 for v in per_player.values()):
        raise ValueError("no games to summarize")
    lengths: list[int] = []
    within = 0
    denom = 0
    for stream in per_player.values():
        for g in stream:
            if g.index_in_session == 0:
                lengths.append(1)
            else:
                lengths[-1] += 1
                within += 1
        denom += max(0, len(stream) - 1)
    n_sessions = len(lengths)
    return SessionStats(
        total_sessions=n_sessions,
        fraction_multigame=sum(1 for L in lengths if L > 1) / n_sessions,
        median_session_length=float(statistics.median(lengths)),
        fraction_sessions_gt={
            int(k): sum(1 for L in lengths if L > k) / n_sessions for k in thresholds
        },
        fraction_games_within_gap=within / denom if denom else 0.0,
    )


def compute_win_history(records: Sequence[GameRecord], n: int) -> list[float | None]:
    """Rolling win ratio over the previous n games, None while fewer than n
    games have been played. Windows span session boundaries. Draw handling is
    the caller's job (normally draws are removed before this)."""
    if n < 1:
        raise ValueError(f"history window must be >= 1, got {n}")
    wins = [1 if r.outcome == "win" else 0 for r in records]
    out: list[float | None] = []
    running = 0  # sum of wins over the trailing window of the next position
    for i in range(len(records)):
        out.append(running / n if i >= n else None)
        running += wins[i]
        if i >= n:
            running -= wins[i - n]
    return out


@dataclass
class Dataset:
    """Observation set for model fitting.

    player_index values cover 0..J-1 densely, in lexicographic player-id
    order. xbar[j] is player j's overall win proportion on the same filtered
    stream that produced the observations. lead_outcomes[j] holds the first n
    outcomes of player j's stream: they precede any likelihood term but feed
    the rolling histories, and are needed to rebuild features after outcome
    permutations.
    """

    observations: tuple[ModelObservation, ...]
    player_ids: tuple[str, ...]
    xbar: tuple[float, ...]
    n: int
    lead_outcomes: tuple[tuple[int, ...], ...]
    config_hash: str = ""

    @property
    def n_players(self) -> int:
        return len(self.player_ids)

    @cached_property
    def arrays(self) -> dict[str, np.ndarray]:
        obs = self.observations
        return {
            "y": np.array([o.y for o in obs], dtype=np.float64),
            "xtilde": np.array([o.xtilde for o in obs], dtype=np.float64),
            "z_color": np.array([o.z_color for o in obs], dtype=np.float64),
            "z_rating_diff": np.array([o.z_rating_diff for o in obs], dtype=np.float64),
            "player_index": np.array([o.player_index for o in obs], dtype=np.int64),
        }


def build_dataset(
    records_by_player: Mapping[str, Sequence[GameRecord]],
    config: FeatureConfig,
) -> Dataset:
    """Build the model dataset from per-player sorted game streams.

    Draws are removed first (when configured), then per player: the overall
    win proportion, the rolling n-game history, and one observation per game
    with a defined history. Players with fewer than n+1 usable games cannot
    contribute an observation and are dropped with a warning.
    """
    if not records_by_player:
        raise ValueError("no players")
    n = config.n
    observations: list[ModelObservation] = []
    player_ids: list[str] = []
    xbars: list[float] = []
    leads: list[tuple[int, ...]] = []

    for pid in sorted(records_by_player):
        recs = records_by_player[pid]
        _check_sorted(recs)
        if config.drop_draws:
            recs = [r for r in recs if r.outcome != "draw"]
        if len(recs) <= n:
            logger.warning("dropping player %s: only %d usable games (need > %d)",
                           pid, len(recs), n)
            continue
        j = len(player_ids)
        wins = [1 if r.outcome == "win" else 0 for r in recs]
        xbar_j = sum(wins) / len(wins)
        history = compute_win_history(recs, n)
        for i in range(n, len(recs)):
            r = recs[i]
            x = history[i]
            assert x is not None
            observations.append(ModelObservation(
                y=wins[i],
                xtilde=x - xbar_j,
                z_color=1 if r.focal_color == "white" else 0,
                z_rating_diff=r.focal_rating - r.opponent_rating,
                player_index=j,
            ))
        player_ids.append(pid)
        xbars.append(xbar_j)
        leads.append(tuple(wins[:n]))

    if not player_ids:
        raise ValueError(f"no player has more than n={n} usable games")
    return Dataset(
        observations=tuple(observations),
        player_ids=tuple(player_ids),
        xbar=tuple(xbars),
        n=n,
        lead_outcomes=tuple(leads),
        config_hash=config.config_hash(),
    )


# --- Persistence ---------------------------------------------------------

_OBS_HEADER = "player_index,y,xtilde,z_color,z_rating_diff"


def write_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "observations.csv", "w", encoding="utf-8") as f:
        f.write(_OBS_HEADER + "\n")
        for o in ds.observations:
            f.write(f"{o.player_index},{o.y},{o.xtilde!r},{o.z_color},{o.z_rating_diff!r}\n")
    sidecar = {
        "player_ids": list(ds.player_ids),
        "xbar": list(ds.xbar),
        "n": ds.n,
        "lead_outcomes": [list(t) for t in ds.lead_outcomes],
        "config_hash": ds.config_hash,
    }
    with open(out / "dataset.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
        f.write("\n")


def read_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    with open(src / "dataset.json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    observations: list[ModelObservation] = []
    with open(src / "observations.csv", "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != _OBS_HEADER:
            raise ValueError(f"unexpected observations header: {header!r}")
        for line in f:
            pi, y, xt, zc, zd = line.rstrip("\n").split(",")
            observations.append(ModelObservation(
                y=int(y), xtilde=float(xt), z_color=int(zc),
                z_rating_diff=float(zd), player_index=int(pi),
            ))
    return Dataset(
        observations=tuple(observations),
        player_ids=tuple(sidecar["player_ids"]),
        xbar=tuple(sidecar["xbar"]),
        n=int(sidecar["n"]),
        lead_outcomes=tuple(tuple(int(v) for v in t) for t in sidecar["lead_outcomes"]),
        config_hash=sidecar.get("config_hash", ""),
    )


def sessionize_canonical(path, gap_seconds: int) -> list[SessionizedGame]:
    """Segment a canonical games file (single focal player) into sessions."""
    return segment_sessions(read_canonical(path), gap_seconds)
