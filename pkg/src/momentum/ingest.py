"""Parsing and filtering of raw game exports into canonical per-player streams.

Two export formats are supported: newline-delimited JSON (one game object per
line, as served by the public per-user export endpoint) and concatenated PGN.
Both are reduced to the same flat :class:`GameRecord`, seen from the focal
player's perspective. Parsing never aborts on a bad game; problems are
collected in a rejects report alongside the good records.
"""

from __future__ import annotations

import json
import re
import time as _time
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import IO, Iterable, Iterator, Sequence

import requests

OUTCOMES = ("win", "loss", "draw")
COLORS = ("white", "black")
VARIANTS = ("standard", "other")
TERMINATIONS = ("normal", "time_forfeit", "other")

CANONICAL_FIELDS = (
    "game_id", "start_time", "base", "inc", "rated", "variant",
    "focal_id", "color", "focal_rating", "opp_rating", "outcome", "termination",
)


class IngestError(ValueError):
    """Raised for malformed canonical files or invalid record construction."""


class FetchError(RuntimeError):
    """Raised when the export endpoint cannot be reached after retries."""


@dataclass(frozen=True)
class GameRecord:
    """One rated game from the focal player's perspective.

    `start_time` is UTC seconds since the epoch. Ratings are pre-game,
    display-scale values; the post-game rating in the export is ignored.
    """

    game_id: str
    start_time: float
    base_seconds: int
    increment_seconds: int
    rated: bool
    variant: str
    focal_id: str
    focal_color: str
    focal_rating: float
    opponent_rating: float
    outcome: str
    termination: str

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise IngestError(f"bad variant {self.variant!r}")
        if self.focal_color not in COLORS:
            raise IngestError(f"bad color {self.focal_color!r}")
        if self.outcome not in OUTCOMES:
            raise IngestError(f"bad outcome {self.outcome!r}")
        if self.termination not in TERMINATIONS:
            raise IngestError(f"bad termination {self.termination!r}")
        if self.focal_rating <= 0 or self.opponent_rating <= 0:
            raise IngestError("ratings must be positive")
        if self.base_seconds < 0 or self.increment_seconds < 0:
            raise IngestError("time control must be non-negative")


@dataclass(frozen=True)
class TimeControlFilter:
    """Retain only games with this exact base+increment clock."""

    base_seconds: int
    increment_seconds: int


BULLET = TimeControlFilter(60, 0)
BLITZ = TimeControlFilter(180, 0)


@dataclass(frozen=True)
class Reject:
    """One unparseable or dropped game: source line number and reason."""

    line_no: int
    reason: str


def _iter_text_lines(stream: IO | Iterable) -> Iterator[str]:
    for raw in stream:
        yield raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw


# --- NDJSON export -----------------------------------------------------------

# statuses that leave the game without a usable result
_DRAW_STATUSES = frozenset({"draw", "stalemate"})
_NORMAL_STATUSES = frozenset({"mate", "resign", "stalemate", "draw"})


def _termination_from_status(status: str) -> str:
    if status == "outoftime":
        return "time_forfeit"
    if status in _NORMAL_STATUSES:
        return "normal"
    return "other"


def parse_ndjson_export(stream, focal_id: str):
    """Parse a newline-delimited JSON export into records for `focal_id`.

    Returns `(records, rejects)`. Input order is preserved; a malformed or
    focal-less line becomes a reject entry (1-based line number) and parsing
    continues. Username matching is case-insensitive.
    """
    records: list[GameRecord] = []
    rejects: list[Reject] = []
    want = focal_id.casefold()
    for line_no, line in enumerate(_iter_text_lines(stream), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            game = json.loads(line)
        except json.JSONDecodeError as exc:
            rejects.append(Reject(line_no, f"invalid json: {exc.msg}"))
            continue
        try:
            records.append(_record_from_ndjson(game, focal_id, want))
        except _GameReject as exc:
            rejects.append(Reject(line_no, str(exc)))
    return records, rejects


class _GameReject(Exception):
    pass


def _player_name(side: dict) -> str:
    user = side.get("user") or {}
    return user.get("name") or user.get("id") or ""


def _record_from_ndjson(game: dict, focal_id: str, want: str) -> GameRecord:
    players = game.get("players")
    if not isinstance(players, dict):
        raise _GameReject("missing players")
    white = players.get("white") or {}
    black = players.get("black") or {}
    if _player_name(white).casefold() == want:
        color, me, them = "white", white, black
    elif _player_name(black).casefold() == want:
        color, me, them = "black", black, white
    else:
        raise _GameReject("focal player not in game")

    clock = game.get("clock")
    if not isinstance(clock, dict) or "initial" not in clock:
        raise _GameReject("missing clock")
    if me.get("rating") is None or them.get("rating") is None:
        raise _GameReject("missing rating")
    if "createdAt" not in game:
        raise _GameReject("missing createdAt")

    status = str(game.get("status", ""))
    winner = game.get("winner")
    if winner in COLORS:
        outcome = "win" if winner == color else "loss"
    elif status in _DRAW_STATUSES:
        outcome = "draw"
    else:
        # aborted / unterminated games carry no result to model
        raise _GameReject(f"no result (status {status or 'unknown'})")

    try:
        return GameRecord(
            game_id=str(game.get("id", "")),
            start_time=float(game["createdAt"]) / 1000.0,
            base_seconds=int(clock["initial"]),
            increment_seconds=int(clock.get("increment", 0)),
            rated=bool(game.get("rated", False)),
            variant="standard" if game.get("variant", "standard") == "standard" else "other",
            focal_id=focal_id,
            focal_color=color,
            focal_rating=float(me["rating"]),
            opponent_rating=float(them["rating"]),
            outcome=outcome,
            termination=_termination_from_status(status),
        )
    except (IngestError, TypeError, ValueError) as exc:
        raise _GameReject(f"bad field: {exc}") from exc


# --- PGN export --------------------------------------------------------------

_TAG_RE = re.compile(r'^\[(\w+)\s+"(.*)"\]\s*$')
_PGN_MANDATORY = (
    "UTCDate", "UTCTime", "TimeControl", "White", "Black",
    "WhiteElo", "BlackElo", "Result",
)


def parse_pgn_export(stream, focal_id: str):
    """Parse concatenated PGN games into records for `focal_id`.

    Only header tags are consumed; movetext is skipped. Returns
    `(records, rejects)` with reject line numbers pointing at the first tag
    of the offending game. A header section left unterminated at EOF is
    rejected.
    """
    records: list[GameRecord] = []
    rejects: list[Reject] = []
    want = focal_id.casefold()

    tags: dict[str, str] = {}
    first_tag_line = 0
    in_movetext = False
    saw_moves = False
    line_no = 0

    def finalize() -> None:
        nonlocal tags, in_movetext, saw_moves
        if tags:
            try:
                records.append(_record_from_pgn(tags, focal_id, want))
            except _GameReject as exc:
                rejects.append(Reject(first_tag_line, str(exc)))
        tags = {}
        in_movetext = False
        saw_moves = False

    for line_no, line in enumerate(_iter_text_lines(stream), start=1):
        stripped = line.strip()
        m = _TAG_RE.match(stripped) if stripped.startswith("[") else None
        if not in_movetext:
            if m:
                if not tags:
                    first_tag_line = line_no
                tags[m.group(1)] = m.group(2)
            elif stripped == "" and tags:
                in_movetext = True
            elif stripped:
                # junk between games; ignore
                continue
        else:
            if m and saw_moves:
                # next game's header with no separating blank line
                finalize()
                first_tag_line = line_no
                tags[m.group(1)] = m.group(2)
            elif stripped == "":
                if saw_moves:
                    finalize()
                # else: extra blank line before movetext, keep waiting
            else:
                saw_moves = True

    if tags:
        if saw_moves:
            finalize()
        else:
            rejects.append(Reject(first_tag_line, "unterminated game at EOF"))
    return records, rejects


def _record_from_pgn(tags: dict[str, str], focal_id: str, want: str) -> GameRecord:
    missing = [t for t in _PGN_MANDATORY if t not in tags]
    if missing:
        raise _GameReject(f"missing tag {missing[0]}")

    if tags["White"].casefold() == want:
        color, my_elo, their_elo = "white", tags["WhiteElo"], tags["BlackElo"]
    elif tags["Black"].casefold() == want:
        color, my_elo, their_elo = "black", tags["BlackElo"], tags["WhiteElo"]
    else:
        raise _GameReject("focal player not in game")

    tc = tags["TimeControl"]
    if "+" not in tc:
        raise _GameReject(f"bad time control {tc!r}")
    base_s, inc_s = tc.split("+", 1)

    result = tags["Result"]
    if result == "1-0":
        outcome = "win" if color == "white" else "loss"
    elif result == "0-1":
        outcome = "win" if color == "black" else "loss"
    elif result == "1/2-1/2":
        outcome = "draw"
    else:
        raise _GameReject(f"no result ({result!r})")

    try:
        start = datetime.strptime(
            tags["UTCDate"] + " " + tags["UTCTime"], "%Y.%m.%d %H:%M:%S"
        ).replace(tzinfo=timezone.utc).timestamp()
    except ValueError as exc:
        raise _GameReject(f"bad timestamp: {exc}") from exc

    term_tag = tags.get("Termination", "Normal")
    if term_tag == "Time forfeit":
        termination = "time_forfeit"
    elif term_tag == "Normal":
        termination = "normal"
    else:
        termination = "other"

    site = tags.get("Site", "")
    game_id = site.rstrip("/").rsplit("/", 1)[-1] if site else tags.get("GameId", "")

    variant_tag = tags.get("Variant", "Standard")
    try:
        return GameRecord(
            game_id=game_id,
            start_time=start,
            base_seconds=int(base_s),
            increment_seconds=int(inc_s),
            rated="rated" in tags.get("Event", "").casefold(),
            variant="standard" if variant_tag.casefold() == "standard" else "other",
            focal_id=focal_id,
            focal_color=color,
            focal_rating=float(my_elo),
            opponent_rating=float(their_elo),
            outcome=outcome,
            termination=termination,
        )
    except (IngestError, ValueError) as exc:
        raise _GameReject(f"bad field: {exc}") from exc


# --- Filtering and cleaning --------------------------------------------------

def filter_games(
    records: Sequence[GameRecord],
    tc: TimeControlFilter,
    rated_only: bool = True,
    standard_only: bool = True,
) -> list[GameRecord]:
    """Order-preserving subsequence of `records` matching the time control."""
    out = []
    for r in records:
        if r.base_seconds != tc.base_seconds or r.increment_seconds != tc.increment_seconds:
            continue
        if rated_only and not r.rated:
            continue
        if standard_only and r.variant != "standard":
            continue
        out.append(r)
    return out


def clean_stream(records: Sequence[GameRecord]):
    """Sort one focal player's records by start time and drop unusable games.

    Drops games with termination `other` (aborted/irregular endings) and
    rejects duplicates: a player cannot start two rated games at the same
    instant, so records sharing a start_time after the first are reported.
    Returns `(clean_sorted, rejects)`; reject line numbers index into the
    input sequence (1-based).
    """
    order = sorted(range(len(records)), key=lambda i: records[i].start_time)
    out: list[GameRecord] = []
    rejects: list[Reject] = []
    last_start: float | None = None
    for i in order:
        r = records[i]
        if r.termination == "other":
            rejects.append(Reject(i + 1, f"irregular termination (game {r.game_id})"))
            continue
        if last_start is not None and r.start_time == last_start:
            rejects.append(Reject(i + 1, f"duplicate start_time (game {r.game_id})"))
            continue
        out.append(r)
        last_start = r.start_time
    return out, rejects


# --- Canonical games file ----------------------------------------------------

def record_to_line(r: GameRecord) -> str:
    """Tab-separated canonical form; floats use shortest round-trip repr."""
    return "\t".join((
        r.game_id, repr(r.start_time), str(r.base_seconds),
        str(r.increment_seconds), "true" if r.rated else "false", r.variant,
        r.focal_id, r.focal_color, repr(r.focal_rating),
        repr(r.opponent_rating), r.outcome, r.termination,
    ))


def record_from_line(line: str) -> GameRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != len(CANONICAL_FIELDS):
        raise IngestError(f"expected {len(CANONICAL_FIELDS)} fields, got {len(parts)}")
    return GameRecord(
        game_id=parts[0],
        start_time=float(parts[1]),
        base_seconds=int(parts[2]),
        increment_seconds=int(parts[3]),
        rated=parts[4] == "true",
        variant=parts[5],
        focal_id=parts[6],
        focal_color=parts[7],
        focal_rating=float(parts[8]),
        opponent_rating=float(parts[9]),
        outcome=parts[10],
        termination=parts[11],
    )


def write_canonical(records: Iterable[GameRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(record_to_line(r) + "\n")


def read_canonical(path) -> list[GameRecord]:
    with open(path, "r", encoding="utf-8") as f:
        return [record_from_line(line) for line in f if line.strip()]


def write_rejects(rejects: Iterable[Reject], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rej in rejects:
            f.write(f"{rej.line_no}\t{rej.reason}\n")


# --- Export fetch client -----------------------------------------------------

def fetch_export(
    username: str,
    output_path,
    *,
    base_url: str = "https://lichess.org",
    since: int | None = None,
    max_retries: int = 5,
    backoff_base: float = 1.0,
    timeout: float = 60.0,
    session: requests.Session | None = None,
) -> int:
    """Download a user's game export and write the raw response to disk.

    The response body is written verbatim (NDJSON, one game per line).
    `since` (ms since epoch) makes the download resumable. Rate-limit (429)
    and server errors are retried with exponential backoff; persistent
    failure raises :class:`FetchError`. Returns the number of bytes written.
    """
    sess = session or requests.Session()
    url = f"{base_url.rstrip('/')}/api/games/user/{username}"
    params = {"since": str(since)} if since is not None else {}
    headers = {"Accept": "application/x-ndjson"}

    last_error = "no attempts made"
    for attempt in range(max_retries + 1):
        if attempt:
            _time.sleep(backoff_base * 2 ** (attempt - 1))
        try:
            resp = sess.get(url, params=params, headers=headers,
                            stream=True, timeout=timeout)
        except requests.RequestException as exc:
            last_error = f"connection error: {exc}"
            continue
        with resp:
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise FetchError(f"export request failed: HTTP {resp.status_code}")
            written = 0
            with open(output_path, "wb") as f:
                for chunk in resp.iter_content(chunk_size=1 << 16):
                    f.write(chunk)
                    written += len(chunk)
            return written
    raise FetchError(f"export request failed after {max_retries} retries ({last_error})")
