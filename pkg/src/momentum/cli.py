"""Command-line orchestration.

Every subcommand reads an optional INI-style config file (one section per
subcommand, flat keys) with command-line flags taking precedence, resolves a
full configuration, and writes it as JSON next to its outputs together with
a manifest of produced files and their content hashes. Unknown config keys
fail fast. `MOMENTUM_SEED` provides a seed when neither the file nor a flag
does.

Exit codes: 0 success, 2 missing input, 3 configuration error,
4 convergence gate failure, 1 anything else.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import click

from . import features, glicko, ingest, sampler, validate
from .model import ModelParams

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_INPUT = 2
EXIT_CONFIG = 3
EXIT_GATE = 4

RHAT_GATE_DEFAULT = 1.01


class ConfigError(ValueError):
    pass


def _cast(raw: str, kind, key: str):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for '{key}': {raw!r}") from exc


def _load_section(config_path: str | None, section: str, schema: dict) -> dict:
    if not config_path:
        return {}
    parser = configparser.ConfigParser()
    try:
        read = parser.read(config_path)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config file: {exc}") from exc
    if not read:
        raise ConfigError(f"config file not found: {config_path}")
    if section not in parser:
        return {}
    out = {}
    for key, raw in parser[section].items():
        if key not in schema:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        out[key] = _cast(raw, schema[key][0], key)
    return out


def _resolve(section: str, config_path: str | None, schema: dict,
             cli_values: dict) -> dict:
    values = {k: default for k, (_, default) in schema.items()}
    values.update(_load_section(config_path, section, schema))
    for key, val in cli_values.items():
        if val is not None:
            values[key] = val
    if "seed" in schema and values.get("seed") is None:
        env = os.environ.get("MOMENTUM_SEED")
        values["seed"] = int(env) if env else 0
    missing = [k for k, v in values.items() if v is ...]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")
    return values


def _config_hash(values: dict) -> str:
    blob = json.dumps(values, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _finalize_run(out_dir: Path, section: str, values: dict, t0: float) -> None:
    """Write resolved config and a content-hash manifest. Wall-clock timing
    is kept in its own field so the rest of the manifest is reproducible."""
    resolved = dict(values)
    resolved["command"] = section
    resolved["config_hash"] = _config_hash(values)
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as f:
        json.dump(resolved, f, indent=1, sort_keys=True, default=str)
        f.write("\n")
    files = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            files[str(path.relative_to(out_dir))] = _sha256_file(path)
    manifest = {"files": files, "timing": {"runtime_seconds": time.time() - t0}}
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _run_guarded(fn):
    try:
        fn()
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except FileNotFoundError as exc:
        _fail(EXIT_MISSING_INPUT, str(exc))
    except ingest.FetchError as exc:
        _fail(EXIT_ERROR, str(exc))
    except (ValueError, KeyError) as exc:
        _fail(EXIT_ERROR, str(exc))


@click.group()
def main() -> None:
    """Winner-loser effect analysis pipeline."""


# --- fetch -------------------------------------------------------------------

_FETCH_SCHEMA = {
    "username": (str, ...),
    "out": (str, ...),
    "base_url": (str, "https://lichess.org"),
    "since": (int, None),
    "max_retries": (int, 5),
    "backoff_base": (float, 1.0),
}


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--username", type=str, default=None)
@click.option("--out", type=str, default=None)
@click.option("--base-url", "base_url", type=str, default=None)
@click.option("--since", type=int, default=None)
@click.option("--max-retries", "max_retries", type=int, default=None)
@click.option("--backoff-base", "backoff_base", type=float, default=None)
def fetch(config_path, **cli_values):
    """Download a user's raw game export (NDJSON), written verbatim."""

    def run():
        v = _resolve("fetch", config_path, _FETCH_SCHEMA, cli_values)
        out_path = Path(v["out"])
        out_path.parent.mkdir(parents=True, exist_ok=True)
        written = ingest.fetch_export(
            v["username"], out_path, base_url=v["base_url"], since=v["since"],
            max_retries=v["max_retries"], backoff_base=v["backoff_base"])
        sidecar = dict(v)
        sidecar["config_hash"] = _config_hash(v)
        with open(str(out_path) + ".run.json", "w", encoding="utf-8") as f:
            json.dump(sidecar, f, indent=1, sort_keys=True)
            f.write("\n")
        click.echo(f"wrote {written} bytes to {out_path}")

    _run_guarded(run)


# --- ingest ------------------------------------------------------------------

_INGEST_SCHEMA = {
    "input": (str, ...),
    "focal_id": (str, ...),
    "format": (str, "auto"),        # ndjson | pgn | auto
    "out_dir": (str, ...),
    "base_seconds": (int, None),
    "increment_seconds": (int, None),
    "rated_only": (bool, True),
    "standard_only": (bool, True),
    "clean": (bool, True),
}


@main.command("ingest")
@click.option("--config", "config_path", type=str, default=None)
@click.option("--input", "input", type=str, default=None)
@click.option("--focal-id", "focal_id", type=str, default=None)
@click.option("--format", "format", type=click.Choice(["ndjson", "pgn", "auto"]), default=None)
@click.option("--out-dir", "out_dir", type=str, default=None)
@click.option("--base-seconds", "base_seconds", type=int, default=None)
@click.option("--increment-seconds", "increment_seconds", type=int, default=None)
@click.option("--rated-only/--no-rated-only", "rated_only", default=None)
@click.option("--standard-only/--no-standard-only", "standard_only", default=None)
@click.option("--clean/--no-clean", "clean", default=None)
def ingest_cmd(config_path, **cli_values):
    """Parse a raw export into the canonical games file plus a rejects report."""

    def run():
        t0 = time.time()
        v = _resolve("ingest", config_path, _INGEST_SCHEMA, cli_values)
        src = Path(v["input"])
        if not src.exists():
            raise FileNotFoundError(f"input file not found: {src}")
        fmt = v["format"]
        if fmt == "auto":
            fmt = "pgn" if src.suffix.lower() == ".pgn" else "ndjson"
        with open(src, "rb") as f:
            if fmt == "pgn":
                records, rejects = ingest.parse_pgn_export(f, v["focal_id"])
            else:
                records, rejects = ingest.parse_ndjson_export(f, v["focal_id"])
        if v["base_seconds"] is not None and v["increment_seconds"] is not None:
            tc = ingest.TimeControlFilter(v["base_seconds"], v["increment_seconds"])
            records = ingest.filter_games(records, tc, v["rated_only"], v["standard_only"])
        if v["clean"]:
            records, dropped = ingest.clean_stream(records)
            rejects = rejects + dropped
        out = Path(v["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        ingest.write_canonical(records, out / "games.tsv")
        ingest.write_rejects(rejects, out / "rejects.txt")
        _finalize_run(out, "ingest", v, t0)
        click.echo(f"{len(records)} games, {len(rejects)} rejects -> {out}")

    _run_guarded(run)


# --- sessions ------------------------------------------------------------------

_SESSIONS_SCHEMA = {
    "games": (str, ...),
    "gap_seconds": (int, 300),
    "thresholds": (str, "10"),
    "out_dir": (str, ...),
}


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--games", type=str, default=None)
@click.option("--gap-seconds", "gap_seconds", type=int, default=None)
@click.option("--thresholds", type=str, default=None)
@click.option("--out-dir", "out_dir", type=str, default=None)
def sessions(config_path, **cli_values):
    """Segment a canonical games file into sessions and report statistics."""

    def run():
        t0 = time.time()
        v = _resolve("sessions", config_path, _SESSIONS_SCHEMA, cli_values)
        games_path = Path(v["games"])
        if not games_path.exists():
            raise FileNotFoundError(f"games file not found: {games_path}")
        thresholds = [int(x) for x in str(v["thresholds"]).split(",") if x.strip()]
        by_player: dict[str, list] = {}
        for r in ingest.read_canonical(games_path):
            by_player.setdefault(r.focal_id, []).append(r)
        segmented = {pid: features.segment_sessions(recs, v["gap_seconds"])
                     for pid, recs in by_player.items()}
        pooled = features.pooled_session_statistics(segmented, thresholds)
        doc = {
            "pooled": pooled.to_dict(),
            "players": {
                pid: features.session_statistics(s, thresholds).to_dict()
                for pid, s in sorted(segmented.items())
            },
        }
        out = Path(v["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "session_stats.json", "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1, sort_keys=True)
            f.write("\n")
        _finalize_run(out, "sessions", v, t0)
        click.echo(json.dumps(doc["pooled"], sort_keys=True))

    _run_guarded(run)


# --- fit -----------------------------------------------------------------------

_FIT_SCHEMA = {
    "games": (str, None),
    "dataset_dir": (str, None),
    "out_dir": (str, ...),
    "n": (int, 1),
    "drop_draws": (bool, True),
    "chains": (int, 4),
    "warmup": (int, 1000),
    "samples": (int, 1000),
    "target_accept": (float, 0.8),
    "max_depth": (int, 10),
    "scale_prior": (str, "half_normal"),
    "seed": (int, None),
    "gate": (float, RHAT_GATE_DEFAULT),
    "no_gate": (bool, False),
}


def _write_effects_csv(draws, dataset, path) -> None:
    """Per-player change in win probability implied by the history effect:
    posterior of logistic(beta*(1-xbar)) - logistic(-beta*xbar). For n=1 this
    is the previous-game loss -> win contrast; for n>1 the full loss-streak ->
    win-streak contrast."""
    import numpy as np

    from .model import logistic

    flat = draws.flat_matrix()
    names = draws.names
    with open(path, "w", encoding="utf-8") as f:
        f.write("player_index,player_id,xbar,mean,q2.5,q17,q50,q83,q97.5\n")
        for j, pid in enumerate(dataset.player_ids):
            beta = flat[:, names.index(f"beta[{j}]")]
            xbar = dataset.xbar[j]
            delta = logistic(beta * (1.0 - xbar)) - logistic(-beta * xbar)
            qs = np.quantile(delta, [0.025, 0.17, 0.5, 0.83, 0.975])
            cells = [str(j), pid, repr(float(xbar)), repr(float(delta.mean()))]
            cells += [repr(float(q)) for q in qs]
            f.write(",".join(cells) + "\n")


def _dataset_from_config(v: dict) -> features.Dataset:
    if v.get("dataset_dir"):
        src = Path(v["dataset_dir"])
        if not (src / "observations.csv").exists():
            raise FileNotFoundError(f"dataset not found in {src}")
        return features.read_dataset(src)
    if not v.get("games"):
        raise ConfigError("either 'games' or 'dataset_dir' must be provided")
    games_path = Path(v["games"])
    if not games_path.exists():
        raise FileNotFoundError(f"games file not found: {games_path}")
    records = ingest.read_canonical(games_path)
    by_player: dict[str, list] = {}
    for r in records:
        by_player.setdefault(r.focal_id, []).append(r)
    cfg = features.FeatureConfig(n=v["n"], drop_draws=v["drop_draws"])
    return features.build_dataset(by_player, cfg)


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--games", type=str, default=None)
@click.option("--dataset-dir", "dataset_dir", type=str, default=None)
@click.option("--out-dir", "out_dir", type=str, default=None)
@click.option("--n", type=int, default=None)
@click.option("--drop-draws/--keep-draws", "drop_draws", default=None)
@click.option("--chains", type=int, default=None)
@click.option("--warmup", type=int, default=None)
@click.option("--samples", type=int, default=None)
@click.option("--target-accept", "target_accept", type=float, default=None)
@click.option("--max-depth", "max_depth", type=int, default=None)
@click.option("--scale-prior", "scale_prior",
              type=click.Choice(["half_normal", "inv_gamma"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--gate", type=float, default=None)
@click.option("--no-gate", "no_gate", is_flag=True, default=None)
def fit(config_path, **cli_values):
    """Build the dataset, sample the posterior, and summarize.

    Exits 4 when the largest split R-hat exceeds the gate (default 1.01)
    unless --no-gate is given.
    """

    def run():
        t0 = time.time()
        v = _resolve("fit", config_path, _FIT_SCHEMA, cli_values)
        dataset = _dataset_from_config(v)
        cfg = sampler.SamplerConfig(
            chains=v["chains"], warmup_iters=v["warmup"],
            sampling_iters=v["samples"], target_accept=v["target_accept"],
            max_tree_depth=v["max_depth"], seed=v["seed"])
        draws, runtime = sampler.fit_runtime(dataset, cfg,
                                             scale_prior=v["scale_prior"])
        out = Path(v["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        features.write_dataset(dataset, out / "dataset")
        sampler.save_draws(draws, out / "draws", runtime_seconds=runtime)
        rows = sampler.summarize(draws)
        sampler.write_summary_csv(rows, out / "summary.csv")
        _write_effects_csv(draws, dataset, out / "effects.csv")
        finite_rhats = [r.rhat for r in rows if math.isfinite(r.rhat)]
        max_rhat = max(finite_rhats) if finite_rhats else math.nan
        report = {
            "max_rhat": max_rhat,
            "min_ess_bulk": min((r.ess_bulk for r in rows
                                 if math.isfinite(r.ess_bulk)), default=math.nan),
            "divergences": int(draws.divergences.sum()),
            "gate": v["gate"],
            "gate_passed": bool(math.isfinite(max_rhat) and max_rhat <= v["gate"]),
            "warnings": draws.warnings,
            "delta_win_prob_contrast": (
                "previous game loss -> win" if v["n"] == 1
                else "full window loss-streak -> win-streak "
                     "(xtilde from -xbar to 1-xbar)"),
        }
        with open(out / "convergence.json", "w", encoding="utf-8") as f:
            json.dump(report, f, indent=1, sort_keys=True)
            f.write("\n")
        _finalize_run(out, "fit", v, t0)
        click.echo(f"max rhat {max_rhat:.4f}, "
                   f"{report['divergences']} divergences -> {out}")
        if not v["no_gate"] and not report["gate_passed"]:
            _fail(EXIT_GATE, f"convergence gate failed: max rhat {max_rhat:.4f} "
                             f"> {v['gate']}")

    _run_guarded(run)


# --- summarize -------------------------------------------------------------------

_SUMMARIZE_SCHEMA = {
    "draws_dir": (str, ...),
    "out_dir": (str, ...),
}


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--draws-dir", "draws_dir", type=str, default=None)
@click.option("--out-dir", "out_dir", type=str, default=None)
def summarize(config_path, **cli_values):
    """Summary table (moments, intervals, diagnostics) for stored draws."""

    def run():
        t0 = time.time()
        v = _resolve("summarize", config_path, _SUMMARIZE_SCHEMA, cli_values)
        src = Path(v["draws_dir"])
        if not (src / "metadata.json").exists():
            raise FileNotFoundError(f"draws not found in {src}")
        draws = sampler.load_draws(src)
        out = Path(v["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        sampler.write_summary_csv(sampler.summarize(draws), out / "summary.csv")
        _finalize_run(out, "summarize", v, t0)
        click.echo(f"summary -> {out / 'summary.csv'}")

    _run_guarded(run)


# --- ppc -------------------------------------------------------------------------

_PPC_SCHEMA = {
    "draws_dir": (str, ...),
    "dataset_dir": (str, ...),
    "games": (str, ...),
    "player": (str, ...),
    "out_dir": (str, ...),
    "holdout_games": (int, 1000),
    "history_games": (int, 1000),
    "replications": (int, 4000),
    "opp_rd": (float, 45.0),
    "init_rd": (float, 45.0),
    "init_volatility": (float, 0.06),
    "glicko_tau": (float, 0.5),
    "seed": (int, None),
}


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--draws-dir", "draws_dir", type=str, default=None)
@click.option("--dataset-dir", "dataset_dir", type=str, default=None)
@click.option("--games", type=str, default=None)
@click.option("--player", type=str, default=None)
@click.option("--out-dir", "out_dir", type=str, default=None)
@click.option("--holdout-games", "holdout_games", type=int, default=None)
@click.option("--history-games", "history_games", type=int, default=None)
@click.option("--replications", type=int, default=None)
@click.option("--opp-rd", "opp_rd", type=float, default=None)
@click.option("--seed", type=int, default=None)
def ppc(config_path, **cli_values):
    """Posterior-predictive rating trajectories over a holdout window."""

    def run():
        t0 = time.time()
        v = _resolve("ppc", config_path, _PPC_SCHEMA, cli_values)
        cfg = validate.PPCConfig(holdout_games=v["holdout_games"],
                                 history_games=v["history_games"],
                                 replications=v["replications"])
        draws = sampler.load_draws(Path(v["draws_dir"]))
        dataset = features.read_dataset(Path(v["dataset_dir"]))
        records = ingest.read_canonical(Path(v["games"]))
        records = [r for r in records if r.focal_id == v["player"]]
        if not records:
            raise ValueError(f"player {v['player']!r} not present in games file")
        if v["player"] not in dataset.player_ids:
            raise ValueError(f"player {v['player']!r} not in dataset")
        j = dataset.player_ids.index(v["player"])
        decisive = [r for r in records if r.outcome != "draw"]
        holdout = decisive[-cfg.holdout_games:]
        history = decisive[:-cfg.holdout_games][-cfg.history_games:]
        n = dataset.n
        if len(history) < n:
            raise ValueError("history window shorter than the model's n")
        tail = tuple(1 if r.outcome == "win" else 0 for r in history[-n:])
        gcfg = glicko.GlickoConfig(tau=v["glicko_tau"],
                                   default_opponent_rd=v["opp_rd"])
        meta = validate.PPCMeta(
            player_index=j, xbar=dataset.xbar[j], n=n, history_tail=tail,
            initial_state=glicko.GlickoState(holdout[0].focal_rating,
                                             v["init_rd"], v["init_volatility"]))
        result = validate.posterior_predictive_trajectories(
            draws, holdout, meta, gcfg, replications=cfg.replications,
            seed=v["seed"])
        out = Path(v["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        validate.write_ppc_outputs(result, [r.focal_rating for r in holdout], out)
        _finalize_run(out, "ppc", v, t0)
        click.echo(f"{result.trajectories.shape[0]} trajectories "
                   f"({result.skipped} skipped) -> {out}")

    _run_guarded(run)


# --- permute -----------------------------------------------------------------------

_PERMUTE_SCHEMA = {
    "dataset_dir": (str, ...),
    "out_dir": (str, ...),
    "b": (int, 1000),
    "chains": (int, 2),
    "warmup": (int, 500),
    "samples": (int, 500),
    "rhat_gate": (float, 1.2),
    "n_jobs": (int, 1),
    "seed": (int, None),
}


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--dataset-dir", "dataset_dir", type=str, default=None)
@click.option("--out-dir", "out_dir", type=str, default=None)
@click.option("--b", "b", type=int, default=None)
@click.option("--chains", type=int, default=None)
@click.option("--warmup", type=int, default=None)
@click.option("--samples", type=int, default=None)
@click.option("--rhat-gate", "rhat_gate", type=float, default=None)
@click.option("--n-jobs", "n_jobs", type=int, default=None)
@click.option("--seed", type=int, default=None)
def permute(config_path, **cli_values):
    """Permutation null distribution of posterior means (reduced refits)."""

    def run():
        t0 = time.time()
        v = _resolve("permute", config_path, _PERMUTE_SCHEMA, cli_values)
        dataset = features.read_dataset(Path(v["dataset_dir"]))
        fit_cfg = sampler.SamplerConfig(chains=v["chains"],
                                        warmup_iters=v["warmup"],
                                        sampling_iters=v["samples"])
        results, excluded = validate.permutation_test(
            dataset, v["b"], fit_cfg, seed=v["seed"],
            rhat_gate=v["rhat_gate"], n_jobs=v["n_jobs"])
        out = Path(v["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        validate.write_permutation_outputs(results, excluded, out)
        _finalize_run(out, "permute", v, t0)
        click.echo(f"{v['b']} replicates ({excluded} excluded) -> {out}")

    _run_guarded(run)


# --- simulate ----------------------------------------------------------------------

_TRUTH_KEYS = ("mu_beta", "gamma1", "gamma2", "tau1", "tau2", "rho")

_SIMULATE_SCHEMA = {
    "out_dir": (str, ...),
    "players": (int, 20),
    "games_per_player": (int, 2000),
    "n": (int, 1),
    "mu_beta": (float, 0.0),
    "gamma1": (float, 0.0),
    "gamma2": (float, 0.0),
    "tau1": (float, 0.3),
    "tau2": (float, 0.3),
    "rho": (float, 0.0),
    "rating_diff_sd": (float, 50.0),
    "emit_games": (bool, False),
    "seed": (int, None),
}


def _spec_from_values(v: dict) -> validate.SyntheticSpec:
    truth = ModelParams(
        mu_beta=v["mu_beta"], gamma1=v["gamma1"], gamma2=v["gamma2"],
        tau1=v["tau1"], tau2=v["tau2"], rho=v["rho"],
        sigma=1.0, sigma_g1=1.0, sigma_g2=1.0)
    return validate.SyntheticSpec(
        n_players=v["players"], games_per_player=v["games_per_player"],
        true_params=truth, n=v["n"], seed=v["seed"],
        rating_diff_sd=v["rating_diff_sd"])


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--out-dir", "out_dir", type=str, default=None)
@click.option("--players", type=int, default=None)
@click.option("--games-per-player", "games_per_player", type=int, default=None)
@click.option("--n", type=int, default=None)
@click.option("--mu-beta", "mu_beta", type=float, default=None)
@click.option("--gamma1", type=float, default=None)
@click.option("--gamma2", type=float, default=None)
@click.option("--tau1", type=float, default=None)
@click.option("--tau2", type=float, default=None)
@click.option("--rho", type=float, default=None)
@click.option("--rating-diff-sd", "rating_diff_sd", type=float, default=None)
@click.option("--emit-games/--no-emit-games", "emit_games", default=None)
@click.option("--seed", type=int, default=None)
def simulate(config_path, **cli_values):
    """Generate a synthetic cohort dataset (and optionally a games file)."""

    def run():
        t0 = time.time()
        v = _resolve("simulate", config_path, _SIMULATE_SCHEMA, cli_values)
        spec = _spec_from_values(v)
        dataset, truth = validate.simulate_synthetic(spec)
        out = Path(v["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        features.write_dataset(dataset, out / "dataset")
        truth_doc = {
            "params": {k: getattr(truth.params, k) for k in _TRUTH_KEYS},
            "alpha": [float(x) for x in truth.params.alpha],
            "beta": [float(x) for x in truth.params.beta],
            "xbar": list(truth.xbar),
        }
        with open(out / "truth.json", "w", encoding="utf-8") as f:
            json.dump(truth_doc, f, indent=1, sort_keys=True)
            f.write("\n")
        if v["emit_games"]:
            records = []
            for j in range(dataset.n_players):
                records.extend(validate.synthetic_records(dataset, truth, j))
            ingest.write_canonical(records, out / "games.tsv")
        _finalize_run(out, "simulate", v, t0)
        click.echo(f"{len(dataset.observations)} observations -> {out}")

    _run_guarded(run)


# --- recover ---------------------------------------------------------------------

_RECOVER_SCHEMA = dict(_SIMULATE_SCHEMA)
_RECOVER_SCHEMA.pop("emit_games")
_RECOVER_SCHEMA.update({
    "chains": (int, 4),
    "warmup": (int, 1000),
    "samples": (int, 1000),
    "n_seeds": (int, 1),
    "rhat_gate": (float, 1.05),
    "n_jobs": (int, 1),
})


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--out-dir", "out_dir", type=str, default=None)
@click.option("--players", type=int, default=None)
@click.option("--games-per-player", "games_per_player", type=int, default=None)
@click.option("--n", type=int, default=None)
@click.option("--mu-beta", "mu_beta", type=float, default=None)
@click.option("--gamma1", type=float, default=None)
@click.option("--gamma2", type=float, default=None)
@click.option("--tau1", type=float, default=None)
@click.option("--tau2", type=float, default=None)
@click.option("--rho", type=float, default=None)
@click.option("--rating-diff-sd", "rating_diff_sd", type=float, default=None)
@click.option("--chains", type=int, default=None)
@click.option("--warmup", type=int, default=None)
@click.option("--samples", type=int, default=None)
@click.option("--n-seeds", "n_seeds", type=int, default=None)
@click.option("--rhat-gate", "rhat_gate", type=float, default=None)
@click.option("--n-jobs", "n_jobs", type=int, default=None)
@click.option("--seed", type=int, default=None)
def recover(config_path, **cli_values):
    """Synthetic-data parameter recovery (optionally across several seeds)."""

    def run():
        t0 = time.time()
        v = _resolve("recover", config_path, _RECOVER_SCHEMA, cli_values)
        spec = _spec_from_values(v)
        fit_cfg = sampler.SamplerConfig(
            chains=v["chains"], warmup_iters=v["warmup"],
            sampling_iters=v["samples"], seed=v["seed"])
        if v["n_seeds"] <= 1:
            reports = [validate.parameter_recovery(spec, fit_cfg,
                                                   rhat_gate=v["rhat_gate"])]
        else:
            reports = validate.recovery_study(spec, fit_cfg, v["n_seeds"],
                                              rhat_gate=v["rhat_gate"],
                                              n_jobs=v["n_jobs"])
        out = Path(v["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        validate.write_recovery_outputs(reports, out)
        _finalize_run(out, "recover", v, t0)
        covered = sum(r.covered for rep in reports for r in rep.rows)
        total = sum(len(rep.rows) for rep in reports)
        click.echo(f"{covered}/{total} parameters covered -> {out}")

    _run_guarded(run)


# --- sbc ------------------------------------------------------------------------

_SBC_SCHEMA = {
    "out_dir": (str, ...),
    "replications": (int, 100),
    "players": (int, 8),
    "games_per_player": (int, 300),
    "n": (int, 1),
    "rating_diff_sd": (float, 1.0),
    "thin_to": (int, 63),
    "bins": (int, 8),
    "chains": (int, 2),
    "warmup": (int, 500),
    "samples": (int, 500),
    "flip_xtilde": (bool, False),
    "rhat_gate": (float, 1.2),
    "n_jobs": (int, 1),
    "seed": (int, None),
}


@main.command()
@click.option("--config", "config_path", type=str, default=None)
@click.option("--out-dir", "out_dir", type=str, default=None)
@click.option("--replications", type=int, default=None)
@click.option("--players", type=int, default=None)
@click.option("--games-per-player", "games_per_player", type=int, default=None)
@click.option("--n", type=int, default=None)
@click.option("--rating-diff-sd", "rating_diff_sd", type=float, default=None)
@click.option("--thin-to", "thin_to", type=int, default=None)
@click.option("--bins", type=int, default=None)
@click.option("--chains", type=int, default=None)
@click.option("--warmup", type=int, default=None)
@click.option("--samples", type=int, default=None)
@click.option("--flip-xtilde/--no-flip-xtilde", "flip_xtilde", default=None)
@click.option("--rhat-gate", "rhat_gate", type=float, default=None)
@click.option("--n-jobs", "n_jobs", type=int, default=None)
@click.option("--seed", type=int, default=None)
def sbc(config_path, **cli_values):
    """Simulation-based rank calibration of the fitting pipeline."""

    def run():
        t0 = time.time()
        v = _resolve("sbc", config_path, _SBC_SCHEMA, cli_values)
        template = validate.SyntheticSpec(
            n_players=v["players"], games_per_player=v["games_per_player"],
            true_params=ModelParams(mu_beta=0, gamma1=0, gamma2=0, tau1=1,
                                    tau2=1, rho=0, sigma=1, sigma_g1=1,
                                    sigma_g2=1),
            n=v["n"], seed=v["seed"], rating_diff_sd=v["rating_diff_sd"])
        fit_cfg = sampler.SamplerConfig(
            chains=v["chains"], warmup_iters=v["warmup"],
            sampling_iters=v["samples"], seed=v["seed"])
        result = validate.sbc_ranks(
            v["replications"], template, fit_cfg, thin_to=v["thin_to"],
            n_bins=v["bins"], seed=v["seed"], flip_xtilde=v["flip_xtilde"],
            rhat_gate=v["rhat_gate"], n_jobs=v["n_jobs"])
        out = Path(v["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        validate.write_sbc_outputs(result, out)
        _finalize_run(out, "sbc", v, t0)
        click.echo(json.dumps(result.p_values, sort_keys=True) + f" -> {out}")

    _run_guarded(run)


if __name__ == "__main__":
    main()
