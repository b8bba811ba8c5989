"""Shared fixtures: record builders, synthetic cohorts, and a stub export server."""

from __future__ import annotations

import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest

from momentum.ingest import GameRecord
from momentum.model import ModelParams
from momentum.validate import SyntheticSpec, simulate_synthetic


def make_record(start_time: float, outcome: str = "win", *, color: str = "white",
                focal_rating: float = 2000.0, opponent_rating: float = 2000.0,
                base: int = 60, inc: int = 0, rated: bool = True,
                variant: str = "standard", termination: str = "normal",
                focal_id: str = "alice", game_id: str | None = None) -> GameRecord:
    return GameRecord(
        game_id=game_id or f"g{int(start_time)}",
        start_time=float(start_time),
        base_seconds=base, increment_seconds=inc, rated=rated, variant=variant,
        focal_id=focal_id, focal_color=color, focal_rating=focal_rating,
        opponent_rating=opponent_rating, outcome=outcome, termination=termination,
    )


def stream_from_outcomes(outcomes, *, focal_id: str = "alice", spacing: float = 60.0,
                         start: float = 1.7e9, **kwargs) -> list[GameRecord]:
    return [make_record(start + i * spacing, outcome, focal_id=focal_id, **kwargs)
            for i, outcome in enumerate(outcomes)]


def make_params(J: int = 0, **kwargs) -> ModelParams:
    defaults = dict(mu_beta=0.0, gamma1=0.0, gamma2=0.0, tau1=1.0, tau2=1.0,
                    rho=0.0, sigma=1.0, sigma_g1=1.0, sigma_g2=1.0)
    defaults.update(kwargs)
    if J and "alpha" not in defaults:
        import numpy as np

        defaults["alpha"] = np.zeros(J)
        defaults["beta"] = np.zeros(J)
    return ModelParams(**defaults)


def small_synthetic(J: int = 3, G: int = 80, seed: int = 11, n: int = 1, **truth):
    params = make_params(**truth) if truth else make_params(mu_beta=0.2, tau1=0.3,
                                                            tau2=0.3, gamma1=0.1,
                                                            gamma2=0.003, rho=0.1)
    spec = SyntheticSpec(n_players=J, games_per_player=G, true_params=params,
                         n=n, seed=seed)
    return simulate_synthetic(spec)


class _StubState:
    def __init__(self) -> None:
        self.body = b""
        self.fail_count = 0
        self.status_on_fail = 429
        self.requests: list[str] = []


class _StubHandler(BaseHTTPRequestHandler):
    state: _StubState

    def do_GET(self):  # noqa: N802 (http.server API)
        st = self.state
        st.requests.append(self.path)
        if st.fail_count > 0:
            st.fail_count -= 1
            self.send_response(st.status_on_fail)
            self.end_headers()
            return
        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.end_headers()
        self.wfile.write(st.body)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub_server():
    """(base_url, state) for a throwaway local export endpoint."""
    state = _StubState()
    handler = type("Handler", (_StubHandler,), {"state": state})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_port}", state
    finally:
        server.shutdown()
        thread.join(timeout=5)
