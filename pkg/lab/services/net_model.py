"""
Network state generation for the routing laboratory.

States are (RTT seconds, bandwidth bits/s) pairs sampled from the GOOD / MID /
BAD regimes and evolved by a clamped Gauss-Markov random walk. kappa() maps a
state and a token price to the multiplier applied to the cloud-minus-edge
marginal cost.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from lab.exceptions import DomainError, UsageError

MBIT = 1e6
MS = 1e-3

GOOD = 'GOOD'
MID = 'MID'
BAD = 'BAD'


@dataclass(frozen=True)
class NetworkState:
    """Link state: rtt in seconds, bw in bits per second"""
    rtt: float
    bw: float

    def __post_init__(self):
        if not (self.rtt > 0 and self.bw > 0):
            raise DomainError(f"Network state must be strictly positive, got rtt={self.rtt}, bw={self.bw}")

    @property
    def rtt_ms(self) -> float:
        return self.rtt / MS

    @property
    def bw_mbps(self) -> float:
        return self.bw / MBIT


@dataclass(frozen=True)
class Regime:
    name: str
    bw_range: tuple[float, float]
    rtt_range: tuple[float, float]

    def __post_init__(self):
        for label, (lo, hi) in (('bw_range', self.bw_range), ('rtt_range', self.rtt_range)):
            if not (0 < lo <= hi):
                raise UsageError(f"Regime {self.name}: {label} must satisfy 0 < min <= max, got [{lo}, {hi}]")

    @property
    def midpoint(self) -> NetworkState:
        return NetworkState(rtt=sum(self.rtt_range) / 2, bw=sum(self.bw_range) / 2)

    @classmethod
    def from_units(cls, name: str, bw_mbps: tuple[float, float], rtt_ms: tuple[float, float]) -> 'Regime':
        """Build a regime from Mbit/s and ms bounds"""
        return cls(
            name=name,
            bw_range=(bw_mbps[0] * MBIT, bw_mbps[1] * MBIT),
            rtt_range=(rtt_ms[0] * MS, rtt_ms[1] * MS),
        )


REGIMES = {
    GOOD: Regime.from_units(GOOD, bw_mbps=(120, 200), rtt_ms=(20, 40)),
    MID: Regime.from_units(MID, bw_mbps=(30, 80), rtt_ms=(40, 80)),
    BAD: Regime.from_units(BAD, bw_mbps=(5, 15), rtt_ms=(80, 130)),
}


def get_regime(name: str) -> Regime:
    try:
        return REGIMES[name]
    except KeyError:
        raise UsageError(f"Unknown regime '{name}', expected one of {sorted(REGIMES)}") from None


@dataclass(frozen=True)
class DriftParams:
    sigma_rtt: float = 2 * MS
    sigma_bw: float = 2 * MBIT
    clamp: bool = True

    def __post_init__(self):
        if self.sigma_rtt < 0 or self.sigma_bw < 0:
            raise UsageError("Drift sigmas must be non-negative")


@dataclass(frozen=True)
class KappaParams:
    # References sit at the MID-regime midpoints
    rtt_ref: float = 60 * MS
    bw_ref: float = 55 * MBIT
    c_ref: float = 2e-6
    exp_rtt: float = 1.0
    exp_bw: float = 1.0
    exp_price: float = 1.0

    def __post_init__(self):
        if not (self.rtt_ref > 0 and self.bw_ref > 0 and self.c_ref > 0):
            raise UsageError("kappa references must be strictly positive")
        if min(self.exp_rtt, self.exp_bw, self.exp_price) < 0:
            raise UsageError("kappa exponents must be non-negative")


@dataclass(frozen=True)
class TraceStep:
    """One trace entry: the regime that produced it and the state"""
    regime: str
    state: NetworkState


def sample_regime_state(regime: Regime, rng: np.random.Generator) -> NetworkState:
    """Draw rtt and bw uniformly from the regime ranges"""
    rtt = rng.uniform(*regime.rtt_range)
    bw = rng.uniform(*regime.bw_range)
    return NetworkState(rtt=float(rtt), bw=float(bw))


def gauss_markov_step(
    state: NetworkState,
    drift: DriftParams,
    regime: Regime,
    rng: np.random.Generator,
) -> NetworkState:
    """S' = S + eps with independent normal noise per coordinate"""
    noise = rng.normal(0.0, 1.0, size=2)
    rtt = state.rtt + drift.sigma_rtt * noise[0]
    bw = state.bw + drift.sigma_bw * noise[1]
    if drift.clamp:
        rtt = float(np.clip(rtt, *regime.rtt_range))
        bw = float(np.clip(bw, *regime.bw_range))
    return NetworkState(rtt=float(rtt), bw=float(bw))


def kappa(state: NetworkState, price: float, params: Optional[KappaParams] = None) -> float:
    """Cost-scaling factor; increasing in rtt and price, decreasing in bw"""
    params = params or KappaParams()
    if not (state.rtt > 0 and state.bw > 0 and price > 0):
        raise DomainError("kappa requires a positive state and a positive price")
    return (
        (price / params.c_ref) ** params.exp_price
        * (state.rtt / params.rtt_ref) ** params.exp_rtt
        * (params.bw_ref / state.bw) ** params.exp_bw
    )


def regime_kappa(regime: Regime, price: float, params: Optional[KappaParams] = None) -> float:
    """kappa evaluated at the regime midpoint"""
    return kappa(regime.midpoint, price, params)


def make_trace(
    schedule: list[tuple[Regime, int]],
    drift: DriftParams,
    seed: int,
) -> list[TraceStep]:
    """Concatenate per-regime segments; each segment restarts from a fresh regime sample"""
    if not schedule:
        raise UsageError("Trace schedule must not be empty")
    rng = np.random.default_rng(seed)
    trace = []
    for regime, steps in schedule:
        if steps < 1:
            raise UsageError(f"Segment for regime {regime.name} must have at least one step")
        state = sample_regime_state(regime, rng)
        trace.append(TraceStep(regime.name, state))
        for _ in range(steps - 1):
            state = gauss_markov_step(state, drift, regime, rng)
            trace.append(TraceStep(regime.name, state))
    return trace


def tile_schedule(schedule: list[tuple[Regime, int]], total_steps: int) -> list[tuple[Regime, int]]:
    """Repeat a schedule until it covers at least total_steps states"""
    if not schedule:
        raise UsageError("Trace schedule must not be empty")
    period = sum(steps for _, steps in schedule)
    if period < 1:
        raise UsageError("Trace schedule must contain at least one step")
    repeats = max(1, -(-total_steps // period))
    return list(schedule) * repeats
