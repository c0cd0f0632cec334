"""A BBR-shaped congestion controller for the fluid simulator.

Startup, Drain, ProbeBW and ProbeRTT follow the usual BBRv1 structure; only
the five gains/window parameters below are tunable. Units are bytes and
milliseconds throughout, so rates are bytes/ms.
"""

from __future__ import annotations

import enum
import itertools
import math
from collections import deque
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import Protocol

import numpy as np

MSS = 1500
GAIN_UNIT = 256
MIN_CWND_PACKETS = 4
QUANTA_PACKETS = 3
BW_WINDOW_ROUNDS = 10
FULL_BW_ROUNDS = 3
PROBE_RTT_INTERVAL_MS = 10_000
PROBE_RTT_DURATION_MS = 200
INITIAL_RTT_MS = 100.0
PACING_CYCLE = (1.25, 0.75, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)


class CcModel(Protocol):
    def on_ack(self, now: float, ack: "AckSample") -> None: ...

    def on_loss(self, now: float, lost_bytes: int, inflight: int) -> None: ...

    def pacing_rate(self) -> float: ...

    def cwnd(self) -> int: ...


@dataclass(frozen=True)
class AckSample:
    acked: int
    rtt_ms: float
    delivery_rate: float  # bytes/ms over the sample's send-to-ack interval
    app_limited: bool
    delivered: int  # total bytes delivered, including this ack
    delivered_at_send: int
    inflight: int  # after removing the acked bytes


def _gain(num: int, den: int, lsb: int = 0) -> float:
    # fixed-point gain as written in C: GAIN_UNIT * num / den + lsb, evaluated exactly
    return float(Fraction(num, den) + Fraction(lsb, GAIN_UNIT))


@dataclass(frozen=True)
class BbrParams:
    initial_window_packets: float = 16
    high_gain: float = _gain(2885, 1000, 1)
    startup_growth_target: float = _gain(5, 4)
    drain_gain: float = _gain(1000, 2885)
    cwnd_gain: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{f.name} must be positive, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BbrParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown BBR parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def label(self) -> str:
        return "-".join(f"{getattr(self, f.name):.6g}" for f in fields(self))


PARAM_NAMES = tuple(f.name for f in fields(BbrParams))

# (conservative, default, aggressive) per tunable
PARAM_LEVELS: dict[str, tuple[float, float, float]] = {
    "initial_window_packets": (10, 16, 32),
    "high_gain": (_gain(2400, 1000, 1), _gain(2885, 1000, 1), _gain(3500, 1000, 1)),
    "startup_growth_target": (_gain(6, 5), _gain(5, 4), _gain(3, 2)),
    "drain_gain": (_gain(1000, 3500), _gain(1000, 2885), _gain(1000, 2400)),
    "cwnd_gain": (1.5, 2.0, 2.5),
}
LEVEL_NAMES = ("conservative", "default", "aggressive")


def parameter_grid(levels: dict[str, tuple[float, ...]] | None = None) -> list[tuple[tuple[int, ...], BbrParams]]:
    """Every combination of per-parameter levels, with its level-index tuple."""
    levels = dict(PARAM_LEVELS if levels is None else levels)
    for name in PARAM_NAMES:
        levels.setdefault(name, PARAM_LEVELS[name])
    axes = [range(len(levels[name])) for name in PARAM_NAMES]
    grid = []
    for combo in itertools.product(*axes):
        grid.append((combo, BbrParams(**{name: levels[name][i] for name, i in zip(PARAM_NAMES, combo)})))
    return grid


class BbrState(enum.Enum):
    STARTUP = "startup"
    DRAIN = "drain"
    PROBE_BW = "probe_bw"
    PROBE_RTT = "probe_rtt"


class BbrModel:
    def __init__(self, params: BbrParams, rng: np.random.Generator | None = None):
        self.params = params
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.state = BbrState.STARTUP
        self.pacing_gain = params.high_gain
        self.cwnd_gain = params.high_gain
        self.initial_cwnd = int(round(params.initial_window_packets * MSS))
        self._cwnd = max(self.initial_cwnd, MIN_CWND_PACKETS * MSS)
        self._pacing = params.high_gain * self._cwnd / INITIAL_RTT_MS
        self.min_rtt = math.inf
        self.min_rtt_stamp = 0.0
        self.bw_samples: deque[tuple[int, float]] = deque()
        self.max_bw = 0.0
        self.round_count = 0
        self.next_round_delivered = 0
        self.round_start = False
        self.full_bw = 0.0
        self.full_bw_count = 0
        self.filled_pipe = False
        self.cycle_index = 0
        self.cycle_stamp = 0.0
        self.probe_rtt_done = None
        self.probe_rtt_round_done = False
        self.in_recovery = False
        self.recovery_window = 0
        self.recovery_exit_delivered = 0
        self.delivered = 0

    # --- contract ---------------------------------------------------------

    def pacing_rate(self) -> float:
        return self._pacing

    def cwnd(self) -> int:
        w = self._cwnd
        if self.in_recovery:
            w = min(w, self.recovery_window)
        if self.state is BbrState.PROBE_RTT:
            w = min(w, MIN_CWND_PACKETS * MSS)
        return max(int(w), MIN_CWND_PACKETS * MSS)

    def on_loss(self, now: float, lost_bytes: int, inflight: int) -> None:
        floor = MIN_CWND_PACKETS * MSS
        if not self.in_recovery:
            self.in_recovery = True
            self.recovery_window = max(inflight, floor)
            self.recovery_exit_delivered = self.delivered + inflight + lost_bytes
        else:
            self.recovery_window = max(self.recovery_window - lost_bytes, floor)

    def on_ack(self, now: float, ack: AckSample) -> None:
        self.delivered = ack.delivered
        self._update_round(ack)
        self._update_bandwidth(ack)
        self._check_full_pipe(ack)
        self._update_min_rtt(now, ack)
        self._advance_state(now, ack)
        self._update_recovery(ack)
        self._set_pacing_rate()
        self._set_cwnd(ack)

    # --- internals --------------------------------------------------------

    def bdp(self, gain: float = 1.0) -> float:
        if self.max_bw <= 0 or not math.isfinite(self.min_rtt):
            return gain * self.initial_cwnd
        return gain * self.max_bw * self.min_rtt

    def _update_round(self, ack: AckSample) -> None:
        self.round_start = False
        if ack.delivered_at_send >= self.next_round_delivered:
            self.next_round_delivered = ack.delivered
            self.round_count += 1
            self.round_start = True

    def _update_bandwidth(self, ack: AckSample) -> None:
        if ack.delivery_rate <= 0:
            return
        if ack.app_limited and ack.delivery_rate < self.max_bw:
            return
        # one max per round, kept for the last BW_WINDOW_ROUNDS rounds
        if self.bw_samples and self.bw_samples[-1][0] == self.round_count:
            if ack.delivery_rate <= self.bw_samples[-1][1]:
                return
            self.bw_samples[-1] = (self.round_count, ack.delivery_rate)
        else:
            self.bw_samples.append((self.round_count, ack.delivery_rate))
        while self.bw_samples[0][0] <= self.round_count - BW_WINDOW_ROUNDS:
            self.bw_samples.popleft()
        self.max_bw = max(rate for _, rate in self.bw_samples)

    def _check_full_pipe(self, ack: AckSample) -> None:
        if self.filled_pipe or not self.round_start or ack.app_limited:
            return
        if self.max_bw >= self.full_bw * self.params.startup_growth_target:
            self.full_bw = self.max_bw
            self.full_bw_count = 0
            return
        self.full_bw_count += 1
        if self.full_bw_count >= FULL_BW_ROUNDS:
            self.filled_pipe = True

    def _update_min_rtt(self, now: float, ack: AckSample) -> None:
        expired = now - self.min_rtt_stamp > PROBE_RTT_INTERVAL_MS
        if ack.rtt_ms > 0 and (ack.rtt_ms <= self.min_rtt or expired):
            self.min_rtt = ack.rtt_ms
            self.min_rtt_stamp = now
        if expired and self.state is not BbrState.PROBE_RTT and math.isfinite(self.min_rtt):
            self.state = BbrState.PROBE_RTT
            self.pacing_gain = 1.0
            self.cwnd_gain = 1.0
            self.probe_rtt_done = None

    def _enter_probe_bw(self, now: float) -> None:
        self.state = BbrState.PROBE_BW
        self.cwnd_gain = self.params.cwnd_gain
        # any phase but the draining one
        self.cycle_index = int(self.rng.choice([i for i in range(len(PACING_CYCLE)) if i != 1]))
        self.pacing_gain = PACING_CYCLE[self.cycle_index]
        self.cycle_stamp = now

    def _advance_state(self, now: float, ack: AckSample) -> None:
        p = self.params
        if self.state is BbrState.STARTUP and self.filled_pipe:
            self.state = BbrState.DRAIN
            self.pacing_gain = p.drain_gain
            self.cwnd_gain = p.high_gain
        if self.state is BbrState.DRAIN and ack.inflight <= self.bdp():
            self._enter_probe_bw(now)
        if self.state is BbrState.PROBE_BW:
            elapsed = now - self.cycle_stamp
            phase_over = elapsed > self.min_rtt
            if PACING_CYCLE[self.cycle_index] < 1.0:
                phase_over = phase_over or ack.inflight <= self.bdp()
            if phase_over:
                self.cycle_index = (self.cycle_index + 1) % len(PACING_CYCLE)
                self.cycle_stamp = now
                self.pacing_gain = PACING_CYCLE[self.cycle_index]
        if self.state is BbrState.PROBE_RTT:
            if self.probe_rtt_done is None:
                if ack.inflight <= MIN_CWND_PACKETS * MSS:
                    self.probe_rtt_done = now + PROBE_RTT_DURATION_MS
            elif now >= self.probe_rtt_done:
                self.min_rtt_stamp = now
                if self.filled_pipe:
                    self._enter_probe_bw(now)
                else:
                    self.state = BbrState.STARTUP
                    self.pacing_gain = p.high_gain
                    self.cwnd_gain = p.high_gain

    def _update_recovery(self, ack: AckSample) -> None:
        if not self.in_recovery:
            return
        if ack.delivered_at_send >= self.recovery_exit_delivered:
            self.in_recovery = False
            return
        self.recovery_window = max(self.recovery_window, ack.inflight + ack.acked)

    def _set_pacing_rate(self) -> None:
        if self.max_bw <= 0:
            return
        rate = self.pacing_gain * self.max_bw
        if self.filled_pipe or rate > self._pacing:
            self._pacing = rate

    def _set_cwnd(self, ack: AckSample) -> None:
        target = self.bdp(self.cwnd_gain) + QUANTA_PACKETS * MSS
        if self.filled_pipe:
            self._cwnd = min(self._cwnd + ack.acked, target)
        elif self._cwnd < target or ack.delivered < self.initial_cwnd:
            self._cwnd += ack.acked
        self._cwnd = max(self._cwnd, MIN_CWND_PACKETS * MSS)
