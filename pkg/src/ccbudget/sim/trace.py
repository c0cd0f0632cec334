"""Mahimahi-format packet-delivery traces and synthetic trace families.

A trace file lists one integer millisecond timestamp per line; each line is
an opportunity for one MTU-sized (1500 byte) packet to leave the bottleneck
at that millisecond. The schedule repeats with period ``duration_ms``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PACKET_BYTES = 1500


class TraceError(ValueError):
    pass


class EmptyTrace(TraceError):
    pass


class NonMonotonic(TraceError):
    def __init__(self, line: int):
        super().__init__(f"line {line}: timestamp decreases")
        self.line = line


class NonInteger(TraceError):
    def __init__(self, line: int, value: str):
        super().__init__(f"line {line}: {value!r} is not a non-negative integer")
        self.line = line


@dataclass(frozen=True)
class Trace:
    deliveries: tuple[int, ...]
    duration_ms: int
    name: str = "trace"

    def __post_init__(self):
        d = tuple(int(x) for x in self.deliveries)
        if any(b < a for a, b in zip(d, d[1:])):
            raise TraceError("delivery timestamps must be non-decreasing")
        if d and d[0] < 0:
            raise TraceError("timestamps must be non-negative")
        if self.duration_ms <= 0 or (d and self.duration_ms <= d[-1]):
            raise TraceError(f"duration_ms={self.duration_ms} must exceed the last timestamp")
        object.__setattr__(self, "deliveries", d)

    @property
    def packets(self) -> int:
        return len(self.deliveries)

    @property
    def avg_mbps(self) -> float:
        return self.packets * PACKET_BYTES * 8 / (self.duration_ms / 1000.0) / 1e6

    def bdp_bytes(self, rtt_ms: float) -> float:
        return self.avg_mbps * 1e6 * rtt_ms / 1000.0 / 8

    def opportunities(self) -> np.ndarray:
        """Delivery opportunities per 1 ms slot over one period."""
        return np.bincount(np.asarray(self.deliveries, dtype=np.int64), minlength=self.duration_ms)[: self.duration_ms]

    def bandwidth_series(self, interval_ms: int = 1000) -> np.ndarray:
        """Mbps in consecutive intervals of one period (last partial interval dropped if any full one exists)."""
        counts = self.opportunities()
        n_full = len(counts) // interval_ms
        if n_full == 0:
            return np.array([self.avg_mbps])
        per = counts[: n_full * interval_ms].reshape(n_full, interval_ms).sum(axis=1)
        return per * PACKET_BYTES * 8 / (interval_ms / 1000.0) / 1e6

    def scaled(self, factor: float) -> "Trace":
        """Deterministically thin (factor < 1) the delivery schedule."""
        if not 0 < factor <= 1:
            raise ValueError("scale factor must be in (0, 1]")
        kept = [t for i, t in enumerate(self.deliveries) if math.floor((i + 1) * factor) > math.floor(i * factor)]
        return Trace(tuple(kept), self.duration_ms, self.name)

    def to_text(self) -> str:
        return "".join(f"{t}\n" for t in self.deliveries)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="ascii")


def parse_trace(text: str, name: str = "trace") -> Trace:
    stamps: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if not s:
            continue
        if not s.isdigit():
            raise NonInteger(lineno, s)
        value = int(s)
        if stamps and value < stamps[-1]:
            raise NonMonotonic(lineno)
        stamps.append(value)
    if not stamps:
        raise EmptyTrace("trace has no delivery opportunities")
    # timestamps index 1 ms slots, so the period covers slot 0..last
    return Trace(tuple(stamps), stamps[-1] + 1, name)


def load_trace(path: str | Path) -> Trace:
    path = Path(path)
    return parse_trace(path.read_text(encoding="utf-8"), name=path.stem)


# --- synthetic families -------------------------------------------------------


def _from_rate_profile(rates_mbps: Sequence[float], name: str) -> Trace:
    """Spread deliveries so that the cumulative count tracks the rate profile (1 ms steps)."""
    per_ms = np.asarray(rates_mbps, dtype=np.float64) * 1e6 / 8 / PACKET_BYTES / 1000.0
    cumulative = np.floor(np.cumsum(np.maximum(per_ms, 0.0)) + 1e-9).astype(np.int64)
    counts = np.diff(np.concatenate([[0], cumulative]))
    stamps = np.repeat(np.arange(len(per_ms)), counts)
    return Trace(tuple(int(t) for t in stamps), len(per_ms), name)


def constant_trace(mbps: float, duration_ms: int = 10_000, name: str | None = None) -> Trace:
    return _from_rate_profile(np.full(duration_ms, mbps), name or f"const{mbps:g}")


def square_wave_trace(
    high_mbps: float, low_mbps: float, period_ms: int = 2000, duration_ms: int = 10_000, name: str | None = None
) -> Trace:
    t = np.arange(duration_ms)
    rates = np.where((t % period_ms) < period_ms // 2, high_mbps, low_mbps)
    return _from_rate_profile(rates, name or f"square{high_mbps:g}-{low_mbps:g}")


def random_walk_trace(
    mean_mbps: float,
    volatility: float,
    rng: np.random.Generator,
    step_ms: int = 100,
    duration_ms: int = 10_000,
    floor_mbps: float = 0.1,
    name: str = "walk",
) -> Trace:
    """Log-space random walk around ``mean_mbps``, piecewise constant per step."""
    steps = -(-duration_ms // step_ms)
    log_rate = np.zeros(steps)
    for i in range(1, steps):
        log_rate[i] = 0.9 * log_rate[i - 1] + volatility * rng.standard_normal()
    rates = np.maximum(mean_mbps * np.exp(log_rate - log_rate.mean()), floor_mbps)
    return _from_rate_profile(np.repeat(rates, step_ms)[:duration_ms], name)


def correlated_traces(
    base: Trace, count: int, jitter: float, rng: np.random.Generator, name: str = "corr"
) -> list[Trace]:
    """Traces sharing ``base``'s rate shape with small multiplicative jitter.

    Conditions built from one family tend to produce strongly correlated
    utilities across candidates.
    """
    profile = base.opportunities().astype(np.float64) * PACKET_BYTES * 8 / 1e3  # Mbps per slot
    window = 100
    kernel = np.ones(window) / window
    smooth = np.convolve(profile, kernel, mode="same")
    out = []
    for i in range(count):
        scale = math.exp(jitter * rng.standard_normal())
        out.append(_from_rate_profile(smooth * scale, f"{name}{i}"))
    return out


def synthetic_trace_set(rng: np.random.Generator, count: int, duration_ms: int = 10_000) -> list[Trace]:
    """Mixed family of constant, square-wave and random-walk traces."""
    traces = []
    for i in range(count):
        family = i % 3
        mean = float(rng.uniform(1.0, 30.0))
        if family == 0:
            traces.append(constant_trace(mean, duration_ms, name=f"syn{i}-const"))
        elif family == 1:
            low = float(rng.uniform(0.1, 0.9)) * mean
            period = int(rng.choice([500, 1000, 2000, 4000]))
            traces.append(square_wave_trace(mean, low, period, duration_ms, name=f"syn{i}-square"))
        else:
            traces.append(random_walk_trace(mean, float(rng.uniform(0.05, 0.5)), rng, duration_ms=duration_ms, name=f"syn{i}-walk"))
    return traces
