"""Tick-based fluid simulation of one flow through a trace-driven bottleneck.

Each tick the sender injects bytes allowed by both its pacing credit and its
congestion-window headroom into a drop-tail queue; the bottleneck drains
the queue at the trace's delivery opportunities for that tick. A byte
leaving the queue reaches the receiver half an RTT later and its ack
returns after the full propagation RTT, so measured RTT is propagation plus
queueing delay. Dropped bytes are reported to the sender one RTT after the
drop and, for finite transfers, are sent again.

All byte counts are integers, so conservation holds exactly:
injected == delivered + dropped + residual queue.
"""

from __future__ import annotations

import enum
import math
import statistics
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..utility import Measurement
from .bbr import MSS, AckSample, BbrModel, BbrParams, CcModel
from .trace import PACKET_BYTES, Trace

REQUEST_BYTES = 512
RESPONSE_BYTES = 4096


class Workload(str, enum.Enum):
    BULK_DOWNLOAD = "bulk"
    REQUEST_RESPONSE = "rr"


@dataclass(frozen=True)
class NetworkCondition:
    trace: Trace
    rtt_ms: float = 100.0
    queue_bytes: int = 100_000
    dataset_tag: str = "Synthetic"
    condition_id: str = ""
    trace_path: str | None = None

    def __post_init__(self):
        if not self.rtt_ms > 0:
            raise ValueError("rtt_ms must be positive")
        if self.queue_bytes < 0:
            raise ValueError("queue_bytes must be non-negative")
        if not self.condition_id:
            object.__setattr__(self, "condition_id", f"{self.trace.name}-q{self.queue_bytes}")

    @property
    def id(self) -> str:
        return self.condition_id

    def bandwidth_series(self) -> np.ndarray:
        return self.trace.bandwidth_series()

    def to_manifest(self) -> dict:
        return {
            "id": self.condition_id,
            "trace_path": self.trace_path,
            "rtt_ms": self.rtt_ms,
            "queue_bytes": self.queue_bytes,
            "dataset_tag": self.dataset_tag,
        }


@dataclass
class SimResult:
    workload: Workload
    duration_ms: int
    injected: int = 0
    delivered: int = 0
    dropped: int = 0
    queued_end: int = 0
    completions_ms: list[float] = field(default_factory=list)

    @property
    def goodput_mbps(self) -> float:
        return self.delivered * 8 / (self.duration_ms / 1000.0) / 1e6

    @property
    def conserved(self) -> bool:
        return self.injected == self.delivered + self.dropped + self.queued_end


@dataclass(frozen=True)
class MeasureConfig:
    bulk_ms: int = 10_000
    rr_ms: int = 30_000
    bulk_runs: int = 3
    tick_ms: int = 1


def simulate(
    condition: NetworkCondition,
    cc: CcModel,
    duration_ms: int,
    workload: Workload = Workload.BULK_DOWNLOAD,
    tick_ms: int = 1,
) -> SimResult:
    if duration_ms < 1000:
        raise ValueError("duration_ms must be at least 1000")
    if tick_ms < 1:
        raise ValueError("tick_ms must be >= 1")
    workload = Workload(workload)
    opp = condition.trace.opportunities()
    period = len(opp)
    cum = np.concatenate([[0], np.cumsum(opp)])
    per_period = int(cum[-1])

    def capacity(t0: int) -> int:
        # delivery opportunities in [t0, t0 + tick_ms), wrapping the trace
        a, b = t0, t0 + tick_ms
        qa, ra = divmod(a, period)
        qb, rb = divmod(b, period)
        return int((qb - qa) * per_period + cum[rb] - cum[ra]) * PACKET_BYTES

    rtt_ticks = max(1, int(round(condition.rtt_ms / tick_ms)))
    half_rtt = condition.rtt_ms / 2
    qcap = int(condition.queue_bytes)
    bulk = workload is Workload.BULK_DOWNLOAD

    res = SimResult(workload, duration_ms)
    # queue entries: [bytes, send_time, delivered_at_send, app_limited]
    queue: deque[list] = deque()
    queued = 0
    acks: deque[tuple] = deque()  # (due_tick, bytes, send_time, delivered_at_send, app_limited)
    losses: deque[tuple[int, int]] = deque()  # (due_tick, bytes)
    inflight = 0
    acked_total = 0
    delivered_total = 0
    credit = 0.0
    # nonzero while samples count as app-limited: delivered-byte mark to clear at
    app_mark = 0

    pending = math.inf if bulk else 0
    request_sent_at = 0.0
    request_arrival = half_rtt  # first request reaches the server after half an RTT
    response_delivered = 0
    transaction_open = False

    tick = 0
    while tick < duration_ms:
        now = float(tick)

        while acks and acks[0][0] <= tick:
            _, nbytes, sent_at, delivered_at_send, app_limited = acks.popleft()
            inflight -= nbytes
            acked_total += nbytes
            if app_mark and acked_total > app_mark:
                app_mark = 0
            interval = max(now - sent_at, float(tick_ms))
            rate = (acked_total - delivered_at_send) / interval
            cc.on_ack(now, AckSample(nbytes, now - sent_at, rate, app_limited, acked_total, delivered_at_send, inflight))
        while losses and losses[0][0] <= tick:
            _, nbytes = losses.popleft()
            inflight -= nbytes
            if not bulk:
                pending += nbytes
            cc.on_loss(now, nbytes, inflight)

        if not bulk and not transaction_open and now >= request_arrival:
            pending += RESPONSE_BYTES
            response_delivered = 0
            transaction_open = True

        rate = cc.pacing_rate()
        credit = min(credit + rate * tick_ms, max(2.0 * MSS, 2.0 * rate * tick_ms))
        headroom = cc.cwnd() - inflight
        allowance = min(int(credit), headroom)
        send = int(min(allowance, pending)) if allowance > 0 else 0
        if send > 0:
            app_limited = app_mark != 0
            credit -= send
            inflight += send
            res.injected += send
            accepted = min(send, max(qcap - queued, 0))
            if accepted:
                queue.append([accepted, now, acked_total, app_limited])
                queued += accepted
            if send > accepted:
                res.dropped += send - accepted
                losses.append((tick + rtt_ticks, send - accepted))
            if not bulk:
                pending -= send
        if not bulk and pending == 0 and cc.cwnd() > inflight:
            app_mark = max(acked_total + inflight, 1)

        budget = capacity(tick)
        while budget > 0 and queue:
            head = queue[0]
            take = min(head[0], budget)
            budget -= take
            head[0] -= take
            queued -= take
            delivered_total += take
            acks.append((tick + rtt_ticks, take, head[1], head[2], head[3]))
            if not bulk and transaction_open:
                response_delivered += take
            if head[0] == 0:
                queue.popleft()
        if not bulk and transaction_open and response_delivered >= RESPONSE_BYTES:
            done = now + tick_ms + half_rtt
            res.completions_ms.append(done - request_sent_at)
            transaction_open = False
            request_sent_at = done
            request_arrival = done + half_rtt

        tick += tick_ms
        if not bulk and pending == 0 and not queue:
            # nothing changes until the next ack, loss or request except pacing credit
            nxt = duration_ms
            if acks:
                nxt = min(nxt, acks[0][0])
            if losses:
                nxt = min(nxt, losses[0][0])
            if not transaction_open:
                nxt = min(nxt, math.ceil(request_arrival))
            nxt = -(-nxt // tick_ms) * tick_ms
            if nxt > tick:
                rate = cc.pacing_rate()
                cap = max(2.0 * MSS, 2.0 * rate * tick_ms)
                for _ in range((nxt - tick) // tick_ms):
                    refilled = min(credit + rate * tick_ms, cap)
                    if refilled == credit:
                        break
                    credit = refilled
                tick = nxt

    res.delivered = delivered_total
    res.queued_end = queued
    return res


def measure(
    condition: NetworkCondition,
    params: BbrParams | Callable[[np.random.Generator], CcModel],
    seed: int = 0,
    config: MeasureConfig = MeasureConfig(),
) -> Measurement:
    """Average goodput over repeated bulk runs and median request latency.

    Bulk run ``r`` uses seed ``seed + r``; the latency run uses ``seed``.
    A run in which no request completes reports ``rr_ms`` as its latency.
    """

    def make(run_seed: int) -> CcModel:
        rng = np.random.default_rng(run_seed)
        if isinstance(params, BbrParams):
            return BbrModel(params, rng)
        return params(rng)

    goodputs = [
        simulate(condition, make(seed + r), config.bulk_ms, Workload.BULK_DOWNLOAD, config.tick_ms).goodput_mbps
        for r in range(config.bulk_runs)
    ]
    rr = simulate(condition, make(seed), config.rr_ms, Workload.REQUEST_RESPONSE, config.tick_ms)
    lat = statistics.median(rr.completions_ms) if rr.completions_ms else float(config.rr_ms)
    return Measurement(float(sum(goodputs) / len(goodputs)), float(lat))
