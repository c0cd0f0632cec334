"""Network-condition grids: traces x queue multipliers, plus manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fluid import NetworkCondition
from .trace import Trace, load_trace, random_walk_trace, square_wave_trace

QUEUE_MULTIPLIERS = (1.0, 0.5)
DEFAULT_RTT_MS = 100.0


@dataclass(frozen=True)
class DatasetInfo:
    traces: int
    avg_mbps: float
    bdp_bytes: int


# trace count, average bandwidth and BDP at 100 ms RTT per dataset
DATASETS: dict[str, DatasetInfo] = {
    "FCC": DatasetInfo(85, 1.3, 16_000),
    "Starlink": DatasetInfo(19, 1.9, 24_000),
    "FourG": DatasetInfo(50, 18.1, 230_000),
    "FiveG": DatasetInfo(50, 31.7, 400_000),
}
STARLINK_SCALE = 1 / 8


def bdp_bytes(avg_mbps: float, rtt_ms: float = DEFAULT_RTT_MS) -> float:
    return avg_mbps * 1e6 / 8 * rtt_ms / 1000.0


@dataclass
class DatasetSpec:
    tag: str
    traces: list[Trace]
    bdp_bytes: float | None = None  # None: from the mean trace bandwidth
    scale: float = 1.0
    trace_paths: list[str | None] = field(default_factory=list)


def build_condition_grid(
    datasets: Sequence[DatasetSpec],
    rtt_ms: float = DEFAULT_RTT_MS,
    multipliers: Sequence[float] = QUEUE_MULTIPLIERS,
) -> list[NetworkCondition]:
    """Cross every (scaled) trace with every queue multiplier of its dataset BDP."""
    grid = []
    for ds in datasets:
        traces = [tr.scaled(ds.scale) if ds.scale != 1.0 else tr for tr in ds.traces]
        if ds.bdp_bytes is not None:
            bdp = float(ds.bdp_bytes)
        else:
            bdp = bdp_bytes(float(np.mean([tr.avg_mbps for tr in traces])), rtt_ms) if traces else 0.0
        paths = list(ds.trace_paths) + [None] * (len(traces) - len(ds.trace_paths))
        for tr, path in zip(traces, paths):
            for mult in multipliers:
                grid.append(
                    NetworkCondition(
                        trace=tr,
                        rtt_ms=rtt_ms,
                        queue_bytes=int(round(mult * bdp)),
                        dataset_tag=ds.tag,
                        condition_id=f"{ds.tag}/{tr.name}/q{mult:g}",
                        trace_path=path,
                    )
                )
    return grid


def reference_datasets(rng: np.random.Generator, duration_ms: int = 10_000, counts: dict[str, int] | None = None) -> list[DatasetSpec]:
    """Synthetic stand-ins with the per-dataset trace counts and bandwidths of the evaluation setup.

    Starlink traces are generated at eight times the target rate and thinned
    back down by the dataset scale, as for the measured traces.
    """
    specs = []
    for tag, info in DATASETS.items():
        n = info.traces if counts is None else counts.get(tag, 0)
        scale = STARLINK_SCALE if tag == "Starlink" else 1.0
        traces = []
        for i in range(n):
            mean = info.avg_mbps / scale
            if tag == "FCC":
                tr = random_walk_trace(mean, 0.1, rng, step_ms=500, duration_ms=duration_ms, name=f"fcc{i}")
            elif tag == "Starlink":
                tr = square_wave_trace(mean * 1.6, mean * 0.4, int(rng.choice([1000, 2000, 5000])), duration_ms, name=f"starlink{i}")
            else:
                tr = random_walk_trace(mean, 0.35, rng, step_ms=100, duration_ms=duration_ms, name=f"{tag.lower()}{i}")
            traces.append(tr)
        specs.append(DatasetSpec(tag, traces, bdp_bytes=info.bdp_bytes, scale=scale))
    return specs


def write_manifest(conditions: Sequence[NetworkCondition], path: str | Path) -> None:
    Path(path).write_text(json.dumps([c.to_manifest() for c in conditions], indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> list[NetworkCondition]:
    path = Path(path)
    entries = json.loads(path.read_text(encoding="utf-8"))
    conditions = []
    for e in entries:
        trace_path = Path(e["trace_path"])
        if not trace_path.is_absolute():
            trace_path = path.parent / trace_path
        conditions.append(
            NetworkCondition(
                trace=load_trace(trace_path),
                rtt_ms=float(e.get("rtt_ms", DEFAULT_RTT_MS)),
                queue_bytes=int(e["queue_bytes"]),
                dataset_tag=e.get("dataset_tag", "Synthetic"),
                condition_id=e["id"],
                trace_path=e["trace_path"],
            )
        )
    return conditions
