"""Utility of a candidate relative to the default controller.

A utility is the relative throughput gain minus a weighted relative latency
change, measured on the same network condition as the baseline.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class DegenerateBaseline(ValueError):
    pass


class MissingCells(ValueError):
    pass


@dataclass(frozen=True)
class Measurement:
    """Throughput in Mbps and latency in ms for one (candidate, condition)."""

    tput: float
    lat: float

    def to_dict(self) -> dict:
        return {"tput": self.tput, "lat": self.lat}


@dataclass(frozen=True)
class UtilityConfig:
    lam: float = 10.0

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")


def compute_utility(m: Measurement, baseline: Measurement, cfg: UtilityConfig = UtilityConfig()) -> float:
    if not (baseline.tput > 0 and baseline.lat > 0):
        raise DegenerateBaseline(f"baseline must be positive, got {baseline}")
    return (m.tput - baseline.tput) / baseline.tput - cfg.lam * (m.lat - baseline.lat) / baseline.lat


def average_utility(values: Sequence[float], mask: Sequence[bool] | None = None) -> float:
    values = np.asarray(values, dtype=np.float64)
    if mask is not None and not np.all(np.asarray(mask, dtype=bool)):
        raise MissingCells("row has unobserved cells")
    if values.size == 0:
        raise MissingCells("empty row")
    return float(np.sum(values) / values.size)


@dataclass
class UtilityMatrix:
    """Dense algorithms x conditions grid with a presence mask.

    Cells whose mask is False hold NaN and are never read by aggregates.
    """

    algorithms: list[str]
    conditions: list[str]
    values: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mask is None:
            self.mask = ~np.isnan(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        shape = (len(self.algorithms), len(self.conditions))
        if self.values.shape != shape or self.mask.shape != shape:
            raise ValueError(f"grid shape {self.values.shape} does not match ids {shape}")
        if len(set(self.algorithms)) != len(self.algorithms):
            raise ValueError("duplicate algorithm ids")
        if len(set(self.conditions)) != len(self.conditions):
            raise ValueError("duplicate condition ids")
        self.values = np.where(self.mask, self.values, np.nan)

    @classmethod
    def empty(cls, algorithms: Sequence[str], conditions: Sequence[str]) -> "UtilityMatrix":
        shape = (len(algorithms), len(conditions))
        return cls(list(algorithms), list(conditions), np.full(shape, np.nan), np.zeros(shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def fully_observed(self) -> bool:
        return bool(self.mask.all())

    def row_average(self, i: int) -> float:
        return average_utility(self.values[i], self.mask[i])

    def complete_rows(self) -> "UtilityMatrix":
        keep = self.mask.all(axis=1)
        return self.take_rows(np.flatnonzero(keep))

    def take_rows(self, rows: Sequence[int]) -> "UtilityMatrix":
        rows = list(rows)
        return UtilityMatrix(
            [self.algorithms[i] for i in rows],
            list(self.conditions),
            self.values[rows],
            self.mask[rows],
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["alg_id", *self.conditions])
        for i, alg in enumerate(self.algorithms):
            cells = [repr(float(v)) if ok else "" for v, ok in zip(self.values[i], self.mask[i])]
            writer.writerow([alg, *cells])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str) -> "UtilityMatrix":
        reader = csv.reader(io.StringIO(text))
        rows = [r for r in reader if r]
        if not rows or rows[0][0] != "alg_id":
            raise ValueError("utility CSV must start with an 'alg_id' header")
        conditions = rows[0][1:]
        algorithms, values = [], []
        for lineno, r in enumerate(rows[1:], start=2):
            if len(r) != len(conditions) + 1:
                raise ValueError(f"line {lineno}: expected {len(conditions) + 1} fields, got {len(r)}")
            algorithms.append(r[0])
            values.append([float(c) if c.strip() else np.nan for c in r[1:]])
        arr = np.array(values, dtype=np.float64).reshape(len(algorithms), len(conditions))
        return cls(algorithms, conditions, arr)

    @classmethod
    def read_csv(cls, path: str | Path) -> "UtilityMatrix":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))
