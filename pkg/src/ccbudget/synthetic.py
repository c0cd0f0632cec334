"""Synthetic utility models with planted structure for selection experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian_select import GaussianModel


@dataclass(frozen=True)
class PlantedSpec:
    M: int = 408
    blocks: int = 24
    high_variance: int = 2
    rho_max: float = 0.94
    rho_min: float = 0.6
    base_sd: float = 0.05
    high_sd: float = 0.4
    mean_sd: float = 0.03


@dataclass(frozen=True)
class PlantedModel:
    model: GaussianModel
    block_of: np.ndarray  # block label per column, -1 for the high-variance columns
    high_columns: tuple[int, ...]


def planted_model(rng: np.random.Generator, spec: PlantedSpec = PlantedSpec()) -> PlantedModel:
    """Block-correlated covariance with a few dominant high-variance columns.

    Columns in one block share a latent factor with within-block correlation
    drawn from [rho_min, rho_max]; a weak global factor links blocks. The
    high-variance columns are independent of everything else.
    """
    M = spec.M
    high = tuple(int(j) for j in sorted(rng.choice(M, size=spec.high_variance, replace=False)))
    rest = [j for j in range(M) if j not in set(high)]
    labels = np.full(M, -1)
    cuts = np.sort(rng.choice(np.arange(1, len(rest)), size=spec.blocks - 1, replace=False))
    for b, chunk in enumerate(np.split(np.array(rest), cuts)):
        labels[chunk] = b

    sd = spec.base_sd * np.exp(0.3 * rng.standard_normal(M))
    sd[list(high)] = spec.high_sd
    loadings = np.zeros((M, spec.blocks + 1))
    idio = np.ones(M)
    for b in range(spec.blocks):
        cols = np.flatnonzero(labels == b)
        rho = rng.uniform(spec.rho_min, spec.rho_max)
        # global factor share keeps blocks mildly correlated
        g = 0.3
        loadings[cols, b] = np.sqrt(rho * (1 - g))
        loadings[cols, -1] = np.sqrt(rho * g)
        idio[cols] = 1 - rho
    corr = loadings @ loadings.T + np.diag(idio)
    corr[list(high), :] = 0.0
    corr[:, list(high)] = 0.0
    corr[list(high), list(high)] = 1.0
    sigma = corr * np.outer(sd, sd)
    sigma = (sigma + sigma.T) / 2
    mu = spec.mean_sd * rng.standard_normal(M)
    return PlantedModel(GaussianModel(mu, sigma, 0.0), labels, high)


@dataclass(frozen=True)
class SeriesCondition:
    """A named condition that only carries a per-second bandwidth series."""

    id: str
    series: tuple[float, ...]

    def bandwidth_series(self) -> np.ndarray:
        return np.asarray(self.series, dtype=np.float64)


def planted_conditions(planted: PlantedModel, rng: np.random.Generator, seconds: int = 30) -> list[SeriesCondition]:
    """Bandwidth series for each model column, one volatility level per block.

    The volatility is drawn independently of the utility covariance, so
    bandwidth variance is an uninformed proxy for utility variance.
    """
    labels = planted.block_of
    vol = {b: float(rng.uniform(0.05, 0.8)) for b in np.unique(labels)}
    out = []
    for j, b in enumerate(labels):
        mean = float(rng.uniform(1.0, 40.0))
        steps = vol[b] * rng.standard_normal(seconds)
        series = mean * np.exp(np.cumsum(steps) * 0.5)
        out.append(SeriesCondition(f"c{j}", tuple(float(x) for x in series)))
    return out
