"""Gaussian model over per-condition utilities and condition-subset selection.

Utilities of a random candidate on the M conditions are modelled as a
multivariate normal N(mu, sigma). Observing a subset S of conditions shrinks
the uncertainty of the mean utility to

    Var(mean | u_S) = 1' sigma_{U|S} 1 / M**2

where sigma_{U|S} is the Schur complement of sigma_SS. ``greedy_select``
grows S one condition at a time to minimize that quantity, and
``estimate_mean_utility`` turns a partial observation into the
conditional-expectation estimate of the full mean.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .utility import UtilityMatrix

DEFAULT_RIDGE_SCALE = 1e-8
# relative slack under which two objective values count as a tie
TIE_RTOL = 1e-12
MAX_RIDGE_ESCALATIONS = 30


class TooFewRows(ValueError):
    pass


class SingularBlock(LinAlgError):
    pass


class TooLarge(ValueError):
    pass


@dataclass(frozen=True)
class GaussianModel:
    mu: np.ndarray
    sigma: np.ndarray
    ridge: float = 0.0

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.shape != (mu.size, mu.size):
            raise ValueError(f"sigma shape {sigma.shape} incompatible with mu of length {mu.size}")
        scale = max(float(np.max(np.abs(sigma))) if sigma.size else 0.0, np.finfo(float).tiny)
        if np.max(np.abs(sigma - sigma.T), initial=0.0) > 1e-12 * scale:
            raise ValueError("sigma is not symmetric")
        mu.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def M(self) -> int:
        return self.mu.size

    @property
    def row_sums(self) -> np.ndarray:
        return self.sigma.sum(axis=1)

    def scale_reference(self) -> float:
        """Unconditional variance of the mean; the natural tolerance scale."""
        return float(self.sigma.sum()) / self.M**2

    def to_json(self) -> str:
        return json.dumps(
            {
                "M": self.M,
                "mu": [float(x) for x in self.mu],
                "sigma": [float(x) for x in self.sigma.reshape(-1)],
                "ridge": float(self.ridge),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "GaussianModel":
        d = json.loads(text)
        m = int(d["M"])
        return cls(np.array(d["mu"], dtype=np.float64), np.array(d["sigma"], dtype=np.float64).reshape(m, m), float(d["ridge"]))


@dataclass(frozen=True)
class ConditionalMoments:
    observed: tuple[int, ...]
    unobserved: tuple[int, ...]
    mu_cond: np.ndarray
    sigma_cond: np.ndarray


@dataclass
class SubsetSelection:
    order: list[int]
    cond_var_trajectory: list[float]
    method: str = "greedy"

    def to_dict(self) -> dict:
        return {"order": list(self.order), "trajectory": list(self.cond_var_trajectory), "method": self.method}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "SubsetSelection":
        return cls([int(i) for i in d["order"]], [float(v) for v in d["trajectory"]], d.get("method", "greedy"))


def _is_pd(a: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return False
    return True


def fit_gaussian(pilot: UtilityMatrix | np.ndarray, ridge_scale: float = DEFAULT_RIDGE_SCALE) -> GaussianModel:
    """Fit mean and sample covariance (denominator L-1) from a complete pilot grid.

    A ridge ``ridge_scale * trace/M`` is added to the diagonal and raised by
    factors of ten until the matrix admits a Cholesky factorization.
    """
    if isinstance(pilot, UtilityMatrix):
        if not pilot.fully_observed():
            raise ValueError("pilot matrix has unobserved cells")
        values = pilot.values
    else:
        values = np.asarray(pilot, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] < 2:
        raise TooFewRows(f"need at least 2 pilot rows, got {values.shape[0] if values.ndim == 2 else values.ndim}")
    if not np.all(np.isfinite(values)):
        raise ValueError("pilot grid contains non-finite values")
    L, M = values.shape
    mu = values.mean(axis=0)
    centered = values - mu
    sigma = centered.T @ centered / (L - 1)
    sigma = (sigma + sigma.T) / 2
    base = ridge_scale * float(np.trace(sigma)) / M
    if base <= 0:
        # all-constant pilot: no variance scale to be relative to
        base = ridge_scale
    eps = base
    for _ in range(MAX_RIDGE_ESCALATIONS):
        candidate = sigma + eps * np.eye(M)
        if _is_pd(candidate):
            return GaussianModel(mu, candidate, eps)
        eps *= 10.0
    raise SingularBlock("covariance could not be regularized to positive definite")


def _block_solver(model: GaussianModel, idx: Sequence[int]) -> Callable[[np.ndarray], np.ndarray]:
    """Solver for sigma_SS x = b.

    A singular but PSD block falls back to the pseudo-inverse, which gives the
    exact generalized Schur complement (c_S lies in the block's range for PSD
    sigma). A block with a clearly negative eigenvalue raises SingularBlock.
    """
    block = model.sigma[np.ix_(idx, idx)]
    try:
        factor = cho_factor(block, lower=True, check_finite=False)
    except LinAlgError:
        pass
    else:
        return lambda b: cho_solve(factor, b, check_finite=False)
    w, v = np.linalg.eigh((block + block.T) / 2)
    tol = len(idx) * np.finfo(float).eps * max(float(np.abs(w).max(initial=0.0)), model.ridge)
    if w.min(initial=0.0) < -max(tol, DEFAULT_RIDGE_SCALE * float(np.trace(np.abs(block))) / len(idx)):
        raise SingularBlock(f"observed block of size {len(idx)} is not positive semidefinite")
    inv_w = np.where(w > tol, 1.0 / np.where(w > tol, w, 1.0), 0.0)

    def pinv_solve(b: np.ndarray) -> np.ndarray:
        proj = v.T @ b
        return v @ (proj * (inv_w[:, None] if proj.ndim == 2 else inv_w))

    return pinv_solve


def _split(model: GaussianModel, S: Sequence[int]) -> tuple[list[int], list[int]]:
    S = [int(i) for i in S]
    if len(set(S)) != len(S):
        raise ValueError("observed index set has duplicates")
    if any(i < 0 or i >= model.M for i in S):
        raise IndexError(f"observed index out of range [0, {model.M})")
    chosen = set(S)
    return S, [j for j in range(model.M) if j not in chosen]


def conditional_moments(model: GaussianModel, S: Sequence[int], u_S: Sequence[float]) -> ConditionalMoments:
    """Mean and covariance of the unobserved utilities given the observed ones."""
    S, U = _split(model, S)
    u_S = np.asarray(u_S, dtype=np.float64).reshape(-1)
    if not S or len(S) >= model.M:
        raise ValueError("observed set must be nonempty and strictly smaller than M")
    if u_S.size != len(S):
        raise ValueError("u_S must align with S")
    solve = _block_solver(model, S)
    sigma_us = model.sigma[np.ix_(U, S)]
    innovation = u_S - model.mu[S]
    mu_cond = model.mu[U] + sigma_us @ solve(innovation)
    sigma_cond = model.sigma[np.ix_(U, U)] - sigma_us @ solve(sigma_us.T)
    sigma_cond = (sigma_cond + sigma_cond.T) / 2
    return ConditionalMoments(tuple(S), tuple(U), mu_cond, sigma_cond)


def cond_var_of_mean(model: GaussianModel, S: Sequence[int]) -> float:
    """Var(mean | u_S): element sum of the conditional covariance over M**2.

    Observed conditions contribute zero variance.
    """
    S, U = _split(model, S)
    M = model.M
    if not S:
        return float(model.sigma.sum()) / M**2
    if not U:
        return 0.0
    moments = conditional_moments(model, S, model.mu[S])
    return float(moments.sigma_cond.sum()) / M**2


def _argmax_lowest(values: np.ndarray) -> int:
    best = float(np.max(values))
    slack = TIE_RTOL * max(abs(best), np.finfo(float).tiny)
    return int(np.flatnonzero(values >= best - slack)[0])


def _argmin_lowest(values: np.ndarray) -> int:
    return _argmax_lowest(-np.asarray(values))


def greedy_select(model: GaussianModel, K: int, method: str = "incremental") -> SubsetSelection:
    """Pick K conditions, each step minimizing Var(mean | u_S).

    ``method="naive"`` re-evaluates :func:`cond_var_of_mean` for every
    candidate at every step. The default ``"incremental"`` path extends a
    Cholesky factor of sigma_SS one row at a time and scores all candidates
    at once through the identity

        1' sigma_{U|S} 1 = 1' sigma 1 - c_S' sigma_SS^{-1} c_S,  c = sigma 1.

    Both paths pick the same indices (ties go to the lowest index).
    """
    M = model.M
    if not 1 <= K <= M:
        raise ValueError(f"K must be in [1, M={M}], got {K}")
    if method == "naive":
        return _greedy_naive(model, K)
    if method != "incremental":
        raise ValueError(f"unknown greedy method {method!r}")

    sigma = model.sigma
    c = model.row_sums
    total = float(c.sum())
    diag = np.diag(sigma).copy()
    tiny = np.finfo(float).tiny
    # rows of L^{-1} sigma_{S,:} and L^{-1} c_S, grown one pick at a time
    V = np.zeros((K, M))
    w = np.zeros(K)
    explained = 0.0
    chosen = np.zeros(M, dtype=bool)
    order: list[int] = []
    trajectory = [total / M**2]
    for t in range(K):
        resid = diag - np.einsum("ij,ij->j", V[:t], V[:t])
        resid = np.maximum(resid, tiny)
        proj = c - V[:t].T @ w[:t]
        gain = proj**2 / resid
        gain[chosen] = -np.inf
        k = _argmax_lowest(gain)
        d = math.sqrt(resid[k])
        V[t] = (sigma[k] - V[:t].T @ V[:t, k]) / d
        w[t] = proj[k] / d
        explained += max(float(gain[k]), 0.0)
        chosen[k] = True
        order.append(k)
        remaining = 0.0 if t == M - 1 else max(total - explained, 0.0) / M**2
        trajectory.append(remaining)
    return SubsetSelection(order, trajectory, "greedy")


def _greedy_naive(model: GaussianModel, K: int) -> SubsetSelection:
    S: list[int] = []
    trajectory = [cond_var_of_mean(model, S)]
    for _ in range(K):
        candidates = [k for k in range(model.M) if k not in S]
        scores = np.array([cond_var_of_mean(model, S + [k]) for k in candidates])
        S.append(candidates[_argmin_lowest(scores)])
        trajectory.append(float(scores.min()))
    return SubsetSelection(S, trajectory, "greedy")


def first_pick_closed_form(model: GaussianModel) -> int:
    """argmax_k (Var(u_k) + sum_{j != k} Cov(u_j, u_k))**2 / Var(u_k)."""
    var = np.diag(model.sigma)
    score = model.row_sums**2 / np.maximum(var, np.finfo(float).tiny)
    return _argmax_lowest(score)


@dataclass
class ExhaustiveResult:
    subset: tuple[int, ...]
    cond_var: float
    evaluated: int = field(default=0)


def exhaustive_select(model: GaussianModel, K: int, limit: int = 10**6) -> ExhaustiveResult:
    """Brute-force minimizer of Var(mean | u_S) over all K-subsets (test oracle)."""
    M = model.M
    if not 0 <= K <= M:
        raise ValueError(f"K must be in [0, M={M}]")
    count = math.comb(M, K)
    if count > limit:
        raise TooLarge(f"C({M},{K}) = {count} subsets exceeds limit {limit}")
    best: tuple[int, ...] = ()
    best_val = math.inf
    for subset in itertools.combinations(range(M), K):
        val = cond_var_of_mean(model, subset)
        if val < best_val - TIE_RTOL * max(abs(best_val), np.finfo(float).tiny) or not best:
            best, best_val = subset, val
    return ExhaustiveResult(best, best_val, count)


def estimate_mean_utility(model: GaussianModel, S: Sequence[int], u_S: Sequence[float]) -> float:
    """Conditional expectation of the mean utility given observations on S."""
    S_list, U = _split(model, S)
    u_S = np.asarray(u_S, dtype=np.float64).reshape(-1)
    if u_S.size != len(S_list):
        raise ValueError("u_S must align with S")
    if not U:
        return float(np.sum(u_S)) / model.M
    if not S_list:
        return float(np.sum(model.mu)) / model.M
    moments = conditional_moments(model, S_list, u_S)
    return (float(np.sum(u_S)) + float(np.sum(moments.mu_cond))) / model.M


class MeanEstimator:
    """Precomputed linear form of :func:`estimate_mean_utility` for a fixed S.

    The estimate is affine in u_S, so ranking many candidates on the same
    subset reduces to one dot product each.
    """

    def __init__(self, model: GaussianModel, S: Sequence[int]):
        S_list, U = _split(model, S)
        self.S = tuple(S_list)
        M = model.M
        if not U:
            self.weights = np.full(len(S_list), 1.0 / M)
            self.offset = 0.0
        elif not S_list:
            self.weights = np.zeros(0)
            self.offset = float(np.sum(model.mu)) / M
        else:
            solve = _block_solver(model, S_list)
            # sum over U of sigma_US sigma_SS^{-1}
            beta = solve(model.sigma[np.ix_(S_list, U)].sum(axis=1))
            self.weights = (1.0 + beta) / M
            self.offset = (float(np.sum(model.mu[U])) - float(beta @ model.mu[S_list])) / M

    def __call__(self, u_S: Sequence[float]) -> float:
        return float(self.offset + self.weights @ np.asarray(u_S, dtype=np.float64))

    def many(self, U_S: np.ndarray) -> np.ndarray:
        return self.offset + np.asarray(U_S, dtype=np.float64) @ self.weights


def selection_trajectory(model: GaussianModel, order: Sequence[int]) -> list[float]:
    """Var(mean | first t picks) for t = 0..len(order), for any pick order."""
    return [cond_var_of_mean(model, list(order[:t])) for t in range(len(order) + 1)]
