"""Full and subset evaluation of candidate populations, ranking and recall."""

from __future__ import annotations

import csv
import enum
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np

from .gaussian_select import GaussianModel, MeanEstimator, SubsetSelection, fit_gaussian, greedy_select, selection_trajectory
from .seeding import derive_seed, rng_for
from .utility import Measurement, UtilityConfig, UtilityMatrix, compute_utility


class BackendError(RuntimeError):
    """A single measurement failed; the candidate is treated as invalid."""


class EvalBackend(Protocol):
    deterministic: bool
    parallel_safe: bool

    def measure(self, candidate: Any, condition: Any) -> Measurement: ...

    def baseline(self, condition: Any) -> Measurement: ...


def candidate_key(candidate: Any) -> str:
    if isinstance(candidate, str):
        return candidate
    cid = getattr(candidate, "id", None)
    if isinstance(cid, str):
        return cid
    label = getattr(candidate, "label", None)
    if callable(label):
        return label()
    return str(candidate)


def condition_key(condition: Any) -> str:
    if isinstance(condition, str):
        return condition
    cid = getattr(condition, "id", None)
    if isinstance(cid, str):
        return cid
    return str(condition)


class Selector(str, enum.Enum):
    GREEDY = "greedy"
    RANDOM = "random"
    BWVAR = "bwvar"


@dataclass(frozen=True)
class ExperimentPlan:
    L: int
    K: int
    R: int
    top_n: int = 10
    seed: int = 0
    selector: Selector = Selector.GREEDY

    def __post_init__(self):
        object.__setattr__(self, "selector", Selector(self.selector))
        if self.L < 2 or self.K < 1 or self.R < 1 or self.top_n < 1:
            raise ValueError("L must be >= 2 and K, R, top_n >= 1")
        if self.top_n > self.R:
            raise ValueError(f"top_n={self.top_n} exceeds R={self.R}")

    def check(self, N: int, M: int) -> None:
        if self.L >= N:
            raise ValueError(f"pilot size L={self.L} must be below N={N}")
        if self.K > M:
            raise ValueError(f"K={self.K} exceeds the number of conditions M={M}")
        if self.top_n > N - self.L:
            raise ValueError(f"top_n={self.top_n} exceeds the {N - self.L} remaining candidates")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selector"] = self.selector.value
        return d


# --- evaluation ---------------------------------------------------------------


def _baseline_list(backend: EvalBackend, conditions: Sequence[Any], baselines: Mapping[str, Measurement] | None) -> list[Measurement]:
    out = []
    for c in conditions:
        key = condition_key(c)
        if baselines is not None:
            if key not in baselines:
                raise ValueError(f"no baseline for condition {key!r}")
            out.append(baselines[key])
        else:
            out.append(backend.baseline(c))
    return out


def evaluate_cells(
    backend: EvalBackend,
    candidates: Sequence[Any],
    conditions: Sequence[Any],
    columns: Sequence[int] | None = None,
    baselines: Mapping[str, Measurement] | None = None,
    cfg: UtilityConfig = UtilityConfig(),
    jobs: int = 1,
) -> UtilityMatrix:
    """Utilities of every candidate on the given columns (all by default).

    A row with any failed cell is fully masked. Unrequested columns stay
    unobserved.
    """
    cols = list(range(len(conditions))) if columns is None else list(columns)
    base = _baseline_list(backend, [conditions[j] for j in cols], baselines)
    ids = [candidate_key(c) for c in candidates]
    values = np.full((len(candidates), len(conditions)), np.nan)
    mask = np.zeros(values.shape, dtype=bool)

    def row(i: int) -> np.ndarray | None:
        out = np.empty(len(cols))
        try:
            for k, j in enumerate(cols):
                out[k] = compute_utility(backend.measure(candidates[i], conditions[j]), base[k], cfg)
        except BackendError:
            return None
        if not np.all(np.isfinite(out)):
            return None
        return out

    if jobs > 1 and getattr(backend, "parallel_safe", False):
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(row, range(len(candidates))))
    else:
        rows = [row(i) for i in range(len(candidates))]
    for i, r in enumerate(rows):
        if r is not None:
            values[i, cols] = r
            mask[i, cols] = True
    return UtilityMatrix(ids, [condition_key(c) for c in conditions], values, mask)


def evaluate_full(
    backend: EvalBackend,
    candidates: Sequence[Any],
    conditions: Sequence[Any],
    baselines: Mapping[str, Measurement] | None = None,
    cfg: UtilityConfig = UtilityConfig(),
    jobs: int = 1,
) -> UtilityMatrix:
    return evaluate_cells(backend, candidates, conditions, None, baselines, cfg, jobs)


# --- baseline selectors -------------------------------------------------------


def select_baseline_random(M: int, K: int, seed: int) -> list[int]:
    if not 0 <= K <= M:
        raise ValueError(f"cannot choose K={K} of M={M} conditions")
    rng = np.random.default_rng(derive_seed(seed, "random-subset"))
    return sorted(int(j) for j in rng.choice(M, size=K, replace=False))


def bandwidth_variance(condition: Any) -> float:
    series = condition.bandwidth_series() if hasattr(condition, "bandwidth_series") else condition
    series = np.asarray(series, dtype=np.float64)
    if series.size == 0:
        raise ValueError(f"condition {condition_key(condition)!r} has an empty bandwidth series")
    trace = getattr(condition, "trace", None)
    if trace is not None and getattr(trace, "packets", 1) == 0:
        raise ValueError(f"condition {condition_key(condition)!r} has an empty trace")
    return float(np.var(series))


def select_baseline_bwvar(conditions: Sequence[Any], K: int) -> list[int]:
    """Indices of the K conditions with the largest bandwidth variance, highest first."""
    if not 0 <= K <= len(conditions):
        raise ValueError(f"cannot choose K={K} of {len(conditions)} conditions")
    var = np.array([bandwidth_variance(c) for c in conditions])
    order = sorted(range(len(var)), key=lambda j: (-var[j], j))
    return order[:K]


# --- protocol -------------------------------------------------------------------


@dataclass(frozen=True)
class RankedCandidate:
    candidate_id: str
    estimate: float
    observed_cells: int


@dataclass
class ProtocolResult:
    plan: ExperimentPlan
    pilot_ids: list[str]
    remainder_ids: list[str]
    subset: list[int]
    model: GaussianModel
    pilot: UtilityMatrix
    ranking: list[RankedCandidate]
    invalid_ids: list[str] = field(default_factory=list)

    def ranked_ids(self) -> list[str]:
        return [r.candidate_id for r in self.ranking]


def choose_subset(model: GaussianModel, conditions: Sequence[Any], K: int, selector: Selector, seed: int) -> list[int]:
    selector = Selector(selector)
    if selector is Selector.GREEDY:
        return list(greedy_select(model, K).order)
    if selector is Selector.RANDOM:
        return select_baseline_random(model.M, K, seed)
    return select_baseline_bwvar(conditions, K)


def rank_by_estimate(ids: Sequence[str], estimates: Sequence[float], observed: int) -> list[RankedCandidate]:
    order = sorted(range(len(ids)), key=lambda i: (-estimates[i], i))
    return [RankedCandidate(ids[i], float(estimates[i]), observed) for i in order]


def run_efficient_protocol(
    backend: EvalBackend,
    candidates: Sequence[Any],
    conditions: Sequence[Any],
    plan: ExperimentPlan,
    baselines: Mapping[str, Measurement] | None = None,
    cfg: UtilityConfig = UtilityConfig(),
    jobs: int = 1,
) -> ProtocolResult:
    """Pilot, fit, select, evaluate the remainder on the subset, rank the remainder."""
    N, M = len(candidates), len(conditions)
    plan.check(N, M)
    if baselines is None:
        baselines = {condition_key(c): backend.baseline(c) for c in conditions}
    rng = rng_for(plan.seed, "pilot")
    pilot_idx = sorted(int(i) for i in rng.choice(N, size=plan.L, replace=False))
    chosen = set(pilot_idx)
    rest_idx = [i for i in range(N) if i not in chosen]

    pilot = evaluate_full(backend, [candidates[i] for i in pilot_idx], conditions, baselines, cfg, jobs)
    model = fit_gaussian(pilot.complete_rows())
    S = choose_subset(model, conditions, plan.K, plan.selector, derive_seed(plan.seed, "selector"))

    rest = evaluate_cells(backend, [candidates[i] for i in rest_idx], conditions, S, baselines, cfg, jobs)
    valid = rest.mask[:, S].all(axis=1) if S else np.ones(len(rest_idx), dtype=bool)
    est = MeanEstimator(model, S).many(rest.values[np.ix_(np.flatnonzero(valid), S)])
    valid_ids = [rest.algorithms[i] for i in np.flatnonzero(valid)]
    return ProtocolResult(
        plan=plan,
        pilot_ids=list(pilot.algorithms),
        remainder_ids=list(rest.algorithms),
        subset=S,
        model=model,
        pilot=pilot,
        ranking=rank_by_estimate(valid_ids, list(est), len(S)),
        invalid_ids=[rest.algorithms[i] for i in np.flatnonzero(~valid)],
    )


# --- recall and savings -------------------------------------------------------


def recall_at(estimated_ranking: Sequence[str], true_ranking: Sequence[str], top_n: int, R: int) -> float:
    if top_n <= 0:
        raise ValueError("top_n must be positive")
    truth = set(true_ranking[:top_n])
    return len(truth & set(estimated_ranking[:R])) / top_n


def true_ranking(ground_truth: UtilityMatrix, ids: Sequence[str]) -> list[str]:
    """Ids ordered by exact mean utility over all conditions (ties keep input order)."""
    row = {a: i for i, a in enumerate(ground_truth.algorithms)}
    means = [ground_truth.row_average(row[c]) for c in ids]
    order = sorted(range(len(ids)), key=lambda i: (-means[i], i))
    return [ids[i] for i in order]


def eval_savings(M: int, N: int, L: int, K: int, R: int) -> float:
    """Fraction of the M*N full-evaluation budget saved by the subset protocol."""
    return 1.0 - (L * M + (N - L) * K + M * R) / (M * N)


def evaluations_used(M: int, N: int, L: int, K: int, R: int) -> int:
    return L * M + (N - L) * K + M * R


@dataclass
class RecallReport:
    plan: ExperimentPlan
    K: int
    recall: list[tuple[int, float]]
    savings: float
    evaluations_used: int

    @property
    def recall_at_r(self) -> dict[int, float]:
        return dict(self.recall)

    def to_dict(self) -> dict:
        return {
            "plan": self.plan.to_dict(),
            "selector": self.plan.selector.value,
            "K": self.K,
            "recall": [{"R": r, "value": v} for r, v in self.recall],
            "savings": self.savings,
            "evaluations_used": self.evaluations_used,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def recall_report(result: ProtocolResult, ground_truth: UtilityMatrix, M: int, N: int, R_max: int | None = None) -> RecallReport:
    plan = result.plan
    R_max = plan.R if R_max is None else R_max
    truth = true_ranking(ground_truth, [c for c in result.remainder_ids if c not in set(result.invalid_ids)])
    est = result.ranked_ids()
    curve = [(r, recall_at(est, truth, plan.top_n, r)) for r in range(plan.top_n, R_max + 1)]
    return RecallReport(
        plan=plan,
        K=len(result.subset),
        recall=curve,
        savings=eval_savings(M, N, plan.L, plan.K, plan.R),
        evaluations_used=evaluations_used(M, N, plan.L, plan.K, plan.R),
    )


def ranking_csv(ranking: Sequence[RankedCandidate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "candidate_id", "estimate", "observed_cells"])
    for i, r in enumerate(ranking, start=1):
        w.writerow([i, r.candidate_id, repr(r.estimate), r.observed_cells])
    return buf.getvalue()


def read_ranking_csv(text: str) -> list[RankedCandidate]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [RankedCandidate(r["candidate_id"], float(r["estimate"]), int(r["observed_cells"])) for r in rows]


def selection_report(model: GaussianModel, order: Sequence[int], selector: Selector, conditions: Sequence[str] | None = None) -> dict:
    order = [int(j) for j in order]
    traj = selection_trajectory(model, order) if order else []
    report = SubsetSelection(order, traj, Selector(selector).value).to_dict()
    report.update({"selector": Selector(selector).value, "K": len(order), "M": model.M})
    if conditions is not None:
        report["condition_ids"] = [conditions[j] for j in order]
    report["cond_var_empty"] = float(model.row_sums.sum() / model.M**2)
    return report


def write_text_atomic(path: str | Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
