"""Evaluation backends: the fluid simulator and a Gaussian oracle."""

from __future__ import annotations

import ast
import operator
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Sequence

import numpy as np

from ..gaussian_select import GaussianModel
from ..harness import BackendError, candidate_key, condition_key
from ..patch_engine import SourceTree, variable_initializer
from ..seeding import derive_seed
from ..utility import Measurement
from .bbr import GAIN_UNIT, BbrParams
from .fluid import MeasureConfig, NetworkCondition, measure

# C constant name -> BbrParams field; everything but the window is GAIN_UNIT fixed point
SOURCE_CONSTANTS = {
    "kInitialWindowPackets": ("initial_window_packets", False),
    "kHighGain": ("high_gain", True),
    "kStartupGrowthTarget": ("startup_growth_target", True),
    "kDrainGain": ("drain_gain", True),
    "kCwndGain": ("cwnd_gain", True),
}

_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
}

_INT_SUFFIX = re.compile(r"\b(\d+)(?:[uU][lL]{0,2}|[lL]{1,2}[uU]?)\b")


def eval_constant(expr: str, names: dict[str, int] | None = None) -> Fraction:
    """Exact value of a small C arithmetic initializer (+ - * / and parentheses).

    Division is exact rather than truncating, so ``GAIN_UNIT * 2885 / 1000``
    is the ratio a reader means rather than what integer C would store.
    """
    names = {"GAIN_UNIT": GAIN_UNIT, **(names or {})}
    text = expr.strip().rstrip(";")
    text = _INT_SUFFIX.sub(r"\1", text)
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"cannot evaluate initializer {expr!r}") from exc

    def walk(node: ast.AST) -> Fraction:
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return Fraction(node.value)
        if isinstance(node, ast.Name) and node.id in names:
            return Fraction(names[node.id])
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = walk(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            left, right = walk(node.left), walk(node.right)
            if isinstance(node.op, ast.Div) and right == 0:
                raise ValueError("division by zero in initializer")
            return _BINOPS[type(node.op)](left, right)
        raise ValueError(f"unsupported construct in initializer {expr!r}")

    return walk(tree)


def params_from_tree(tree: SourceTree, fallback: BbrParams = BbrParams()) -> BbrParams:
    """Read the five tunables from a source tree; constants not found keep ``fallback``."""
    values = fallback.to_dict()
    for cname, (fname, fixed_point) in SOURCE_CONSTANTS.items():
        init = variable_initializer(tree, cname)
        if init is None:
            continue
        v = eval_constant(init)
        if fixed_point:
            v = v / GAIN_UNIT
        values[fname] = float(v)
    return BbrParams(**values)


def resolve_params(candidate: Any) -> BbrParams:
    if isinstance(candidate, BbrParams):
        return candidate
    if isinstance(candidate, dict):
        return BbrParams.from_dict(candidate)
    if isinstance(candidate, SourceTree):
        return params_from_tree(candidate)
    params = getattr(candidate, "params", None)
    if isinstance(params, BbrParams):
        return params
    tree = getattr(candidate, "tree", None)
    if isinstance(tree, SourceTree):
        return params_from_tree(tree)
    raise BackendError(f"cannot derive BBR parameters from {type(candidate).__name__}")


@dataclass
class SimulatorBackend:
    """Runs the fluid simulator; deterministic for a fixed seed."""

    config: MeasureConfig = MeasureConfig()
    seed: int = 0
    baseline_params: BbrParams = BbrParams()
    deterministic: bool = True
    parallel_safe: bool = True
    _baselines: dict[str, Measurement] = field(default_factory=dict, repr=False)

    def _run_seed(self, condition: NetworkCondition) -> int:
        # same runs for every candidate on a condition, so baseline noise cancels
        return derive_seed(self.seed, "sim", condition.id) % (2**31)

    def measure(self, candidate: Any, condition: NetworkCondition) -> Measurement:
        try:
            params = resolve_params(candidate)
        except (ValueError, TypeError) as exc:
            raise BackendError(str(exc)) from exc
        return measure(condition, params, self._run_seed(condition), self.config)

    def baseline(self, condition: NetworkCondition) -> Measurement:
        if condition.id not in self._baselines:
            self._baselines[condition.id] = measure(condition, self.baseline_params, self._run_seed(condition), self.config)
        return self._baselines[condition.id]


@dataclass
class GaussianOracleBackend:
    """Candidate utility vectors are seeded draws from a known Gaussian model.

    ``conditions`` names the model's columns in order (default "c0".."c{M-1}").
    Measurements are built so that compute_utility recovers the draw exactly:
    the utility becomes a throughput ratio at baseline latency. Draws at or
    below -1 cannot be a positive throughput, so they become a latency
    increase at baseline throughput instead.
    """

    model: GaussianModel
    seed: int = 0
    conditions: Sequence[str] | None = None
    base: Measurement = Measurement(10.0, 100.0)
    lam: float = 10.0
    deterministic: bool = True
    parallel_safe: bool = True

    def __post_init__(self):
        names = list(self.conditions) if self.conditions is not None else [f"c{j}" for j in range(self.model.M)]
        if len(names) != self.model.M:
            raise ValueError("conditions must name every model column")
        self.conditions = names
        self._index = {name: j for j, name in enumerate(names)}
        self._chol = _psd_factor(np.asarray(self.model.sigma))
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, candidate: Any) -> np.ndarray:
        key = candidate_key(candidate)
        if key not in self._cache:
            rng = np.random.default_rng(derive_seed(self.seed, "oracle", key))
            z = rng.standard_normal(self.model.M)
            self._cache[key] = np.asarray(self.model.mu) + self._chol @ z
        return self._cache[key]

    def column(self, condition: Any) -> int:
        key = condition_key(condition)
        try:
            return self._index[key]
        except KeyError:
            raise BackendError(f"unknown condition {key!r}") from None

    def utility(self, candidate: Any, condition: Any) -> float:
        return float(self.vector(candidate)[self.column(condition)])

    def measure(self, candidate: Any, condition: Any) -> Measurement:
        u = self.utility(candidate, condition)
        t0, l0 = self.base.tput, self.base.lat
        if u > -1:
            return Measurement(t0 + t0 * u, l0)
        if self.lam == 0:
            raise BackendError(f"utility {u} is not representable with lambda = 0")
        return Measurement(t0, l0 - l0 * u / self.lam)

    def baseline(self, condition: Any) -> Measurement:
        return self.base


def _psd_factor(sigma: np.ndarray) -> np.ndarray:
    """A factor F with F F^T = sigma, tolerating singular (e.g. all-zero) matrices."""
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(sigma)
        return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass
class ScriptedBackend:
    """Looks measurements up in a table; missing or callable-raising cells fail."""

    table: dict[tuple[str, str], Measurement | Callable[[], Measurement]]
    baselines: dict[str, Measurement]
    deterministic: bool = True
    parallel_safe: bool = True

    def measure(self, candidate: Any, condition: Any) -> Measurement:
        key = (candidate_key(candidate), condition_key(condition))
        if key not in self.table:
            raise BackendError(f"no measurement for {key}")
        cell = self.table[key]
        return cell() if callable(cell) else cell

    def baseline(self, condition: Any) -> Measurement:
        return self.baselines[condition_key(condition)]


@dataclass
class LineageOracleBackend(GaussianOracleBackend):
    """Oracle whose children inherit their parent's utility vector.

    A candidate with a ``parent_id`` already seen by this backend gets the
    parent's vector plus ``drift`` and ``noise``-scaled correlated noise;
    anything else is a fresh draw as in :class:`GaussianOracleBackend`.
    """

    drift: float = 0.005
    noise: float = 0.3

    def vector(self, candidate: Any) -> np.ndarray:
        key = candidate_key(candidate)
        if key in self._cache:
            return self._cache[key]
        parent = getattr(candidate, "parent_id", None)
        if parent is None or parent not in self._cache:
            return super().vector(candidate)
        rng = np.random.default_rng(derive_seed(self.seed, "lineage", key))
        z = rng.standard_normal(self.model.M)
        self._cache[key] = self._cache[parent] + self.drift + self.noise * (self._chol @ z)
        return self._cache[key]
