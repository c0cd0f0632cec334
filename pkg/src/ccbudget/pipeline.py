"""Generate -> patch -> validate -> evaluate -> select, over several rounds."""

from __future__ import annotations

import enum
import json
import logging
import os
import shutil
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np

from .gaussian_select import GaussianModel, MeanEstimator, fit_gaussian, greedy_select
from .harness import EvalBackend, RankedCandidate, evaluate_cells, ranking_csv
from .patch_engine import (
    SourceTree,
    UpdateBlock,
    apply_patch,
    list_function_definitions,
    locate_function,
    parse_update_blocks,
    rejection_records,
    validate_syntax,
)
from .seeding import rng_for
from .sim.backends import params_from_tree
from .utility import Measurement, UtilityConfig

log = logging.getLogger(__name__)

ENV_ENDPOINT = "CCBUDGET_LLM_ENDPOINT"
ENV_API_KEY = "CCBUDGET_LLM_API_KEY"
ENV_MODEL = "CCBUDGET_LLM_MODEL"


class PipelineError(RuntimeError):
    pass


class GeneratorError(PipelineError):
    pass


class CandidateStatus(str, enum.Enum):
    PARSED = "Parsed"
    REJECTED = "Rejected"
    VALID = "Valid"
    EVALUATED = "Evaluated"


@dataclass
class Candidate:
    id: str
    parent_id: str | None
    blocks: list[UpdateBlock]
    status: CandidateStatus = CandidateStatus.PARSED
    utility_estimate: float | None = None
    reason: str | None = None
    tree: SourceTree | None = field(default=None, repr=False)
    round: int = 0
    observed_cells: int = 0
    confirmed_utility: float | None = None
    rejections: list[dict] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "parent_id": self.parent_id,
            "round": self.round,
            "status": self.status.value,
            "reason": self.reason,
            "utility_estimate": self.utility_estimate,
            "observed_cells": self.observed_cells,
            "confirmed_utility": self.confirmed_utility,
            "blocks": [b.to_dict() for b in self.blocks],
            "rejections": self.rejections,
        }

    @classmethod
    def from_record(cls, d: dict, tree: SourceTree | None = None) -> "Candidate":
        return cls(
            id=d["id"],
            parent_id=d.get("parent_id"),
            blocks=[UpdateBlock.from_dict(b) for b in d.get("blocks", [])],
            status=CandidateStatus(d["status"]),
            utility_estimate=d.get("utility_estimate"),
            reason=d.get("reason"),
            tree=tree,
            round=int(d.get("round", 0)),
            observed_cells=int(d.get("observed_cells", 0)),
            confirmed_utility=d.get("confirmed_utility"),
            rejections=list(d.get("rejections", [])),
        )


class GeneratorContract(Protocol):
    def generate(self, seed_source: SourceTree, parent: Candidate | None, n: int) -> list[str]: ...


# --- generators ---------------------------------------------------------------

# candidate-visible tunables, all in GAIN_UNIT fixed point except the window
_TUNABLES = ("kHighGain", "kStartupGrowthTarget", "kDrainGain", "kCwndGain", "kInitialWindowPackets")
_FIELD_OF = {
    "kHighGain": "high_gain",
    "kStartupGrowthTarget": "startup_growth_target",
    "kDrainGain": "drain_gain",
    "kCwndGain": "cwnd_gain",
    "kInitialWindowPackets": "initial_window_packets",
}
_BBR_STRUCT = "QUIC_CONGESTION_CONTROL_BBR"
_LOSS_FUNCTION = "BbrCongestionControlOnDataLost"


def _fence(header: str, body: str) -> str:
    return f"{header}\n```c\n{body}\n```\n"


@dataclass
class MockGenerator:
    """Deterministic stand-in for a language model.

    Each response perturbs one or two of the five tunables of its parent
    (or of the seed source). A share of responses also add a loss counter
    to the controller state, and a share are deliberately malformed.
    """

    seed: int = 0
    malformed_rate: float = 0.1
    structural_rate: float = 0.15
    step: float = 0.15

    def generate(self, seed_source: SourceTree, parent: Candidate | None, n: int) -> list[str]:
        tree = parent.tree if parent is not None and parent.tree is not None else seed_source
        rng = rng_for(self.seed, "mock", parent.id if parent is not None else "root")
        base = params_from_tree(tree).to_dict()
        return [self._one(tree, base, rng, k) for k in range(n)]

    def _one(self, tree: SourceTree, base: dict, rng: np.random.Generator, k: int) -> str:
        r = float(rng.random())
        if r < self.malformed_rate:
            return self._malformed(rng, k)
        parts = ["Proposed changes follow.\n"]
        count = 1 + int(rng.random() < 0.5)
        for name in sorted(rng.choice(_TUNABLES, size=count, replace=False)):
            parts.append(_fence(f"UPDATE VARIABLE `{name}`:", self._constant(name, base[_FIELD_OF[name]], rng)))
        if r < self.malformed_rate + self.structural_rate:
            parts.extend(self._loss_counter(tree))
        return "\n".join(parts)

    def _constant(self, name: str, value: float, rng: np.random.Generator) -> str:
        new = value * float(np.exp(self.step * rng.standard_normal()))
        if name == "kInitialWindowPackets":
            return f"const uint32_t {name} = {max(2, int(round(new)))};"
        return f"const uint32_t {name} = GAIN_UNIT * {max(1, int(round(new * 1000)))} / 1000;"

    def _loss_counter(self, tree: SourceTree) -> list[str]:
        if any("TotalLostBytes" in text for text in tree.files.values()):
            return []
        for text in tree.files.values():
            try:
                start, end = locate_function(text, _LOSS_FUNCTION)
            except Exception:
                continue
            func = text[start:end]
            brace = func.index("{")
            body = func[: brace + 1] + "\n    Bbr->TotalLostBytes += LossEvent->NumRetransmittableBytes;" + func[brace + 1 :]
            return [
                _fence(f"ADD MEMBER TO `{_BBR_STRUCT}`:", "// bytes declared lost over the connection\nuint64_t TotalLostBytes;"),
                _fence(f"UPDATE FUNCTION `{_LOSS_FUNCTION}`:", body),
            ]
        return []

    def _malformed(self, rng: np.random.Generator, k: int) -> str:
        flavor = k % 3
        if flavor == 0:
            # fence never closed
            return "UPDATE VARIABLE `kCwndGain`:\n```c\nconst uint32_t kCwndGain = GAIN_UNIT * 3;\n"
        if flavor == 1:
            return "UPDATE FUNCTION `BbrCongestionControlOnDataLost`:\n```c\nvoid BbrCongestionControlOnDataLost(int x) {\n    if (x) {\n```\n"
        return "I would raise the gains, but here is no code."


@dataclass
class ScriptedGenerator:
    """Replays fixed responses, cycling per parent so lineage tests stay simple."""

    responses: Sequence[str]

    def generate(self, seed_source: SourceTree, parent: Candidate | None, n: int) -> list[str]:
        return [self.responses[k % len(self.responses)] for k in range(n)]


DEFAULT_PROMPT = """You are improving the BBR congestion controller below.
Return only the pieces that change, each as one block in this exact format:

UPDATE FUNCTION `Name`:
```c
<complete new definition of the function>
```
UPDATE VARIABLE `Name`:
```c
<complete new definition statement>
```
ADD MEMBER TO `StructName`:
```c
<new member lines>
```

Aim for higher throughput without extra delay across varied links.

{source}
"""


@dataclass
class HttpGenerator:
    """Calls a chat-completions style HTTP endpoint; never used by the tests."""

    endpoint: str | None = None
    api_key: str | None = None
    model: str | None = None
    prompt_template: str = DEFAULT_PROMPT
    temperature: float = 1.0
    timeout_s: float = 120.0

    def __post_init__(self):
        self.endpoint = self.endpoint or os.environ.get(ENV_ENDPOINT)
        self.api_key = self.api_key or os.environ.get(ENV_API_KEY)
        self.model = self.model or os.environ.get(ENV_MODEL, "default")
        if not self.endpoint:
            raise GeneratorError(f"no LLM endpoint configured (set {ENV_ENDPOINT})")

    def probe(self) -> None:
        """Fail early and cleanly when the endpoint cannot be reached."""
        self._post({"model": self.model, "messages": [{"role": "user", "content": "ping"}], "max_tokens": 1})

    def _post(self, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, json.dumps(payload).encode("utf-8"), headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise GeneratorError(f"LLM endpoint {self.endpoint} failed: {exc}") from exc

    def generate(self, seed_source: SourceTree, parent: Candidate | None, n: int) -> list[str]:
        tree = parent.tree if parent is not None and parent.tree is not None else seed_source
        source = "\n\n".join(f"// file: {p}\n{t}" for p, t in sorted(tree.files.items()))
        prompt = self.prompt_template.replace("{source}", source)
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
            "n": n,
        }
        data = self._post(payload)
        try:
            texts = [c["message"]["content"] for c in data["choices"]]
        except (KeyError, TypeError) as exc:
            raise GeneratorError("unexpected LLM response shape") from exc
        return (texts + [""] * n)[:n]


# --- one round ------------------------------------------------------------------


@dataclass(frozen=True)
class IterationConfig:
    population: int = 300  # round-0 candidates
    variants_per_parent: int = 10
    survivors: int = 10
    K_eval: int = 20
    pilot: int = 30  # candidates evaluated on every condition to fit the model
    include_parents: bool = False
    refit: bool = False
    full_confirmation: bool = False
    enforce_no_new_functions: bool = False

    def __post_init__(self):
        for name in ("population", "variants_per_parent", "survivors", "K_eval", "pilot"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.survivors > self.population:
            raise ValueError("survivors cannot exceed population")
        if self.pilot < 2:
            raise ValueError("the pilot needs at least 2 candidates")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SelectionState:
    model: GaussianModel
    subset: list[int]
    pilot_ids: list[str]

    def to_dict(self) -> dict:
        return {"model": json.loads(self.model.to_json()), "subset": self.subset, "pilot_ids": self.pilot_ids}

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionState":
        return cls(GaussianModel.from_json(json.dumps(d["model"])), [int(j) for j in d["subset"]], list(d["pilot_ids"]))


@dataclass
class IterationResult:
    round: int
    candidates: list[Candidate]
    survivors: list[Candidate]
    stats: dict[str, int]
    state: SelectionState

    @property
    def best_utility(self) -> float | None:
        if not self.survivors:
            return None
        best = self.survivors[0]
        return best.confirmed_utility if best.confirmed_utility is not None else best.utility_estimate


def build_candidates(
    texts: Sequence[str],
    source: SourceTree,
    parent: Candidate | None,
    round_index: int,
    start: int,
    enforce_no_new_functions: bool = False,
) -> list[Candidate]:
    base_tree = parent.tree if parent is not None and parent.tree is not None else source
    known = {p: set(list_function_definitions(t)) for p, t in base_tree.files.items()}
    out = []
    for offset, text in enumerate(texts):
        cid = f"it{round_index}-c{start + offset:05d}"
        parsed = parse_update_blocks(text)
        cand = Candidate(cid, parent.id if parent else None, list(parsed.blocks), round=round_index)
        if parsed.errors or not parsed.blocks:
            cand.status = CandidateStatus.REJECTED
            cand.reason = parsed.errors[0].reason if parsed.errors else "NoBlocks"
            cand.rejections = rejection_records(cid, parsed, None)
            out.append(cand)
            continue
        outcome = apply_patch(base_tree, parsed.blocks)
        if not outcome.all_applied:
            cand.status = CandidateStatus.REJECTED
            cand.reason = outcome.rejected[0].reason
            cand.rejections = rejection_records(cid, parsed, outcome)
            out.append(cand)
            continue
        violations = validate_syntax(outcome.tree)
        if violations:
            cand.status = CandidateStatus.REJECTED
            cand.reason = "SyntaxInvalid"
            cand.rejections = [{"candidate": cid, "reason": "SyntaxInvalid", **v.to_dict()} for v in violations]
            out.append(cand)
            continue
        if enforce_no_new_functions:
            added = [
                f for p, t in outcome.tree.files.items() for f in list_function_definitions(t) if f not in known.get(p, set())
            ]
            if added:
                cand.status = CandidateStatus.REJECTED
                cand.reason = "NewFunction"
                cand.rejections = [{"candidate": cid, "reason": "NewFunction", "detail": ", ".join(added)}]
                out.append(cand)
                continue
        cand.tree = outcome.tree
        cand.status = CandidateStatus.VALID
        out.append(cand)
    return out


def _fit_state(
    valid: list[Candidate], backend: EvalBackend, conditions: Sequence[Any], baselines, cfg: IterationConfig, ucfg, seed: int, round_index: int, jobs: int
) -> tuple[SelectionState, dict[str, tuple[float, int]]]:
    rng = rng_for(seed, "pipeline-pilot", round_index)
    L = min(cfg.pilot, len(valid))
    picks = sorted(int(i) for i in rng.choice(len(valid), size=L, replace=False)) if L else []
    pilot_cands = [valid[i] for i in picks]
    grid = evaluate_cells(backend, pilot_cands, conditions, None, baselines, ucfg, jobs)
    complete = grid.complete_rows()
    if complete.shape[0] < 2:
        raise PipelineError(f"only {complete.shape[0]} pilot candidates could be evaluated; need at least 2")
    model = fit_gaussian(complete)
    K = min(cfg.K_eval, len(conditions))
    subset = list(greedy_select(model, K).order)
    exact = {}
    for i, a in enumerate(grid.algorithms):
        if grid.mask[i].all():
            exact[a] = (grid.row_average(i), len(conditions))
    return SelectionState(model, subset, list(complete.algorithms)), exact


def run_iteration(
    cfg: IterationConfig,
    generator: GeneratorContract,
    backend: EvalBackend,
    conditions: Sequence[Any],
    source: SourceTree,
    parents: Sequence[Candidate] = (),
    state: SelectionState | None = None,
    round_index: int = 0,
    seed: int = 0,
    baselines: dict[str, Measurement] | None = None,
    ucfg: UtilityConfig = UtilityConfig(),
    jobs: int = 1,
) -> IterationResult:
    """One generational round; returns the ranked survivors and round statistics."""
    if round_index > 0 and not parents:
        raise PipelineError("rounds after the first need parents")
    candidates: list[Candidate] = []
    if round_index == 0:
        texts = generator.generate(source, None, cfg.population)
        candidates = build_candidates(texts, source, None, 0, 0, cfg.enforce_no_new_functions)
    else:
        for parent in parents:
            texts = generator.generate(source, parent, cfg.variants_per_parent)
            candidates += build_candidates(texts, source, parent, round_index, len(candidates), cfg.enforce_no_new_functions)

    valid = [c for c in candidates if c.status is CandidateStatus.VALID]
    exact: dict[str, tuple[float, int]] = {}
    if state is None or cfg.refit:
        if not valid:
            raise PipelineError("no valid candidates to fit the condition model")
        state, exact = _fit_state(valid, backend, conditions, baselines, cfg, ucfg, seed, round_index, jobs)

    pending = [c for c in valid if c.id not in exact]
    if pending:
        grid = evaluate_cells(backend, pending, conditions, state.subset, baselines, ucfg, jobs)
        est = MeanEstimator(state.model, state.subset)
        for i, c in enumerate(pending):
            row = grid.values[i, state.subset]
            if grid.mask[i, state.subset].all():
                c.utility_estimate = float(est(row))
                c.observed_cells = len(state.subset)
                c.status = CandidateStatus.EVALUATED
            else:
                c.status = CandidateStatus.REJECTED
                c.reason = "EvaluationFailed"
    for c in valid:
        if c.id in exact:
            c.utility_estimate, c.observed_cells = exact[c.id]
            c.status = CandidateStatus.EVALUATED

    pool = [c for c in candidates if c.status is CandidateStatus.EVALUATED]
    if cfg.include_parents:
        pool += [p for p in parents if p.utility_estimate is not None]
    order = sorted(range(len(pool)), key=lambda i: (-pool[i].utility_estimate, i))
    survivors = [pool[i] for i in order[: cfg.survivors]]
    stats = {
        "generated": len(candidates),
        "parsed": sum(1 for c in candidates if c.blocks and not any(r.get("reason") == "MalformedBlock" for r in c.rejections)),
        "rejected": sum(1 for c in candidates if c.status is CandidateStatus.REJECTED),
        "valid": len(valid),
        "evaluated": sum(1 for c in candidates if c.status is CandidateStatus.EVALUATED),
    }
    return IterationResult(round_index, candidates, survivors, stats, state)


def confirm_full(
    survivors: Sequence[Candidate], backend: EvalBackend, conditions: Sequence[Any], baselines=None, ucfg: UtilityConfig = UtilityConfig(), jobs: int = 1
) -> None:
    """Evaluate survivors on every condition and record their exact mean utility."""
    grid = evaluate_cells(backend, list(survivors), conditions, None, baselines, ucfg, jobs)
    for i, c in enumerate(survivors):
        c.confirmed_utility = grid.row_average(i) if grid.mask[i].all() else None


# --- multi-round driver and run directory -------------------------------------------


def _iter_dir(run_dir: Path, i: int) -> Path:
    return run_dir / f"iter{i}"


def write_iteration(run_dir: Path, result: IterationResult) -> None:
    """Write one round atomically: build in a temp dir, then rename into place."""
    final = _iter_dir(run_dir, result.round)
    tmp = run_dir / f".iter{result.round}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    with open(tmp / "candidates.jsonl", "w", encoding="utf-8") as fh:
        for c in result.candidates:
            fh.write(json.dumps(c.to_record(), sort_keys=True) + "\n")
    ranked = [RankedCandidate(c.id, float(c.utility_estimate), c.observed_cells) for c in result.survivors]
    (tmp / "ranking.csv").write_text(ranking_csv(ranked), encoding="utf-8")
    survivors = {
        "round": result.round,
        "stats": result.stats,
        "best_utility": result.best_utility,
        "survivors": [c.to_record() for c in result.survivors],
    }
    (tmp / "survivors.json").write_text(json.dumps(survivors, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (tmp / "selection.json").write_text(json.dumps(result.state.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    for c in result.survivors:
        if c.tree is not None:
            c.tree.render(tmp / "trees" / c.id)
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)


def load_iteration(run_dir: Path, i: int) -> tuple[list[Candidate], SelectionState, dict]:
    d = _iter_dir(run_dir, i)
    doc = json.loads((d / "survivors.json").read_text(encoding="utf-8"))
    state = SelectionState.from_dict(json.loads((d / "selection.json").read_text(encoding="utf-8")))
    survivors = []
    for rec in doc["survivors"]:
        tree_dir = d / "trees" / rec["id"]
        tree = SourceTree.load(tree_dir) if tree_dir.is_dir() else None
        survivors.append(Candidate.from_record(rec, tree))
    return survivors, state, doc


@dataclass
class PipelineResult:
    best_utility: list[float | None]
    iterations: list[dict]
    survivors: list[Candidate]
    resumed_from: int = 0


def run_pipeline(
    iterations: int,
    cfg: IterationConfig,
    generator: GeneratorContract,
    backend: EvalBackend,
    conditions: Sequence[Any],
    source: SourceTree,
    seed: int = 0,
    run_dir: str | Path | None = None,
    resume: bool = False,
    baselines: dict[str, Measurement] | None = None,
    ucfg: UtilityConfig = UtilityConfig(),
    jobs: int = 1,
) -> PipelineResult:
    """Chain rounds; with ``run_dir`` each finished round is persisted and can be resumed."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
    series: list[float | None] = []
    summaries: list[dict] = []
    parents: list[Candidate] = []
    state: SelectionState | None = None
    start = 0
    if resume and run_path is not None:
        while start < iterations and (_iter_dir(run_path, start) / "survivors.json").exists():
            parents, state, doc = load_iteration(run_path, start)
            series.append(doc["best_utility"])
            summaries.append({"round": start, "stats": doc["stats"], "best_utility": doc["best_utility"], "resumed": True})
            start += 1
        if start:
            log.info("resuming at iteration %d", start)
    for i in range(start, iterations):
        result = run_iteration(cfg, generator, backend, conditions, source, parents, state, i, seed, baselines, ucfg, jobs)
        if cfg.full_confirmation and result.survivors:
            confirm_full(result.survivors, backend, conditions, baselines, ucfg, jobs)
        if run_path is not None:
            write_iteration(run_path, result)
        series.append(result.best_utility)
        summaries.append({"round": i, "stats": result.stats, "best_utility": result.best_utility})
        parents, state = result.survivors, result.state
        log.info("iteration %d: %s best=%s", i, result.stats, result.best_utility)
    return PipelineResult(series, summaries, list(parents), start)
