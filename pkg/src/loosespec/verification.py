"""Step verification strategies and trace replay.

A step is verified position by position. Exact matches are always
accepted; what happens at a mismatch is the strategy's choice:

  strict   reject every mismatch
  random   accept with fixed probability (one seeded draw per visited
           mismatch, in position order)
  entropy  accept when the target distribution's entropy exceeds a
           threshold (high entropy: many plausible continuations)
  fly      entropy gate plus an exact-match window after the position
  lvspec   accept when the position is in the relaxed (visually least
           relevant) set, else when the verified token appears anywhere
           in the current draft window (positional shift tolerance)

The scan stops at the first rejection; later positions are not reached.
The accepted prefix plus the target's correction token (when the prefix
is short of K) forms the step's emitted output.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .domain import (
    Decision,
    DecodeStep,
    HiddenMatrix,
    ReplayMetrics,
    StepVerdict,
    StrategyConfig,
    StrategyKind,
    Trace,
)
from .errors import (
    DomainError,
    MissingEntropy,
    MissingHidden,
    TraceStrategyMismatch,
    VerdictTraceMismatch,
)
from .relevance import RelaxedIndexSet, RelevanceScorer, RelevanceScores, relaxed_indices

# ---------------------------------------------------------------------------
# strategy binding
# ---------------------------------------------------------------------------


@dataclass
class BoundStrategy:
    """A validated strategy ready to verify steps.

    Random strategies carry generator state: draws advance across calls,
    so bind once per replay for reproducible verdicts.
    """

    config: StrategyConfig
    needs_entropy: bool
    needs_hidden: bool
    rng: Optional[np.random.Generator] = None


def bind_strategy(config: StrategyConfig, trace: Optional[Trace] = None) -> BoundStrategy:
    """Validate the config and, when a trace is given, its requirements.

    Raises TraceStrategyMismatch when the trace lacks a field the
    strategy needs, so replays fail before any work happens.
    """
    config.validate()
    needs_entropy = config.kind in (StrategyKind.ENTROPY_GATE, StrategyKind.FLY_WINDOW)
    needs_hidden = config.kind is StrategyKind.LVSPEC
    if trace is not None:
        if needs_entropy:
            for idx, step in enumerate(trace.steps):
                if step.target_entropy is None:
                    raise TraceStrategyMismatch(
                        f"{config.kind.value} needs target_entropy, absent at steps[{idx}]"
                    )
        if needs_hidden and (trace.visual_hidden.rows < 1 or trace.visual_hidden.cols < 1):
            raise TraceStrategyMismatch(
                f"{config.kind.value} needs visual hidden states, got "
                f"{trace.visual_hidden.rows}x{trace.visual_hidden.cols}"
            )
    rng = None
    if config.kind is StrategyKind.RANDOM:
        rng = np.random.default_rng(config.seed)
    return BoundStrategy(config=config, needs_entropy=needs_entropy, needs_hidden=needs_hidden, rng=rng)


# ---------------------------------------------------------------------------
# single-step verification
# ---------------------------------------------------------------------------


def _emit(step: DecodeStep, tau: int, decisions: np.ndarray) -> StepVerdict:
    k = step.k
    ids = list(step.draft_ids[:tau])
    texts = None
    if step.draft_texts is not None or step.target_texts is not None:
        texts = [
            step.draft_texts[i] if step.draft_texts is not None else None for i in range(tau)
        ]
    if tau < k:
        ids.append(step.target_ids[tau])
        if texts is not None:
            texts.append(step.target_texts[tau] if step.target_texts is not None else None)
    return StepVerdict(
        accepted_length=tau,
        decisions=decisions,
        emitted_ids=np.asarray(ids, dtype=np.int64),
        emitted_texts=texts,
    )


def _scan(step: DecodeStep, on_mismatch: Callable[[int], Decision]) -> StepVerdict:
    """Sequential accept/reject scan; `on_mismatch` names the strategy.

    Only the random strategy needs this (its draws must happen in
    position order); everything deterministic goes through _from_raw.
    """
    k = step.k
    matches = (step.draft_ids == step.target_ids).tolist()
    decisions = np.full(k, Decision.NOT_REACHED, dtype=np.int8)
    tau = k
    for i in range(k):
        if matches[i]:
            decisions[i] = Decision.EXACT_MATCH
            continue
        decision = on_mismatch(i)
        decisions[i] = decision
        if decision is Decision.REJECT:
            tau = i
            break
    return _emit(step, tau, decisions)


def _from_raw(step: DecodeStep, raw: np.ndarray) -> StepVerdict:
    """Build a verdict from position-wise decisions ignoring reachability.

    The scan semantics are imposed here: everything after the first
    reject was never visited.
    """
    rejects = np.flatnonzero(raw == Decision.REJECT)
    if rejects.size:
        tau = int(rejects[0])
        decisions = raw.astype(np.int8, copy=True)
        decisions[tau + 1 :] = Decision.NOT_REACHED
    else:
        tau = step.k
        decisions = raw
    return _emit(step, tau, decisions)


def verify_with_relaxed_set(
    step: DecodeStep, relaxed: Sequence[int], pst_enabled: bool
) -> StepVerdict:
    """LvSpec-semantics verification with an externally supplied relaxed set.

    The engine's own LvSpec path builds the set from relevance scores;
    harness code (ground-truth oracles) can pass any position set here,
    including a boolean mask over positions.
    """
    k = step.k
    relaxed_mask = np.zeros(k, dtype=bool)
    if isinstance(relaxed, np.ndarray) and relaxed.dtype == np.bool_:
        if len(relaxed) != k:
            raise DomainError(f"{len(relaxed)} relaxed flags for a {k}-token step")
        relaxed_mask = relaxed
    else:
        indices = relaxed.indices if isinstance(relaxed, RelaxedIndexSet) else tuple(relaxed)
        for i in indices:
            if not 0 <= int(i) < k:
                raise DomainError(f"relaxed index {i} outside [0, {k})")
            relaxed_mask[int(i)] = True
    matches = step.draft_ids == step.target_ids
    raw = np.where(
        matches,
        np.int8(Decision.EXACT_MATCH),
        np.where(relaxed_mask, np.int8(Decision.LOOSE_VISUAL), np.int8(Decision.REJECT)),
    )
    if pst_enabled:
        shifted = np.isin(step.target_ids, step.draft_ids)
        raw = np.where(
            (raw == Decision.REJECT) & shifted, np.int8(Decision.LOOSE_PST), raw
        )
    return _from_raw(step, raw.astype(np.int8, copy=False))


def verify_step(
    strategy: BoundStrategy,
    step: DecodeStep,
    visual_hidden: Optional[HiddenMatrix] = None,
    *,
    relevance: Optional[RelevanceScores] = None,
) -> StepVerdict:
    """Verify one step under the bound strategy.

    LvSpec scores the step against `visual_hidden` unless precomputed
    `relevance` scores are passed (replay does this so the same scores
    feed both the verdict and the loosening report).
    """
    cfg = strategy.config
    kind = cfg.kind

    if kind is StrategyKind.STRICT:
        matches = step.draft_ids == step.target_ids
        raw = np.where(matches, np.int8(Decision.EXACT_MATCH), np.int8(Decision.REJECT))
        return _from_raw(step, raw.astype(np.int8, copy=False))

    if kind is StrategyKind.RANDOM:
        rng = strategy.rng
        p = cfg.random_p

        def on_mismatch(i: int) -> Decision:
            return Decision.LOOSE_RANDOM if rng.random() < p else Decision.REJECT

        return _scan(step, on_mismatch)

    if kind in (StrategyKind.ENTROPY_GATE, StrategyKind.FLY_WINDOW):
        ent = step.target_entropy
        if ent is None:
            raise MissingEntropy(f"step {step.step_index} carries no target_entropy")
        matches = step.draft_ids == step.target_ids
        passes_gate = ent > cfg.entropy_threshold
        if kind is StrategyKind.FLY_WINDOW:
            k = step.k
            # run[i] = consecutive exact matches starting at i; the window
            # [i+1, i+window] truncates at the step boundary and passes
            # vacuously when empty
            run = np.zeros(k + 1, dtype=np.int64)
            for i in range(k - 1, -1, -1):
                run[i] = run[i + 1] + 1 if matches[i] else 0
            needed = np.minimum(cfg.window, k - 1 - np.arange(k))
            passes_gate = passes_gate & (run[1 : k + 1] >= needed)
        raw = np.where(
            matches,
            np.int8(Decision.EXACT_MATCH),
            np.where(passes_gate, np.int8(Decision.LOOSE_ENTROPY), np.int8(Decision.REJECT)),
        )
        return _from_raw(step, raw.astype(np.int8, copy=False))

    # LvSpec
    if relevance is None:
        if visual_hidden is None or visual_hidden.rows < 1:
            raise MissingHidden("lvspec needs visual hidden states or precomputed relevance")
        relevance = RelevanceScorer(visual_hidden).scores(step.draft_hidden, cfg.top_n)
    if len(relevance) != step.k:
        raise DomainError(f"{len(relevance)} relevance scores for a {step.k}-token step")
    relaxed = relaxed_indices(relevance, cfg.lam)
    return verify_with_relaxed_set(step, relaxed, cfg.pst_enabled)


def select_tree_branch(
    strategy: BoundStrategy,
    branch_a: DecodeStep,
    branch_b: DecodeStep,
    visual_hidden: Optional[HiddenMatrix] = None,
) -> tuple:
    """Verify both branches of one step and keep the longer acceptance.

    Branch a is verified first (this fixes random-draw order); ties go
    to branch a.
    """
    if branch_a.step_index != branch_b.step_index:
        raise DomainError(
            f"branches must share a step_index, got {branch_a.step_index} and {branch_b.step_index}"
        )
    verdict_a = verify_step(strategy, branch_a, visual_hidden)
    verdict_b = verify_step(strategy, branch_b, visual_hidden)
    if verdict_b.accepted_length > verdict_a.accepted_length:
        return branch_b.branch, verdict_b
    return branch_a.branch, verdict_a


# ---------------------------------------------------------------------------
# trace replay
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepResult:
    """Verdict for one verification event (the winning branch, for trees)."""

    step_index: int
    branch: int
    verdict: StepVerdict
    relevance: Optional[RelevanceScores] = None


@dataclass(frozen=True)
class ReplayResult:
    metrics: ReplayMetrics
    steps: tuple


def collect_metrics(
    strategy_name: str,
    results: Sequence[StepResult],
    trace: Trace,
    relevance_seconds: Optional[float] = None,
    total_seconds: Optional[float] = None,
) -> ReplayMetrics:
    """Aggregate step results into ReplayMetrics.

    The decision histogram covers every position of every event exactly
    once, NOT_REACHED included. The speedup estimate needs all three
    header latencies and is only defined for chain traces.
    """
    counts = np.zeros(len(Decision), dtype=np.int64)
    total_accepted = 0
    draft_cost_units = 0.0
    for r in results:
        total_accepted += r.verdict.accepted_length
        counts += np.bincount(r.verdict.decisions, minlength=len(Decision))
        draft_cost_units += r.verdict.k
    total_steps = len(results)
    mean_tau = total_accepted / total_steps if total_steps else 0.0

    speedup = None
    h = trace.header
    if total_steps and h.has_latencies() and trace.branches_per_step == 1:
        denom = draft_cost_units * h.latency_t_d + total_steps * h.latency_t_t_k
        speedup = total_accepted * h.latency_t_t / denom

    share = None
    if relevance_seconds is not None:
        share = 0.0
        if total_seconds and total_seconds > 0:
            share = min(1.0, relevance_seconds / total_seconds)

    return ReplayMetrics(
        strategy=strategy_name,
        total_steps=total_steps,
        total_accepted=total_accepted,
        mean_tau=mean_tau,
        per_position_counts={d: int(counts[d]) for d in Decision},
        speedup_estimate=speedup,
        relevance_wall_share=share,
    )


def iter_events(trace: Trace):
    """Yield verification events: single steps, or branch pairs for trees."""
    if trace.branches_per_step == 2:
        for i in range(0, len(trace.steps) - 1, 2):
            yield trace.steps[i], trace.steps[i + 1]
    else:
        for step in trace.steps:
            yield (step,)


def replay_trace(config: StrategyConfig, trace: Trace) -> ReplayResult:
    """Replay a whole trace under one strategy.

    Binds the strategy against the trace (failing fast on missing
    fields), verifies every event, and aggregates metrics. For LvSpec
    the relevance computation is timed separately so its wall-clock
    share can be reported.
    """
    bound = bind_strategy(config, trace)
    scorer = None
    top_n = config.top_n
    if bound.needs_hidden:
        scorer = RelevanceScorer(trace.visual_hidden)

    results = []
    rel_seconds = 0.0
    t_start = time.perf_counter()
    for event in iter_events(trace):
        best = None
        for step in event:
            scores = None
            if scorer is not None:
                t0 = time.perf_counter()
                scores = scorer.scores(step.draft_hidden, top_n)
                rel_seconds += time.perf_counter() - t0
            verdict = verify_step(bound, step, trace.visual_hidden, relevance=scores)
            candidate = StepResult(
                step_index=step.step_index, branch=step.branch, verdict=verdict, relevance=scores
            )
            if best is None or verdict.accepted_length > best.verdict.accepted_length:
                best = candidate
        results.append(best)
    total_seconds = time.perf_counter() - t_start

    metrics = collect_metrics(
        config.spec_string(),
        results,
        trace,
        relevance_seconds=rel_seconds if bound.needs_hidden else None,
        total_seconds=total_seconds,
    )
    return ReplayResult(metrics=metrics, steps=tuple(results))


# ---------------------------------------------------------------------------
# loosening report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    step: int
    position: int
    token_id: int
    decision: Decision
    token_text: Optional[str] = None
    relevance_score: Optional[float] = None
    label: Optional[bool] = None
    branch: Optional[int] = None

    def to_record(self) -> dict:
        rec = {
            "step": self.step,
            "position": self.position,
            "token_id": self.token_id,
            "decision": self.decision.label,
        }
        if self.token_text is not None:
            rec["token_text"] = self.token_text
        if self.relevance_score is not None:
            rec["relevance_score"] = self.relevance_score
        if self.label is not None:
            rec["label"] = self.label
        if self.branch is not None:
            rec["branch"] = self.branch
        return rec


@dataclass(frozen=True)
class LooseningReport:
    """Positions of a replay ordered by ascending relevance.

    Rows without a relevance score sort after scored ones; ties and
    unscored rows fall back to (step, position) order.
    """

    rows: tuple

    def render_table(self) -> str:
        header = f"{'relevance':>10}  {'step':>6}  {'pos':>4}  {'token':>10}  {'decision':<14} {'label':<5}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            rel = f"{r.relevance_score:.6f}" if r.relevance_score is not None else "-"
            label = "-" if r.label is None else ("rel" if r.label else "irr")
            token = r.token_text if r.token_text is not None else str(r.token_id)
            lines.append(
                f"{rel:>10}  {r.step:>6}  {r.position:>4}  {token:>10}  {r.decision.label:<14} {label:<5}"
            )
        return "\n".join(lines)


def loosening_report(
    results: Union[ReplayResult, Sequence[StepResult]], trace: Trace
) -> LooseningReport:
    """Audit listing of every verified position of a replay.

    Raises VerdictTraceMismatch when the results do not line up with the
    trace (event count or per-step draft length).
    """
    step_results = results.steps if isinstance(results, ReplayResult) else tuple(results)
    if len(step_results) != trace.n_events:
        raise VerdictTraceMismatch(
            f"{len(step_results)} step results for a trace with {trace.n_events} events"
        )
    by_key = {(s.step_index, s.branch): s for s in trace.steps}
    is_tree = trace.branches_per_step == 2
    rows = []
    for r in step_results:
        step = by_key.get((r.step_index, r.branch))
        if step is None:
            raise VerdictTraceMismatch(
                f"result names step {r.step_index} branch {r.branch}, absent from the trace"
            )
        if r.verdict.k != step.k:
            raise VerdictTraceMismatch(
                f"step {r.step_index}: verdict covers {r.verdict.k} positions, step has {step.k}"
            )
        if r.relevance is not None and len(r.relevance) != step.k:
            raise VerdictTraceMismatch(
                f"step {r.step_index}: {len(r.relevance)} relevance scores, step has {step.k}"
            )
        for i in range(step.k):
            rows.append(
                ReportRow(
                    step=r.step_index,
                    position=i,
                    token_id=int(step.draft_ids[i]),
                    token_text=step.draft_texts[i] if step.draft_texts is not None else None,
                    decision=Decision(int(r.verdict.decisions[i])),
                    relevance_score=r.relevance[i] if r.relevance is not None else None,
                    label=bool(step.relevance_labels[i]) if step.relevance_labels is not None else None,
                    branch=r.branch if is_tree else None,
                )
            )
    rows.sort(
        key=lambda r: (
            r.relevance_score is None,
            r.relevance_score if r.relevance_score is not None else 0.0,
            r.step,
            r.position,
        )
    )
    return LooseningReport(rows=tuple(rows))
