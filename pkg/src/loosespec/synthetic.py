"""Synthetic trace generation and Monte Carlo sweeps.

The generator draws each step's positions i.i.d.: a position is
visual-relevant with probability rho, and its drafted token matches the
verified one with a per-class probability (alpha_relevant or
alpha_irrelevant). Mismatches are either positional shifts (the verified
token sits elsewhere in the draft window) or fresh tokens from a
disjoint id range, so shift tolerance is exercised only when asked for.

Hidden-state geometry is built to be separable: visual rows concentrate
around two nearly orthogonal unit directions (a few salient rows, many
background rows), and draft rows for relevant positions cluster tightly
around the salient direction while irrelevant ones spread widely around
the background one. Rows are normalize(center + concentration**-0.5 *
unit perturbation); only the cosine geometry matters, and the angular
spread is dimension-independent. The default concentrations are chosen
so relevance scores rank relevant above irrelevant positions with AUC
comfortably past 0.95.

Sweeps replay generated traces under a list of strategies and compare
the empirical mean accepted length against the closed forms.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from .domain import (
    DecodeStep,
    HiddenMatrix,
    StrategyConfig,
    Trace,
    TraceHeader,
)
from .errors import ConfigError, EmptyStrategyList, EngineError, TraceStrategyMismatch
from .theory import effective_alignment, expected_tau_strict
from .verification import (
    ReplayResult,
    StepResult,
    collect_metrics,
    iter_events,
    replay_trace,
    verify_with_relaxed_set,
)

# angular spread of the visual rows themselves: salient rows sit tight
# around their direction, background rows scatter widely, which keeps
# background similarities diffuse and the salient profile sharp
_VISUAL_SALIENT_CONCENTRATION = 60.0
_VISUAL_BACKGROUND_CONCENTRATION = 2.0

# drafted token ids live below this bound; fresh mismatch ids above it,
# so a fresh mismatch can never collide with the draft window
_DRAFT_ID_BOUND = 2**30
_FRESH_ID_BOUND = 2**31


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for one generated trace.

    `match_autocorr` is a stretch knob: with probability `match_autocorr`
    a position copies its left neighbour's match outcome instead of
    drawing fresh, introducing within-step correlation. Default off; the
    closed forms assume independence and carry no expectation for it.
    """

    alpha_relevant: float = 0.79
    alpha_irrelevant: float = 0.79
    rho: float = 0.3
    k: int = 10
    d: int = 32
    l_v: int = 64
    salient_count: int = 8
    relevant_concentration: float = 24.0
    irrelevant_concentration: float = 1.5
    shift_event_rate: float = 0.0
    steps: int = 1000
    seed: int = 0
    entropy_match_mean: float = 0.05
    entropy_mismatch_mean: float = 0.4
    match_autocorr: float = 0.0

    def validate(self) -> None:
        probs = (
            ("alpha_relevant", self.alpha_relevant),
            ("alpha_irrelevant", self.alpha_irrelevant),
            ("rho", self.rho),
            ("shift_event_rate", self.shift_event_rate),
            ("match_autocorr", self.match_autocorr),
        )
        for name, value in probs:
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.d < 2:
            raise ConfigError(f"d must be >= 2, got {self.d}")
        if self.l_v < 2:
            raise ConfigError(f"l_v must be >= 2, got {self.l_v}")
        if not 1 <= self.salient_count <= self.l_v:
            raise ConfigError(
                f"salient_count must lie in [1, l_v={self.l_v}], got {self.salient_count}"
            )
        for name in ("relevant_concentration", "irrelevant_concentration"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        for name in ("entropy_match_mean", "entropy_mismatch_mean"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    def digest(self) -> str:
        payload = json.dumps(
            {f: getattr(self, f) for f in sorted(self.__dataclass_fields__)},
            sort_keys=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def _rows_around(rng: np.random.Generator, center: np.ndarray, concentration: float, n: int) -> np.ndarray:
    """n unit rows scattered around a unit center.

    normalize(center + concentration**-0.5 * u) for a uniform unit
    perturbation u, computed as normalize(sqrt(c)*center + u) so
    concentration 0 degrades to uniform directions instead of dividing
    by zero.
    """
    d = center.shape[0]
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    rows = np.sqrt(concentration) * center + u
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return rows


def _orthonormal_pair(rng: np.random.Generator, d: int) -> tuple:
    a = rng.normal(size=d)
    a /= np.linalg.norm(a)
    b = rng.normal(size=d)
    b -= (b @ a) * a
    b /= np.linalg.norm(b)
    return a, b


def generate_trace(config: SyntheticConfig) -> Trace:
    """Generate one chain trace; byte-deterministic in the config."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    s_count, k, d = config.steps, config.k, config.d

    u_salient, u_background = _orthonormal_pair(rng, d)
    visual = np.empty((config.l_v, d))
    visual[: config.salient_count] = _rows_around(
        rng, u_salient, _VISUAL_SALIENT_CONCENTRATION, config.salient_count
    )
    visual[config.salient_count :] = _rows_around(
        rng, u_background, _VISUAL_BACKGROUND_CONCENTRATION, config.l_v - config.salient_count
    )
    visual_hidden = HiddenMatrix.from_rows(visual.astype(np.float32))

    labels = rng.random((s_count, k)) < config.rho
    match_p = np.where(labels, config.alpha_relevant, config.alpha_irrelevant)
    match = rng.random((s_count, k)) < match_p
    if config.match_autocorr > 0.0 and k > 1:
        copy_left = rng.random((s_count, k - 1)) < config.match_autocorr
        for i in range(1, k):
            match[:, i] = np.where(copy_left[:, i - 1], match[:, i - 1], match[:, i])

    draft_ids = rng.integers(0, _DRAFT_ID_BOUND, size=(s_count, k), dtype=np.int64)
    target_ids = draft_ids.copy()
    mismatch = ~match
    shifted = mismatch & (rng.random((s_count, k)) < config.shift_event_rate)
    if k < 2:
        shifted[:] = False  # no other window position to shift from
    fresh = mismatch & ~shifted
    target_ids[fresh] = rng.integers(
        _DRAFT_ID_BOUND, _FRESH_ID_BOUND, size=int(fresh.sum()), dtype=np.int64
    )
    if shifted.any():
        rows, cols = np.nonzero(shifted)
        other = rng.integers(0, k - 1, size=rows.size)
        other += other >= cols
        target_ids[rows, cols] = draft_ids[rows, other]

    ent_match = rng.exponential(config.entropy_match_mean, size=(s_count, k))
    ent_mismatch = rng.exponential(config.entropy_mismatch_mean, size=(s_count, k))
    entropy = np.where(match, ent_match, ent_mismatch)

    hidden = np.empty((s_count * k, d))
    flat_labels = labels.ravel()
    n_rel = int(flat_labels.sum())
    if n_rel:
        hidden[flat_labels] = _rows_around(
            rng, u_salient, config.relevant_concentration, n_rel
        )
    if n_rel < flat_labels.size:
        hidden[~flat_labels] = _rows_around(
            rng, u_background, config.irrelevant_concentration, flat_labels.size - n_rel
        )
    hidden = _freeze(np.ascontiguousarray(hidden, dtype=np.float32))

    # freeze the grids so per-step views are kept as-is, not copied
    _freeze(draft_ids)
    _freeze(target_ids)
    _freeze(entropy)
    _freeze(labels)

    steps = []
    for s in range(s_count):
        steps.append(
            DecodeStep(
                step_index=s,
                draft_ids=draft_ids[s],
                target_ids=target_ids[s],
                draft_hidden=HiddenMatrix(rows=k, cols=d, values=hidden[s * k : (s + 1) * k].ravel()),
                target_entropy=entropy[s],
                relevance_labels=labels[s],
            )
        )
    header = TraceHeader(
        d=d,
        l_v=config.l_v,
        model_names=(f"synthetic-geometric/{config.digest()}",),
        seed=config.seed,
    )
    return Trace(header=header, visual_hidden=visual_hidden, steps=tuple(steps))


# ---------------------------------------------------------------------------
# ground-truth oracle strategy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleRelaxedStrategy:
    """Relaxes exactly the ground-truth irrelevant positions.

    A harness-only upper reference for what relevance scoring can reach:
    it reads each step's relevance_labels instead of scoring hidden
    states. Only replayable on traces that carry labels.
    """

    pst_enabled: bool = False

    def spec_string(self) -> str:
        return "oracle-visual" + (":pst" if self.pst_enabled else "")


AnyStrategy = Union[StrategyConfig, OracleRelaxedStrategy]


def replay_oracle(strategy: OracleRelaxedStrategy, trace: Trace) -> ReplayResult:
    results = []
    for event in iter_events(trace):
        best = None
        for step in event:
            if step.relevance_labels is None:
                raise TraceStrategyMismatch(
                    f"oracle relaxation needs relevance_labels, absent at step {step.step_index}"
                )
            verdict = verify_with_relaxed_set(
                step, ~step.relevance_labels, pst_enabled=strategy.pst_enabled
            )
            candidate = StepResult(step_index=step.step_index, branch=step.branch, verdict=verdict)
            if best is None or verdict.accepted_length > best.verdict.accepted_length:
                best = candidate
        results.append(best)
    metrics = collect_metrics(strategy.spec_string(), results, trace)
    return ReplayResult(metrics=metrics, steps=tuple(results))


def replay_any(strategy: AnyStrategy, trace: Trace) -> ReplayResult:
    if isinstance(strategy, OracleRelaxedStrategy):
        return replay_oracle(strategy, trace)
    return replay_trace(strategy, trace)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


def derive_seed(base_seed: int, point_index: int, trial_index: int) -> int:
    seq = np.random.SeedSequence(entropy=(base_seed, point_index, trial_index))
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class StrategyStat:
    name: str
    mean_tau: float
    std_error: float
    trial_means: tuple


@dataclass(frozen=True)
class SweepResult:
    """Aggregates for one grid point: empirical per strategy vs analytic.

    `analytic_strict` uses the marginal per-position match probability;
    `analytic_loose` is the oracle-relaxation expectation (irrelevant
    positions always pass, relevant ones need alpha_relevant).
    """

    config: SyntheticConfig
    trials: int
    analytic_strict: float
    analytic_loose: float
    stats: tuple
    error: Optional[str] = None

    @property
    def empirical_mean_tau(self) -> float:
        return self.stats[0].mean_tau

    @property
    def standard_error(self) -> float:
        return self.stats[0].std_error

    def to_record(self) -> dict:
        return {
            "alpha_relevant": self.config.alpha_relevant,
            "alpha_irrelevant": self.config.alpha_irrelevant,
            "rho": self.config.rho,
            "k": self.config.k,
            "steps": self.config.steps,
            "trials": self.trials,
            "analytic_strict": self.analytic_strict,
            "analytic_loose": self.analytic_loose,
            "strategies": {
                s.name: {"mean_tau": s.mean_tau, "std_error": s.std_error} for s in self.stats
            },
            "error": self.error,
        }


SWEEP_CSV_COLUMNS = (
    "alpha_relevant",
    "alpha_irrelevant",
    "rho",
    "k",
    "steps",
    "trials",
    "analytic_strict",
    "analytic_loose",
    "strategy",
    "mean_tau",
    "std_error",
    "error",
)


def sweep_csv(results: Sequence[SweepResult]) -> str:
    """Long-form table: one row per (grid point, strategy)."""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(SWEEP_CSV_COLUMNS)
    for r in results:
        base = [
            r.config.alpha_relevant,
            r.config.alpha_irrelevant,
            r.config.rho,
            r.config.k,
            r.config.steps,
            r.trials,
            repr(r.analytic_strict),
            repr(r.analytic_loose),
        ]
        if not r.stats:
            writer.writerow(base + ["", "", "", r.error or ""])
        for s in r.stats:
            writer.writerow(base + [s.name, repr(s.mean_tau), repr(s.std_error), r.error or ""])
    return out.getvalue()


def _point_analytics(config: SyntheticConfig) -> tuple:
    marginal = config.rho * config.alpha_relevant + (1 - config.rho) * config.alpha_irrelevant
    strict = expected_tau_strict(marginal, config.k)
    loose = expected_tau_strict(effective_alignment(config.alpha_relevant, config.rho), config.k)
    return strict, loose


def run_sweep(
    grid: Sequence[SyntheticConfig],
    strategies: Sequence[AnyStrategy],
    trials: int,
    base_seed: int = 0,
) -> list:
    """Replay every strategy over `trials` fresh traces per grid point.

    Per-trial seeds derive from (base_seed, point index, trial index),
    so results are reproducible and schedule-independent. A point whose
    generation or replay fails is recorded with its error; the sweep
    continues.
    """
    strategies = list(strategies)
    if not strategies:
        raise EmptyStrategyList("sweep needs at least one strategy")
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep grid is empty")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    for strategy in strategies:
        if isinstance(strategy, StrategyConfig):
            strategy.validate()

    results = []
    for point_index, config in enumerate(grid):
        analytic_strict, analytic_loose = _point_analytics(config)
        try:
            per_strategy = [[] for _ in strategies]
            for trial_index in range(trials):
                trial_config = replace(config, seed=derive_seed(base_seed, point_index, trial_index))
                trace = generate_trace(trial_config)
                for slot, strategy in enumerate(strategies):
                    per_strategy[slot].append(replay_any(strategy, trace).metrics.mean_tau)
            stats = []
            for strategy, means in zip(strategies, per_strategy):
                arr = np.asarray(means)
                se = float(arr.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
                stats.append(
                    StrategyStat(
                        name=strategy.spec_string(),
                        mean_tau=float(arr.mean()),
                        std_error=se,
                        trial_means=tuple(float(m) for m in means),
                    )
                )
            results.append(
                SweepResult(
                    config=config,
                    trials=trials,
                    analytic_strict=analytic_strict,
                    analytic_loose=analytic_loose,
                    stats=tuple(stats),
                )
            )
        except EngineError as e:
            results.append(
                SweepResult(
                    config=config,
                    trials=trials,
                    analytic_strict=analytic_strict,
                    analytic_loose=analytic_loose,
                    stats=(),
                    error=f"{type(e).__name__}: {e}",
                )
            )
    return results


# ---------------------------------------------------------------------------
# failure-rate dilution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DilutionReport:
    """Strict vs loose step failure rates when a lambda share is relaxed.

    Failure rate is 1 - mean_tau/K. The generator's relevant-position
    density is 1 - lam, so relaxing the irrelevant share lam leaves
    relevant mismatches as the only failure source. `predicted` is the
    density-scaled strict failure rate (the dilution heuristic);
    `analytic_loose` is the exact finite-K expectation for comparison.
    """

    alpha: float
    lam: float
    k: int
    trials: int
    steps_per_trial: int
    strict_failure_rate: float
    oracle_loose_failure_rate: float
    scored_loose_failure_rate: float
    predicted_failure_rate: float
    analytic_loose_failure_rate: float

    def to_record(self) -> dict:
        return {
            "alpha": self.alpha,
            "lambda": self.lam,
            "k": self.k,
            "trials": self.trials,
            "steps_per_trial": self.steps_per_trial,
            "strict_failure_rate": self.strict_failure_rate,
            "oracle_loose_failure_rate": self.oracle_loose_failure_rate,
            "scored_loose_failure_rate": self.scored_loose_failure_rate,
            "predicted_failure_rate": self.predicted_failure_rate,
            "analytic_loose_failure_rate": self.analytic_loose_failure_rate,
        }


def dilution_check(
    alpha: float,
    lam: float,
    k: int,
    trials: int,
    steps_per_trial: int = 2000,
    base_seed: int = 0,
    top_n: int = 5,
) -> DilutionReport:
    """Measure how relaxing the lam least-relevant share dilutes failures.

    Three replays of the same traces: strict, oracle relaxation
    (ground-truth labels), and scored relaxation (relevance ranking with
    the engine's own scorer, PST off).
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    base = SyntheticConfig(
        alpha_relevant=alpha,
        alpha_irrelevant=alpha,
        rho=1.0 - lam,
        k=k,
        steps=steps_per_trial,
    )
    base.validate()
    scored = StrategyConfig.lvspec(lam=lam, top_n=top_n, pst=False)
    taus = {"strict": [], "oracle": [], "scored": []}
    for trial_index in range(trials):
        trace = generate_trace(replace(base, seed=derive_seed(base_seed, 0, trial_index)))
        taus["strict"].append(replay_trace(StrategyConfig.strict(), trace).metrics.mean_tau)
        taus["oracle"].append(replay_oracle(OracleRelaxedStrategy(), trace).metrics.mean_tau)
        taus["scored"].append(replay_trace(scored, trace).metrics.mean_tau)

    def failure(name: str) -> float:
        return 1.0 - float(np.mean(taus[name])) / k

    strict_failure = failure("strict")
    density = 1.0 - lam
    analytic_loose = 1.0 - expected_tau_strict(effective_alignment(alpha, density), k) / k
    return DilutionReport(
        alpha=alpha,
        lam=lam,
        k=k,
        trials=trials,
        steps_per_trial=steps_per_trial,
        strict_failure_rate=strict_failure,
        oracle_loose_failure_rate=failure("oracle"),
        scored_loose_failure_rate=failure("scored"),
        predicted_failure_rate=density * strict_failure,
        analytic_loose_failure_rate=analytic_loose,
    )
