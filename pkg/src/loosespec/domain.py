"""Core value types for speculative-decoding traces and verdicts.

Everything here is an immutable container plus `validate_trace`, which
reports every invariant violation instead of stopping at the first.
Constructors normalize and freeze their inputs but do not enforce
cross-object invariants; boundary code (trace readers, generators,
replay entry points) validates before use.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError

FORMAT_VERSION = 1
ENCODING_JSON = "json-numbers"
ENCODING_F32 = "f32le-base64"
ENCODINGS = (ENCODING_JSON, ENCODING_F32)

MAX_DRAFT_LEN = 10**6


def _freeze(a: np.ndarray) -> np.ndarray:
    if a.flags.writeable:
        if a.base is not None or not a.flags.owndata:
            a = a.copy()
        a.flags.writeable = False
    return a


def _as_array(data, dtype) -> np.ndarray:
    a = np.asarray(data, dtype=dtype)
    if a.ndim != 1:
        a = a.ravel()
    return _freeze(a)


def _arrays_equal(a: Optional[np.ndarray], b: Optional[np.ndarray]) -> bool:
    if a is None or b is None:
        return a is b
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


TokenLike = Union[int, "Token"]


@dataclass(frozen=True)
class Token:
    """A vocabulary entry; equality and hashing use the id only."""

    id: int
    text: Optional[str] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "id", int(self.id))


@dataclass(frozen=True, eq=False)
class HiddenMatrix:
    """Row-major float32 matrix of hidden-state vectors.

    `values` is the flat data buffer; it is stored as given so that
    length/shape mismatches survive long enough for validate_trace to
    report them. `as_array` reshapes and therefore requires consistency.
    """

    rows: int
    cols: int
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "rows", int(self.rows))
        object.__setattr__(self, "cols", int(self.cols))
        object.__setattr__(self, "values", _as_array(self.values, np.float32))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "HiddenMatrix":
        a = np.asarray(rows, dtype=np.float32)
        if a.ndim != 2:
            raise ValueError(f"expected a 2-D row collection, got shape {a.shape}")
        return cls(rows=a.shape[0], cols=a.shape[1], values=a.ravel())

    def as_array(self) -> np.ndarray:
        return self.values.reshape(self.rows, self.cols)

    def row(self, index: int) -> np.ndarray:
        return self.as_array()[index]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HiddenMatrix):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and _arrays_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        return f"HiddenMatrix(rows={self.rows}, cols={self.cols})"


def _texts_tuple(texts) -> Optional[tuple]:
    if texts is None:
        return None
    return tuple(None if t is None else str(t) for t in texts)


def _split_tokens(tokens: Sequence[TokenLike]):
    ids = []
    texts = []
    any_text = False
    for t in tokens:
        if isinstance(t, Token):
            ids.append(t.id)
            texts.append(t.text)
            any_text = any_text or t.text is not None
        else:
            ids.append(int(t))
            texts.append(None)
    return ids, (texts if any_text else None)


@dataclass(frozen=True, eq=False)
class DecodeStep:
    """One verification event: K drafted tokens against K verified tokens.

    `target_entropy` holds the entropy (nats) of the target distribution
    at each draft position; `relevance_labels` marks positions that are
    visually relevant (synthetic ground truth). Both are optional.
    """

    step_index: int
    draft_ids: np.ndarray
    target_ids: np.ndarray
    draft_hidden: HiddenMatrix
    branch: int = 0
    draft_texts: Optional[tuple] = None
    target_texts: Optional[tuple] = None
    target_entropy: Optional[np.ndarray] = None
    relevance_labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        s = object.__setattr__
        s(self, "step_index", int(self.step_index))
        s(self, "branch", int(self.branch))
        s(self, "draft_ids", _as_array(self.draft_ids, np.int64))
        s(self, "target_ids", _as_array(self.target_ids, np.int64))
        s(self, "draft_texts", _texts_tuple(self.draft_texts))
        s(self, "target_texts", _texts_tuple(self.target_texts))
        if self.target_entropy is not None:
            s(self, "target_entropy", _as_array(self.target_entropy, np.float64))
        if self.relevance_labels is not None:
            s(self, "relevance_labels", _as_array(self.relevance_labels, np.bool_))

    @classmethod
    def from_tokens(
        cls,
        step_index: int,
        draft: Sequence[TokenLike],
        target: Sequence[TokenLike],
        draft_hidden: HiddenMatrix,
        branch: int = 0,
        target_entropy=None,
        relevance_labels=None,
    ) -> "DecodeStep":
        draft_ids, draft_texts = _split_tokens(draft)
        target_ids, target_texts = _split_tokens(target)
        return cls(
            step_index=step_index,
            draft_ids=draft_ids,
            target_ids=target_ids,
            draft_hidden=draft_hidden,
            branch=branch,
            draft_texts=draft_texts,
            target_texts=target_texts,
            target_entropy=target_entropy,
            relevance_labels=relevance_labels,
        )

    @property
    def k(self) -> int:
        return len(self.draft_ids)

    def draft_token(self, i: int) -> Token:
        text = self.draft_texts[i] if self.draft_texts is not None else None
        return Token(int(self.draft_ids[i]), text)

    def target_token(self, i: int) -> Token:
        text = self.target_texts[i] if self.target_texts is not None else None
        return Token(int(self.target_ids[i]), text)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DecodeStep):
            return NotImplemented
        return (
            self.step_index == other.step_index
            and self.branch == other.branch
            and _arrays_equal(self.draft_ids, other.draft_ids)
            and _arrays_equal(self.target_ids, other.target_ids)
            and self.draft_hidden == other.draft_hidden
            and self.draft_texts == other.draft_texts
            and self.target_texts == other.target_texts
            and _arrays_equal(self.target_entropy, other.target_entropy)
            and _arrays_equal(self.relevance_labels, other.relevance_labels)
        )


@dataclass(frozen=True)
class TraceHeader:
    """Static metadata for a trace file."""

    d: int
    l_v: int
    encoding: str = ENCODING_F32
    format_version: int = FORMAT_VERSION
    model_names: Optional[tuple] = None
    latency_t_t: Optional[float] = None
    latency_t_d: Optional[float] = None
    latency_t_t_k: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.model_names is not None:
            object.__setattr__(self, "model_names", tuple(str(m) for m in self.model_names))

    def has_latencies(self) -> bool:
        return (
            self.latency_t_t is not None
            and self.latency_t_d is not None
            and self.latency_t_t_k is not None
        )


@dataclass(frozen=True, eq=False)
class Trace:
    """A full capture: header, the visual hidden states, and the steps.

    With branches_per_step=2 the steps come in consecutive pairs sharing
    a step_index, branch 0 then branch 1.
    """

    header: TraceHeader
    visual_hidden: HiddenMatrix
    steps: tuple
    branches_per_step: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "branches_per_step", int(self.branches_per_step))

    @property
    def n_events(self) -> int:
        """Verification events: step pairs count once for two-branch traces."""
        if self.branches_per_step == 2:
            return len(self.steps) // 2
        return len(self.steps)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.header == other.header
            and self.visual_hidden == other.visual_hidden
            and self.branches_per_step == other.branches_per_step
            and self.steps == other.steps
        )


class Decision(enum.IntEnum):
    """Per-position outcome of verifying one drafted token."""

    EXACT_MATCH = 0
    LOOSE_VISUAL = 1
    LOOSE_PST = 2
    LOOSE_ENTROPY = 3
    LOOSE_RANDOM = 4
    REJECT = 5
    NOT_REACHED = 6

    @property
    def label(self) -> str:
        return _DECISION_LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "Decision":
        try:
            return _DECISION_BY_LABEL[label]
        except KeyError:
            raise ValueError(f"unknown decision label: {label!r}") from None

    @property
    def is_accept(self) -> bool:
        return self < Decision.REJECT


_DECISION_LABELS = {
    Decision.EXACT_MATCH: "exact",
    Decision.LOOSE_VISUAL: "loose-visual",
    Decision.LOOSE_PST: "loose-pst",
    Decision.LOOSE_ENTROPY: "loose-entropy",
    Decision.LOOSE_RANDOM: "loose-random",
    Decision.REJECT: "reject",
    Decision.NOT_REACHED: "not-reached",
}
_DECISION_BY_LABEL = {v: k for k, v in _DECISION_LABELS.items()}


@dataclass(frozen=True, eq=False)
class StepVerdict:
    """Result of verifying one step: accepted prefix and per-position detail.

    `emitted_ids` holds the tokens the step contributes to the output:
    the accepted draft prefix plus the target's correction token when the
    prefix stopped short of K.
    """

    accepted_length: int
    decisions: np.ndarray
    emitted_ids: np.ndarray
    emitted_texts: Optional[tuple] = None

    def __post_init__(self) -> None:
        s = object.__setattr__
        s(self, "accepted_length", int(self.accepted_length))
        s(self, "decisions", _as_array(self.decisions, np.int8))
        s(self, "emitted_ids", _as_array(self.emitted_ids, np.int64))
        s(self, "emitted_texts", _texts_tuple(self.emitted_texts))

    @property
    def k(self) -> int:
        return len(self.decisions)

    @property
    def per_position(self) -> tuple:
        return tuple(Decision(int(c)) for c in self.decisions)

    @property
    def emitted_tokens(self) -> tuple:
        texts = self.emitted_texts
        return tuple(
            Token(int(t), texts[i] if texts is not None else None)
            for i, t in enumerate(self.emitted_ids)
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StepVerdict):
            return NotImplemented
        return (
            self.accepted_length == other.accepted_length
            and _arrays_equal(self.decisions, other.decisions)
            and _arrays_equal(self.emitted_ids, other.emitted_ids)
            and self.emitted_texts == other.emitted_texts
        )


class StrategyKind(enum.Enum):
    STRICT = "strict"
    RANDOM = "random"
    ENTROPY_GATE = "entropy"
    FLY_WINDOW = "fly"
    LVSPEC = "lvspec"


@dataclass(frozen=True)
class StrategyConfig:
    """Verification strategy plus its parameters.

    Exactly the parameters the kind requires may be set; `validate`
    rejects both missing and extraneous ones.
    """

    kind: StrategyKind
    lam: Optional[float] = None
    top_n: Optional[int] = None
    pst_enabled: Optional[bool] = None
    entropy_threshold: Optional[float] = None
    window: Optional[int] = None
    random_p: Optional[float] = None
    seed: Optional[int] = None

    @classmethod
    def strict(cls) -> "StrategyConfig":
        return cls(kind=StrategyKind.STRICT)

    @classmethod
    def random_accept(cls, p: float, seed: int) -> "StrategyConfig":
        return cls(kind=StrategyKind.RANDOM, random_p=float(p), seed=int(seed))

    @classmethod
    def entropy_gate(cls, threshold: float) -> "StrategyConfig":
        return cls(kind=StrategyKind.ENTROPY_GATE, entropy_threshold=float(threshold))

    @classmethod
    def fly(cls, threshold: float, window: int) -> "StrategyConfig":
        return cls(
            kind=StrategyKind.FLY_WINDOW,
            entropy_threshold=float(threshold),
            window=int(window),
        )

    @classmethod
    def lvspec(cls, lam: float, top_n: int, pst: bool = False) -> "StrategyConfig":
        return cls(
            kind=StrategyKind.LVSPEC,
            lam=float(lam),
            top_n=int(top_n),
            pst_enabled=bool(pst),
        )

    def validate(self) -> None:
        required = {
            StrategyKind.STRICT: (),
            StrategyKind.RANDOM: ("random_p", "seed"),
            StrategyKind.ENTROPY_GATE: ("entropy_threshold",),
            StrategyKind.FLY_WINDOW: ("entropy_threshold", "window"),
            StrategyKind.LVSPEC: ("lam", "top_n", "pst_enabled"),
        }[self.kind]
        all_params = (
            "lam", "top_n", "pst_enabled", "entropy_threshold",
            "window", "random_p", "seed",
        )
        for name in all_params:
            value = getattr(self, name)
            if name in required and value is None:
                raise ConfigError(f"{self.kind.value} strategy requires {name}")
            if name not in required and value is not None:
                raise ConfigError(f"{self.kind.value} strategy does not take {name}")
        if self.lam is not None and not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.top_n is not None and self.top_n < 1:
            raise ConfigError(f"top_n must be >= 1, got {self.top_n}")
        if self.entropy_threshold is not None and not self.entropy_threshold >= 0.0:
            raise ConfigError(f"entropy threshold must be >= 0, got {self.entropy_threshold}")
        if self.window is not None and self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if self.random_p is not None and not 0.0 <= self.random_p <= 1.0:
            raise ConfigError(f"random accept probability must lie in [0, 1], got {self.random_p}")

    def spec_string(self) -> str:
        """Canonical form in the CLI strategy mini-language."""
        k = self.kind
        if k is StrategyKind.STRICT:
            return "strict"
        if k is StrategyKind.RANDOM:
            return f"random:p={self.random_p:g},seed={self.seed}"
        if k is StrategyKind.ENTROPY_GATE:
            return f"entropy:threshold={self.entropy_threshold:g}"
        if k is StrategyKind.FLY_WINDOW:
            return f"fly:threshold={self.entropy_threshold:g},window={self.window}"
        parts = f"lvspec:lambda={self.lam:g},n={self.top_n}"
        return parts + (",pst" if self.pst_enabled else "")


@dataclass(frozen=True)
class ReplayMetrics:
    """Aggregates over one replay of a trace under one strategy."""

    strategy: str
    total_steps: int
    total_accepted: int
    mean_tau: float
    per_position_counts: Mapping
    speedup_estimate: Optional[float] = None
    relevance_wall_share: Optional[float] = None

    def to_record(self) -> dict:
        rec = {
            "strategy": self.strategy,
            "total_steps": self.total_steps,
            "total_accepted": self.total_accepted,
            "mean_tau": self.mean_tau,
            "per_position_counts": {
                d.label: int(self.per_position_counts.get(d, 0)) for d in Decision
            },
        }
        if self.speedup_estimate is not None:
            rec["speedup_estimate"] = self.speedup_estimate
        if self.relevance_wall_share is not None:
            rec["relevance_wall_share"] = self.relevance_wall_share
        return rec


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by validate_trace."""

    code: str
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message} [{self.code}]"


def _check_matrix(m: HiddenMatrix, path: str, out: list) -> bool:
    """Append violations for one matrix; True when the shape is usable."""
    ok = True
    if m.rows < 0 or m.cols < 0:
        out.append(Violation("matrix-shape", path, f"negative shape {m.rows}x{m.cols}"))
        ok = False
    if len(m.values) != max(m.rows, 0) * max(m.cols, 0):
        out.append(
            Violation(
                "matrix-data-length",
                path,
                f"data has {len(m.values)} values, shape {m.rows}x{m.cols} needs {m.rows * m.cols}",
            )
        )
        ok = False
    if len(m.values) and not np.isfinite(m.values).all():
        bad = int(np.flatnonzero(~np.isfinite(m.values))[0])
        out.append(Violation("matrix-nonfinite", path, f"non-finite value at flat index {bad}"))
    return ok


def _check_step(step: DecodeStep, visual_cols: Optional[int], path: str, out: list) -> None:
    k = len(step.draft_ids)
    if k == 0:
        out.append(Violation("step-empty", path, "step has no draft tokens"))
    if k > MAX_DRAFT_LEN:
        out.append(Violation("step-too-long", path, f"draft length {k} exceeds {MAX_DRAFT_LEN}"))
    if len(step.target_ids) != k:
        out.append(
            Violation(
                "step-length-mismatch",
                path,
                f"{k} draft tokens vs {len(step.target_ids)} target tokens",
            )
        )
    for name, ids in (("draft_ids", step.draft_ids), ("target_ids", step.target_ids)):
        if len(ids) and ids.min() < 0:
            bad = int(np.flatnonzero(ids < 0)[0])
            out.append(
                Violation("token-id-negative", f"{path}.{name}[{bad}]", f"id {int(ids[bad])} < 0")
            )
    hidden_path = f"{path}.draft_hidden"
    if _check_matrix(step.draft_hidden, hidden_path, out):
        if step.draft_hidden.rows != k:
            out.append(
                Violation(
                    "step-length-mismatch",
                    hidden_path,
                    f"{step.draft_hidden.rows} hidden rows vs {k} draft tokens",
                )
            )
        if visual_cols is not None and step.draft_hidden.cols != visual_cols:
            out.append(
                Violation(
                    "dim-mismatch",
                    hidden_path,
                    f"cols={step.draft_hidden.cols} but visual_hidden cols={visual_cols}",
                )
            )
    for name, texts in (("draft_texts", step.draft_texts), ("target_texts", step.target_texts)):
        if texts is not None and len(texts) != k:
            out.append(
                Violation("texts-length", f"{path}.{name}", f"{len(texts)} texts vs {k} tokens")
            )
    ent = step.target_entropy
    if ent is not None:
        if len(ent) != k:
            out.append(
                Violation("entropy-length", f"{path}.target_entropy", f"{len(ent)} values vs {k} tokens")
            )
        if len(ent):
            if not np.isfinite(ent).all():
                bad = int(np.flatnonzero(~np.isfinite(ent))[0])
                out.append(
                    Violation("entropy-nonfinite", f"{path}.target_entropy[{bad}]", "non-finite entropy")
                )
            elif ent.min() < 0:
                bad = int(np.flatnonzero(ent < 0)[0])
                out.append(
                    Violation(
                        "entropy-negative",
                        f"{path}.target_entropy[{bad}]",
                        f"entropy {float(ent[bad])} < 0",
                    )
                )
    if step.relevance_labels is not None and len(step.relevance_labels) != k:
        out.append(
            Violation(
                "labels-length",
                f"{path}.relevance_labels",
                f"{len(step.relevance_labels)} labels vs {k} tokens",
            )
        )


def validate_trace(trace: Trace) -> tuple:
    """Collect every invariant violation in the trace; empty means valid.

    Total by design: malformed-but-constructible traces yield violation
    records, never exceptions.
    """
    out: list = []
    h = trace.header
    if h.format_version != FORMAT_VERSION:
        out.append(
            Violation("header-version", "header", f"format_version {h.format_version} != {FORMAT_VERSION}")
        )
    if h.d <= 0:
        out.append(Violation("header-dims", "header.d", f"d={h.d} must be positive"))
    if h.l_v <= 0:
        out.append(Violation("header-dims", "header.l_v", f"l_v={h.l_v} must be positive"))
    if h.encoding not in ENCODINGS:
        out.append(Violation("encoding-unknown", "header.encoding", f"unknown encoding {h.encoding!r}"))
    for name in ("latency_t_t", "latency_t_d", "latency_t_t_k"):
        value = getattr(h, name)
        if value is not None and not value > 0:
            out.append(Violation("latency-nonpositive", f"header.{name}", f"{value} must be positive"))
    if trace.branches_per_step not in (1, 2):
        out.append(
            Violation(
                "branches-value",
                "branches_per_step",
                f"{trace.branches_per_step} not in {{1, 2}}",
            )
        )

    visual_ok = _check_matrix(trace.visual_hidden, "visual_hidden", out)
    visual_cols = trace.visual_hidden.cols if visual_ok else None
    if visual_ok:
        if trace.visual_hidden.rows != h.l_v:
            out.append(
                Violation(
                    "header-dim-mismatch",
                    "visual_hidden",
                    f"rows={trace.visual_hidden.rows} but header.l_v={h.l_v}",
                )
            )
        if trace.visual_hidden.cols != h.d:
            out.append(
                Violation(
                    "header-dim-mismatch",
                    "visual_hidden",
                    f"cols={trace.visual_hidden.cols} but header.d={h.d}",
                )
            )

    for idx, step in enumerate(trace.steps):
        _check_step(step, visual_cols, f"steps[{idx}]", out)

    if trace.branches_per_step == 2:
        if len(trace.steps) % 2:
            out.append(
                Violation("tree-pairing", "steps", f"odd step count {len(trace.steps)} for two branches")
            )
        prev = None
        for pair_no in range(len(trace.steps) // 2):
            a = trace.steps[2 * pair_no]
            b = trace.steps[2 * pair_no + 1]
            path = f"steps[{2 * pair_no}..{2 * pair_no + 1}]"
            if a.step_index != b.step_index:
                out.append(
                    Violation("tree-pairing", path, f"pair indices {a.step_index} != {b.step_index}")
                )
            if (a.branch, b.branch) != (0, 1):
                out.append(
                    Violation("tree-pairing", path, f"branch ids ({a.branch}, {b.branch}) != (0, 1)")
                )
            if pair_no == 0 and a.step_index != 0:
                out.append(Violation("step-index-order", path, f"first step_index {a.step_index} != 0"))
            if prev is not None and a.step_index <= prev:
                out.append(
                    Violation("step-index-order", path, f"step_index {a.step_index} not above {prev}")
                )
            prev = a.step_index
    else:
        prev = None
        for idx, step in enumerate(trace.steps):
            path = f"steps[{idx}]"
            if step.branch != 0:
                out.append(Violation("branch-value", path, f"branch {step.branch} != 0 in a chain trace"))
            if idx == 0 and step.step_index != 0:
                out.append(Violation("step-index-order", path, f"first step_index {step.step_index} != 0"))
            if prev is not None and step.step_index <= prev:
                out.append(
                    Violation("step-index-order", path, f"step_index {step.step_index} not above {prev}")
                )
            prev = step.step_index

    return tuple(out)
