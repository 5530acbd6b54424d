"""Visual relevance scoring for drafted tokens.

Scores are mean cosine similarity between a draft token's hidden state
and its top-N closest visual hidden states. The lowest-scoring round(lam*K)
positions of a step form the relaxed index set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .domain import MAX_DRAFT_LEN, HiddenMatrix
from .errors import DomainError, ZeroNormRow


@dataclass(frozen=True, eq=False)
class RelevanceScores:
    """Per-position relevance scores for one step, each in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.values, dtype=np.float64).ravel()
        if a.flags.writeable:
            a = a.copy()
            a.flags.writeable = False
        object.__setattr__(self, "values", a)

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, i: int) -> float:
        return float(self.values[i])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RelevanceScores):
            return NotImplemented
        return np.array_equal(self.values, other.values)


@dataclass(frozen=True)
class RelaxedIndexSet:
    """Positions whose mismatches the visual branch may accept."""

    indices: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "indices", tuple(sorted(int(i) for i in self.indices)))
        object.__setattr__(self, "_members", frozenset(self.indices))

    def __contains__(self, i: int) -> bool:
        return i in self._members

    def __iter__(self):
        return iter(self.indices)

    def __len__(self) -> int:
        return len(self.indices)


def _unit_rows(m: HiddenMatrix, name: str) -> np.ndarray:
    rows = m.as_array().astype(np.float64)
    norms = np.linalg.norm(rows, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if len(zero):
        raise ZeroNormRow(name, int(zero[0]))
    return rows / norms[:, None]


def _pair_dots(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All pairwise dot products, each reduced independently.

    Every (i, j) entry is summed over its own contiguous length-d slice,
    so the accumulation order depends only on d, never on where the pair
    sits in the output. BLAS matmul kernels do not guarantee that: their
    edge-column tiles accumulate differently, which can flip the last
    bit of a dot product when rows are permuted. Chunked over draft rows
    to keep the broadcast temporary small.
    """
    out = np.empty((a.shape[0], b.shape[0]))
    chunk = max(1, 1_048_576 // max(1, b.shape[0] * a.shape[1]))
    for start in range(0, a.shape[0], chunk):
        block = a[start : start + chunk]
        out[start : start + chunk] = (block[:, None, :] * b[None, :, :]).sum(axis=2)
    return out


def cosine_matrix(draft_hidden: HiddenMatrix, visual_hidden: HiddenMatrix) -> np.ndarray:
    """K x l_v cosine similarities, accumulated in double precision.

    Entries are clamped to [-1, 1] so downstream means stay in range
    even when rounding nudges a similarity past unity.
    """
    if draft_hidden.cols != visual_hidden.cols:
        raise DomainError(
            f"hidden dimension mismatch: draft cols={draft_hidden.cols}, "
            f"visual cols={visual_hidden.cols}"
        )
    d_unit = _unit_rows(draft_hidden, "draft_hidden")
    v_unit = _unit_rows(visual_hidden, "visual_hidden")
    cos = _pair_dots(d_unit, v_unit)
    np.clip(cos, -1.0, 1.0, out=cos)
    return cos


def _top_n_means(cos: np.ndarray, top_n: int) -> np.ndarray:
    if top_n < 1:
        raise DomainError(f"top_n must be >= 1, got {top_n}")
    n = min(top_n, cos.shape[1])
    ordered = np.sort(cos, axis=1)
    return ordered[:, cos.shape[1] - n :].mean(axis=1)


def visual_relevance(
    draft_hidden: HiddenMatrix, visual_hidden: HiddenMatrix, top_n: int
) -> RelevanceScores:
    """Score each draft position by the mean of its top-N cosines.

    top_n larger than the number of visual rows clamps to all rows.
    """
    if visual_hidden.rows < 1:
        raise DomainError("visual_hidden has no rows to score against")
    cos = cosine_matrix(draft_hidden, visual_hidden)
    return RelevanceScores(_top_n_means(cos, top_n))


class RelevanceScorer:
    """Caches the normalized visual rows for repeated per-step scoring."""

    def __init__(self, visual_hidden: HiddenMatrix) -> None:
        if visual_hidden.rows < 1:
            raise DomainError("visual_hidden has no rows to score against")
        self._v_unit = _unit_rows(visual_hidden, "visual_hidden")
        self._l_v = visual_hidden.rows

    def scores(self, draft_hidden: HiddenMatrix, top_n: int) -> RelevanceScores:
        if draft_hidden.cols != self._v_unit.shape[1]:
            raise DomainError(
                f"hidden dimension mismatch: draft cols={draft_hidden.cols}, "
                f"visual cols={self._v_unit.shape[1]}"
            )
        cos = _pair_dots(_unit_rows(draft_hidden, "draft_hidden"), self._v_unit)
        np.clip(cos, -1.0, 1.0, out=cos)
        return RelevanceScores(_top_n_means(cos, top_n))


def relaxed_count(lam: float, k: int) -> int:
    """round(lam * k), halves away from zero, evaluated in double precision."""
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda must lie in [0, 1], got {lam}")
    if not 1 <= k <= MAX_DRAFT_LEN:
        raise DomainError(f"k must lie in [1, {MAX_DRAFT_LEN}], got {k}")
    return int(math.floor(lam * k + 0.5))


def relaxed_indices(
    scores: Union[RelevanceScores, Sequence[float], np.ndarray], lam: float
) -> RelaxedIndexSet:
    """The round(lam*K) lowest-scoring positions; score ties keep the
    lower position index first (stable ascending order)."""
    values = scores.values if isinstance(scores, RelevanceScores) else np.asarray(scores, np.float64)
    k = len(values)
    m = relaxed_count(lam, k)
    order = np.argsort(values, kind="stable")
    return RelaxedIndexSet(indices=tuple(int(i) for i in order[:m]))
