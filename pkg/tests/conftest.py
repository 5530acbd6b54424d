"""Shared builders and deterministic property-testing setup."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from loosespec import DecodeStep, HiddenMatrix, Trace, TraceHeader

settings.register_profile(
    "deterministic",
    derandomize=True,
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("deterministic")


def rank_auc(scores, labels) -> float:
    """Mann-Whitney AUC: probability a positive outranks a negative."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels, dtype=bool)
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    ranks[order] = np.arange(1, len(scores) + 1)
    n1 = int(pos.sum())
    n0 = len(scores) - n1
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def unit_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """Random unit rows; float32, never zero-norm."""
    m = rng.normal(size=(rows, cols))
    m /= np.linalg.norm(m, axis=1, keepdims=True)
    return m.astype(np.float32)


def make_hidden(rows: int, cols: int, seed: int = 0) -> HiddenMatrix:
    return HiddenMatrix.from_rows(unit_rows(np.random.default_rng(seed), rows, cols))


def make_step(
    draft,
    target,
    step_index: int = 0,
    branch: int = 0,
    d: int = 2,
    entropy=None,
    labels=None,
    hidden: HiddenMatrix = None,
    seed: int = 0,
):
    k = len(draft)
    if hidden is None:
        hidden = make_hidden(k, d, seed=seed)
    return DecodeStep(
        step_index=step_index,
        draft_ids=draft,
        target_ids=target,
        draft_hidden=hidden,
        branch=branch,
        target_entropy=entropy,
        relevance_labels=labels,
    )


def make_trace(steps, d: int = 2, l_v: int = 2, latencies=None, seed: int = 1, branches: int = 1):
    header = TraceHeader(
        d=d,
        l_v=l_v,
        latency_t_t=latencies[0] if latencies else None,
        latency_t_d=latencies[1] if latencies else None,
        latency_t_t_k=latencies[2] if latencies else None,
    )
    return Trace(
        header=header,
        visual_hidden=make_hidden(l_v, d, seed=seed),
        steps=tuple(steps),
        branches_per_step=branches,
    )


def random_trace(
    rng: np.random.Generator,
    max_steps: int = 6,
    max_k: int = 8,
    d: int = 3,
    l_v: int = 3,
    tree: bool = False,
    with_entropy: bool = True,
    with_labels: bool = False,
    with_texts: bool = False,
    match_rate: float = 0.6,
    shift_rate: float = 0.3,
) -> Trace:
    """One seeded valid trace with a mix of matches, shifts, and fresh ids."""
    n_steps = int(rng.integers(1, max_steps + 1))
    steps = []
    for s in range(n_steps):
        k = int(rng.integers(1, max_k + 1))
        for branch in range(2 if tree else 1):
            draft = rng.integers(0, 40, size=k).astype(np.int64)
            target = draft.copy()
            mism = rng.random(k) >= match_rate
            for i in np.flatnonzero(mism):
                if k > 1 and rng.random() < shift_rate:
                    j = int(rng.integers(0, k - 1))
                    target[i] = draft[j + 1 if j >= i else j]
                else:
                    target[i] = int(rng.integers(1000, 2000))
            texts = None
            if with_texts:
                texts = [chr(97 + int(t) % 26) if rng.random() < 0.8 else None for t in draft]
            steps.append(
                DecodeStep(
                    step_index=s,
                    draft_ids=draft,
                    target_ids=target,
                    draft_hidden=HiddenMatrix.from_rows(unit_rows(rng, k, d)),
                    branch=branch,
                    draft_texts=texts,
                    target_texts=texts,
                    target_entropy=rng.exponential(0.2, size=k) if with_entropy else None,
                    relevance_labels=(rng.random(k) < 0.4) if with_labels else None,
                )
            )
    header = TraceHeader(d=d, l_v=l_v, seed=int(rng.integers(0, 2**31)))
    return Trace(
        header=header,
        visual_hidden=HiddenMatrix.from_rows(unit_rows(rng, l_v, d)),
        steps=tuple(steps),
        branches_per_step=2 if tree else 1,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)
