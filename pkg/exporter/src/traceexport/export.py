"""Greedy speculative decode of a model pair, captured step by step.

Per step: the draft proposes K tokens autoregressively, the target
verifies all K in one forward pass, and the trace records the drafted
ids, the target's ids at the same positions, the target final-layer
hidden states of the K draft positions (taken from that verification
forward, no extra pass), and the target distribution's Shannon entropy
in nats per position. The visual-position hidden states are captured
once, from the target's prefill forward, before any drafting.

Context advancement is strict regardless of any loose strategy under
study: the longest exact-match prefix survives, plus the target's
correction token when the prefix is shorter than K. That keeps the
trace strategy-neutral; every replayed strategy then sees identical
inputs per step. Cross-step divergence under loose acceptance is out of
scope by design and is the documented fidelity gap between replay and
live loose decoding.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import IO, Optional, Tuple, Union

import numpy as np

from . import tokenizer
from .errors import ExportError
from .models import N_CTX, VideoModel
from .writer import TraceFileWriter

Destination = Union[str, os.PathLike, IO]


@dataclass
class ExportSession:
    """One target/draft pairing over one clip and prompt."""

    target: VideoModel
    draft: VideoModel
    frames: np.ndarray
    prompt: str
    k: int
    l_v: int
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ExportError(f"k must be >= 1, got {self.k}")
        if (self.target.vocab_in, self.target.vocab_out) != (self.draft.vocab_in, self.draft.vocab_out):
            raise ExportError(
                "draft and target must share a vocabulary: "
                f"{self.target.name} has {self.target.vocab_in}/{self.target.vocab_out}, "
                f"{self.draft.name} has {self.draft.vocab_in}/{self.draft.vocab_out}"
            )


@dataclass
class ExportResult:
    steps: int
    taus: Tuple[int, ...]
    emitted_ids: Tuple[int, ...]
    bytes_written: int

    @property
    def mean_tau(self) -> float:
        return sum(self.taus) / len(self.taus) if self.taus else 0.0


class _ModelContext:
    """Token ids plus per-model embeddings; visual slots come from the
    model's own projector, everything else from its token table."""

    def __init__(self, model: VideoModel, frames: np.ndarray, prompt_ids, l_v: int) -> None:
        self._model = model
        visual = model.projector.rows(frames, l_v)
        self.ids = [tokenizer.BOS] + [tokenizer.VIS] * l_v + list(prompt_ids)
        rows = [model.decoder.tok_emb[tokenizer.BOS]]
        rows.extend(visual)
        rows.extend(model.decoder.tok_emb[i] for i in prompt_ids)
        self._embeds = np.vstack(rows)

    def __len__(self) -> int:
        return len(self.ids)

    def forward_with(self, extra_ids) -> tuple:
        emb = self._model.decoder.tok_emb[list(extra_ids)] if len(extra_ids) else None
        stacked = self._embeds if emb is None else np.vstack([self._embeds, emb])
        return self._model.decoder.forward(stacked)

    def append(self, ids) -> None:
        self.ids.extend(int(i) for i in ids)
        self._embeds = np.vstack([self._embeds, self._model.decoder.tok_emb[list(ids)]])


def _entropy_nats(logits: np.ndarray) -> np.ndarray:
    p = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    terms = np.where(p > 0.0, -p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return terms.sum(axis=-1)


def export_generation(
    session: ExportSession, max_new_tokens: int, destination: Destination,
    latencies: Optional[dict] = None,
) -> ExportResult:
    """Run the decode loop and write a conformant trace.

    Stops when at least max_new_tokens tokens have been committed (the
    final step may overshoot by up to K) or when another full K-token
    step would no longer fit the context window; every written step has
    exactly K positions.
    """
    if max_new_tokens < 1:
        raise ExportError(f"max_new_tokens must be >= 1, got {max_new_tokens}")
    k = session.k
    prompt_ids = tokenizer.encode(session.prompt)
    target_ctx = _ModelContext(session.target, session.frames, prompt_ids, session.l_v)
    draft_ctx = _ModelContext(session.draft, session.frames, prompt_ids, session.l_v)
    if len(target_ctx) + k > N_CTX:
        raise ExportError(
            f"prompt plus {session.l_v} visual rows leaves no room for a {k}-token step"
        )

    # prefill: H_V is the target's final-layer hidden at the visual span
    hidden, _ = target_ctx.forward_with([])
    h_v = hidden[1 : 1 + session.l_v]

    own = isinstance(destination, (str, os.PathLike))
    fp = open(destination, "wb") if own else destination
    taus = []
    emitted = []
    try:
        writer = TraceFileWriter(
            fp,
            d=session.target.d,
            l_v=session.l_v,
            visual=h_v,
            model_names=[
                f"target={session.target.name}",
                f"draft={session.draft.name}",
                "h_d=verification-forward",
            ],
            latencies=latencies,
            seed=session.seed,
        )
        produced = 0
        while produced < max_new_tokens and len(target_ctx) + k <= N_CTX:
            t = len(target_ctx)
            draft_ids = []
            for _ in range(k):
                _, logits = draft_ctx.forward_with(draft_ids)
                draft_ids.append(int(np.argmax(logits[-1])))

            hidden, logits = target_ctx.forward_with(draft_ids)
            # logits at position p predict token p+1: the verdict for
            # draft position i lives at t - 1 + i
            verify = logits[t - 1 : t - 1 + k]
            target_ids = [int(np.argmax(row)) for row in verify]
            h_d = hidden[t : t + k]

            tau = k
            for i in range(k):
                if draft_ids[i] != target_ids[i]:
                    tau = i
                    break
            writer.write_step(
                s=len(taus),
                draft_ids=draft_ids,
                target_ids=target_ids,
                draft_hidden=h_d,
                draft_texts=[tokenizer.text_of(i) for i in draft_ids],
                target_texts=[tokenizer.text_of(i) for i in target_ids],
                target_entropy=_entropy_nats(verify),
            )
            taus.append(tau)

            step_emit = draft_ids[:tau] + ([target_ids[tau]] if tau < k else [])
            target_ctx.append(step_emit)
            draft_ctx.append(step_emit)
            emitted.extend(step_emit)
            produced += len(step_emit)
        nbytes = writer.finish()
    finally:
        if own:
            fp.close()
    return ExportResult(
        steps=len(taus), taus=tuple(taus), emitted_ids=tuple(emitted), bytes_written=nbytes
    )
