"""A tiny deterministic decoder family for exercising the export path.

Models are pure numpy, float64 on CPU, with weights drawn once from a
seed derived from the model's name, so "loading" a model is a pure
function of its name on every platform. The family exists to drive the
exporter end to end (visual prefill, drafting, batched verification,
hidden-state capture) without checkpoints; a real model pair plugs in by
implementing the same three methods (visual_rows, embed, forward) over a
shared tokenizer.

Names follow ``toy-d{width}-l{layers}``, e.g. ``toy-d32-l2``. Weights
are seeded per component (embeddings, each layer, head) keyed by the
width alone, so ``toy-d32-l1`` is an exact truncation of ``toy-d32-l2``:
a natural draft/target pair whose predictions correlate without
matching, the way a distilled drafter shadows its target.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .errors import ExportError
from .tokenizer import VOCAB_IN, VOCAB_OUT

N_CTX = 256
FRAME_DIM = 48
MAX_VISUAL_ROWS = 64

_NAME = re.compile(r"^toy-d(?P<d>\d+)-l(?P<layers>\d+)$")


def _name_seed(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _component_rng(d: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(_name_seed(f"toy-d{d}/{tag}"))


# residual branches are damped so each extra layer is a moderate
# perturbation of the truncated model underneath it
RES_SCALE = 0.35


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TinyDecoder:
    """Single-head causal transformer; forward returns final-layer hidden
    states and next-token logits for every position."""

    name: str
    d: int
    n_layers: int
    tok_emb: np.ndarray = field(repr=False)
    pos_emb: np.ndarray = field(repr=False)
    layers: List[Dict[str, np.ndarray]] = field(repr=False)
    ln_f: Dict[str, np.ndarray] = field(repr=False)
    head: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, name: str, d: int, n_layers: int) -> "TinyDecoder":
        # per-component rngs with a fixed draw order inside each; the
        # order is part of the model identity
        s = d**-0.5
        layers = []
        for j in range(n_layers):
            rng = _component_rng(d, f"layer{j}")
            layers.append(
                {
                    "ln1_g": np.ones(d),
                    "ln1_b": np.zeros(d),
                    "wq": rng.normal(0.0, s, (d, d)),
                    "wk": rng.normal(0.0, s, (d, d)),
                    "wv": rng.normal(0.0, s, (d, d)),
                    "wo": rng.normal(0.0, s * RES_SCALE, (d, d)),
                    "ln2_g": np.ones(d),
                    "ln2_b": np.zeros(d),
                    "w1": rng.normal(0.0, s, (d, 4 * d)),
                    "b1": np.zeros(4 * d),
                    "w2": rng.normal(0.0, (4 * d) ** -0.5 * RES_SCALE, (4 * d, d)),
                    "b2": np.zeros(d),
                }
            )
        emb_rng = _component_rng(d, "emb")
        return cls(
            name=name,
            d=d,
            n_layers=n_layers,
            tok_emb=emb_rng.normal(0.0, 0.5, (VOCAB_IN, d)),
            pos_emb=emb_rng.normal(0.0, 0.5, (N_CTX, d)),
            layers=layers,
            ln_f={"g": np.ones(d), "b": np.zeros(d)},
            head=_component_rng(d, "head").normal(0.0, s, (d, VOCAB_OUT)),
        )

    def forward(self, embeds: np.ndarray):
        """(T, d) input embeddings -> ((T, d) hidden, (T, vocab) logits)."""
        t = embeds.shape[0]
        if t > N_CTX:
            raise ExportError(f"sequence length {t} exceeds context window {N_CTX}")
        x = embeds + self.pos_emb[:t]
        mask = np.triu(np.full((t, t), -np.inf), k=1)
        for layer in self.layers:
            h = _layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            q = h @ layer["wq"]
            k = h @ layer["wk"]
            v = h @ layer["wv"]
            p = _softmax_rows(q @ k.T * self.d**-0.5 + mask)
            x = x + (p @ v) @ layer["wo"]
            h = _layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            x = x + np.tanh(h @ layer["w1"] + layer["b1"]) @ layer["w2"] + layer["b2"]
        hidden = _layer_norm(x, self.ln_f["g"], self.ln_f["b"])
        return hidden, hidden @ self.head


@dataclass
class Projector:
    """Maps video frames to visual embedding rows in the decoder's width."""

    w1: np.ndarray = field(repr=False)
    b1: np.ndarray = field(repr=False)
    w2: np.ndarray = field(repr=False)
    pos: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, d: int) -> "Projector":
        rng = _component_rng(d, "projector")
        return cls(
            w1=rng.normal(0.0, FRAME_DIM**-0.5, (FRAME_DIM, d)),
            b1=np.zeros(d),
            w2=rng.normal(0.0, d**-0.5, (d, d)),
            pos=rng.normal(0.0, 0.5, (MAX_VISUAL_ROWS, d)),
        )

    def rows(self, frames: np.ndarray, l_v: int) -> np.ndarray:
        if frames.ndim != 2 or frames.shape[1] != FRAME_DIM:
            raise ExportError(f"frames must be (n, {FRAME_DIM}), got {frames.shape}")
        if not 1 <= l_v <= MAX_VISUAL_ROWS:
            raise ExportError(f"l_v must be in [1, {MAX_VISUAL_ROWS}], got {l_v}")
        base = np.tanh(frames @ self.w1 + self.b1)
        idx = np.arange(l_v) % frames.shape[0]
        return np.tanh(base[idx] @ self.w2 + self.pos[:l_v])


@dataclass(frozen=True)
class VideoModel:
    """One loadable model: a decoder plus its frame projector."""

    name: str
    decoder: TinyDecoder
    projector: Projector

    @property
    def d(self) -> int:
        return self.decoder.d

    @property
    def vocab_in(self) -> int:
        return self.decoder.tok_emb.shape[0]

    @property
    def vocab_out(self) -> int:
        return self.decoder.head.shape[1]


def load_model(name: str) -> VideoModel:
    m = _NAME.match(name)
    if m is None:
        raise ExportError(f"unknown model name {name!r} (expected toy-d<width>-l<layers>)")
    d = int(m.group("d"))
    n_layers = int(m.group("layers"))
    if not 4 <= d <= 256 or not 1 <= n_layers <= 8:
        raise ExportError(f"model size out of range in {name!r}")
    return VideoModel(
        name=name, decoder=TinyDecoder.build(name, d, n_layers), projector=Projector.build(d)
    )


def make_video(seed: int, n_frames: int) -> np.ndarray:
    """Synthetic stand-in for a preprocessed clip: (n_frames, FRAME_DIM)."""
    if n_frames < 1:
        raise ExportError(f"n_frames must be >= 1, got {n_frames}")
    return np.random.default_rng(seed).normal(0.0, 0.7, (n_frames, FRAME_DIM))
