"""Trace-format writer, implemented from docs/trace-format.md alone.

Deliberately independent of the engine package: the file format is the
interface between the two, and writing it twice keeps the format
document honest. Only the f32le-base64 encoding is emitted. Canonical
serialization throughout (compact separators, fixed key order), so files
round-trip byte-identically through the engine's reader/writer.
"""
from __future__ import annotations

import base64
import json
import zlib
from typing import IO, Optional, Sequence

import numpy as np

from .errors import ExportError

ENCODING = "f32le-base64"


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def _matrix_payload(values, where: str) -> dict:
    # values beyond float32 range overflow to inf here on purpose; the
    # finiteness check below turns that into a clean error
    with np.errstate(over="ignore"):
        arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64).astype("<f4"))
    if arr.ndim != 2:
        raise ExportError(f"{where} must be 2-D, got shape {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise ExportError(f"non-finite value in {where} after float32 cast")
    data = base64.b64encode(arr.tobytes()).decode("ascii")
    return {"rows": int(arr.shape[0]), "cols": int(arr.shape[1]), "data": data}


class TraceFileWriter:
    """Streams header, visual rows, steps, and the checksummed end record."""

    def __init__(
        self,
        fp: IO[bytes],
        *,
        d: int,
        l_v: int,
        visual: np.ndarray,
        model_names: Optional[Sequence[str]] = None,
        latencies: Optional[dict] = None,
        seed: Optional[int] = None,
    ) -> None:
        self._fp = fp
        self._crc = 0
        self._bytes = 0
        self._steps = 0
        self._finished = False
        header = {"type": "header", "version": 1, "d": d, "l_v": l_v, "encoding": ENCODING}
        if model_names is not None:
            header["model_names"] = list(model_names)
        if latencies:
            ordered = {k: latencies[k] for k in ("t_t", "t_d", "t_t_k") if k in latencies}
            if ordered:
                header["latencies"] = ordered
        if seed is not None:
            header["seed"] = seed
        self._write(header)
        self._write({"type": "visual_hidden", **_matrix_payload(visual, "visual_hidden")})

    def _write(self, rec: dict, hashed: bool = True) -> None:
        if self._finished:
            raise ExportError("trace already finished")
        raw = (_dumps(rec) + "\n").encode("utf-8")
        if hashed:
            self._crc = zlib.crc32(raw, self._crc)
        self._bytes += len(raw)
        self._fp.write(raw)

    def write_step(
        self,
        *,
        s: int,
        draft_ids: Sequence[int],
        target_ids: Sequence[int],
        draft_hidden: np.ndarray,
        branch: int = 0,
        draft_texts: Optional[Sequence] = None,
        target_texts: Optional[Sequence] = None,
        target_entropy: Optional[Sequence[float]] = None,
        relevance_labels: Optional[Sequence[bool]] = None,
    ) -> None:
        rec = {
            "type": "step",
            "s": int(s),
            "branch": int(branch),
            "draft_ids": [int(x) for x in draft_ids],
        }
        if draft_texts is not None:
            rec["draft_texts"] = list(draft_texts)
        rec["target_ids"] = [int(x) for x in target_ids]
        if target_texts is not None:
            rec["target_texts"] = list(target_texts)
        rec["draft_hidden"] = _matrix_payload(draft_hidden, f"steps[{self._steps}].draft_hidden")
        if target_entropy is not None:
            ent = [float(x) for x in target_entropy]
            if not all(np.isfinite(ent)):
                raise ExportError(f"non-finite entropy in steps[{self._steps}]")
            rec["target_entropy"] = ent
        if relevance_labels is not None:
            rec["relevance_labels"] = [bool(x) for x in relevance_labels]
        self._write(rec)
        self._steps += 1

    def finish(self) -> int:
        """Append the end record; returns total bytes written."""
        if not self._finished:
            end = {"type": "end", "steps": self._steps, "checksum": f"{self._crc:08x}"}
            self._write(end, hashed=False)
            self._finished = True
        return self._bytes

    def __enter__(self) -> "TraceFileWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.finish()
