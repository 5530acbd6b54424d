"""Line-delimited JSON trace files.

The on-disk format is documented normatively in docs/trace-format.md.
One record per line, UTF-8, in fixed order: header, visual_hidden, zero
or more steps, end. The end record carries a CRC-32 (lowercase hex) over
the bytes of every earlier line, each including its trailing newline.

Readers work line by line: at no point is more than one step record held
in memory beyond the visual matrix, so arbitrarily long traces stream.
Writers are append-friendly for live export: open, write steps as they
happen, finish.
"""
from __future__ import annotations

import base64
import binascii
import io
import json
import os
import zlib
from dataclasses import replace
from typing import IO, Iterator, Optional, Union

import numpy as np

from .domain import (
    ENCODING_F32,
    ENCODING_JSON,
    ENCODINGS,
    FORMAT_VERSION,
    DecodeStep,
    HiddenMatrix,
    Trace,
    TraceHeader,
    validate_trace,
)
from .errors import (
    ChecksumMismatch,
    DomainError,
    EncodingError,
    ParseError,
    ValidationFailed,
    VersionUnsupported,
)

Source = Union[str, os.PathLike, IO]


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def _reject_constant(name: str):
    raise ValueError(f"non-finite JSON number {name}")


# ---------------------------------------------------------------------------
# matrix payload encoding
# ---------------------------------------------------------------------------


def _encode_matrix(m: HiddenMatrix, encoding: str, where: str) -> dict:
    values = m.values
    if len(values) and not np.isfinite(values).all():
        flat = int(np.flatnonzero(~np.isfinite(values))[0])
        row = flat // m.cols if m.cols > 0 else flat
        raise EncodingError(f"non-finite value in {where}, row {row}")
    if encoding == ENCODING_F32:
        data = base64.b64encode(np.ascontiguousarray(values, dtype="<f4").tobytes()).decode("ascii")
    else:
        data = [[float(x) for x in row] for row in values.reshape(m.rows, m.cols)]
    return {"rows": m.rows, "cols": m.cols, "data": data}


def _decode_matrix(obj, encoding: str, line_no: int, where: str) -> HiddenMatrix:
    if not isinstance(obj, dict):
        raise ParseError(line_no, f"{where} must be an object")
    try:
        rows = obj["rows"]
        cols = obj["cols"]
        data = obj["data"]
    except KeyError as e:
        raise ParseError(line_no, f"{where} missing field {e.args[0]!r}") from None
    if not isinstance(rows, int) or not isinstance(cols, int) or isinstance(rows, bool) or isinstance(cols, bool):
        raise ParseError(line_no, f"{where} rows/cols must be integers")
    if encoding == ENCODING_F32:
        if not isinstance(data, str):
            raise ParseError(line_no, f"{where} data must be a base64 string under {ENCODING_F32}")
        try:
            raw = base64.b64decode(data.encode("ascii"), validate=True)
        except (binascii.Error, UnicodeEncodeError) as e:
            raise ParseError(line_no, f"{where} data is not valid base64: {e}") from None
        if len(raw) != max(rows, 0) * max(cols, 0) * 4:
            raise ParseError(
                line_no,
                f"{where} data holds {len(raw)} bytes, shape {rows}x{cols} needs {rows * cols * 4}",
            )
        values = np.frombuffer(raw, dtype="<f4").astype(np.float32, copy=False)
    else:
        if not isinstance(data, list):
            raise ParseError(line_no, f"{where} data must be nested lists under {ENCODING_JSON}")
        try:
            values = np.asarray(data, dtype=np.float32)
        except (TypeError, ValueError) as e:
            raise ParseError(line_no, f"{where} data is not numeric: {e}") from None
        if values.shape != (rows, cols):
            raise ParseError(
                line_no, f"{where} data has shape {values.shape}, declared {rows}x{cols}"
            )
        values = values.ravel()
    return HiddenMatrix(rows=rows, cols=cols, values=values)


def _int_list(obj, line_no: int, field_name: str) -> list:
    if not isinstance(obj, list) or any(isinstance(x, bool) or not isinstance(x, int) for x in obj):
        raise ParseError(line_no, f"{field_name} must be a list of integers")
    return obj


def _text_list(obj, line_no: int, field_name: str) -> list:
    if not isinstance(obj, list) or any(x is not None and not isinstance(x, str) for x in obj):
        raise ParseError(line_no, f"{field_name} must be a list of strings or nulls")
    return obj


# ---------------------------------------------------------------------------
# writer
# ---------------------------------------------------------------------------


class TraceWriter:
    """Streams one trace to a file, accumulating the checksum as it goes."""

    def __init__(self, dest: IO, header: TraceHeader, visual_hidden: HiddenMatrix) -> None:
        if header.encoding not in ENCODINGS:
            raise DomainError(f"unknown encoding {header.encoding!r}")
        self._fp = dest
        self._binary = not isinstance(dest, io.TextIOBase)
        self._crc = 0
        self._bytes = 0
        self._steps = 0
        self._finished = False
        self._encoding = header.encoding
        self._write_record(self._header_record(header))
        self._write_record(
            {"type": "visual_hidden", **_encode_matrix(visual_hidden, self._encoding, "visual_hidden")}
        )

    @staticmethod
    def _header_record(h: TraceHeader) -> dict:
        rec = {
            "type": "header",
            "version": h.format_version,
            "d": h.d,
            "l_v": h.l_v,
            "encoding": h.encoding,
        }
        if h.model_names is not None:
            rec["model_names"] = list(h.model_names)
        latencies = {}
        if h.latency_t_t is not None:
            latencies["t_t"] = h.latency_t_t
        if h.latency_t_d is not None:
            latencies["t_d"] = h.latency_t_d
        if h.latency_t_t_k is not None:
            latencies["t_t_k"] = h.latency_t_t_k
        if latencies:
            rec["latencies"] = latencies
        if h.seed is not None:
            rec["seed"] = h.seed
        return rec

    def _write_line(self, line: str, hashed: bool) -> None:
        data = (line + "\n").encode("utf-8")
        if hashed:
            self._crc = zlib.crc32(data, self._crc)
        self._bytes += len(data)
        if self._binary:
            self._fp.write(data)
        else:
            self._fp.write(line + "\n")

    def _write_record(self, rec: dict, hashed: bool = True) -> None:
        if self._finished:
            raise DomainError("writer already finished")
        self._write_line(_dumps(rec), hashed)

    def write_step(self, step: DecodeStep) -> None:
        if len(step.target_ids) != step.k or step.draft_hidden.rows != step.k:
            raise DomainError(
                f"step {step.step_index}: draft/target/hidden lengths disagree "
                f"({step.k}/{len(step.target_ids)}/{step.draft_hidden.rows})"
            )
        rec = {
            "type": "step",
            "s": step.step_index,
            "branch": step.branch,
            "draft_ids": step.draft_ids.tolist(),
        }
        if step.draft_texts is not None:
            rec["draft_texts"] = list(step.draft_texts)
        rec["target_ids"] = step.target_ids.tolist()
        if step.target_texts is not None:
            rec["target_texts"] = list(step.target_texts)
        rec["draft_hidden"] = _encode_matrix(
            step.draft_hidden, self._encoding, f"steps[{self._steps}].draft_hidden"
        )
        if step.target_entropy is not None:
            ent = step.target_entropy
            if len(ent) and not np.isfinite(ent).all():
                raise EncodingError(f"non-finite entropy in steps[{self._steps}]")
            rec["target_entropy"] = [float(x) for x in ent]
        if step.relevance_labels is not None:
            rec["relevance_labels"] = [bool(x) for x in step.relevance_labels]
        self._write_record(rec)
        self._steps += 1

    def finish(self) -> int:
        """Write the end record; returns total bytes written."""
        if not self._finished:
            end = {"type": "end", "steps": self._steps, "checksum": f"{self._crc:08x}"}
            self._write_record(end, hashed=False)
            self._finished = True
        return self._bytes

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.finish()


def write_trace(trace: Trace, destination: Source, encoding: Optional[str] = None) -> int:
    """Serialize a trace; returns the byte count written.

    `encoding` overrides the header's; the written header always names
    the encoding actually used, so a read-back trace rewrites
    byte-identically.
    """
    enc = encoding if encoding is not None else trace.header.encoding
    header = replace(trace.header, encoding=enc)
    own = isinstance(destination, (str, os.PathLike))
    fp = open(destination, "wb") if own else destination
    try:
        writer = TraceWriter(fp, header, trace.visual_hidden)
        for step in trace.steps:
            writer.write_step(step)
        return writer.finish()
    finally:
        if own:
            fp.close()


# ---------------------------------------------------------------------------
# reader
# ---------------------------------------------------------------------------


class TraceReader:
    """Streaming reader: header and visual matrix up front, then steps.

    Iterate `steps()` to exhaustion; the end record's checksum and step
    count are verified when it is reached. `branches_per_step` is known
    once iteration finishes.
    """

    def __init__(self, source: Source) -> None:
        self._own = isinstance(source, (str, os.PathLike))
        self._fp = open(source, "rb") if self._own else source
        self._line_no = 0
        self._crc = 0
        self._done = False
        self._steps_seen = 0
        self._saw_branch_one = False
        header_rec = self._next_record(expect="header")
        self.header = self._parse_header(header_rec)
        visual_rec = self._next_record(expect="visual_hidden")
        self.visual_hidden = _decode_matrix(
            visual_rec, self.header.encoding, self._line_no, "visual_hidden"
        )

    # -- raw line handling --------------------------------------------------

    def _read_line(self) -> Optional[bytes]:
        raw = self._fp.readline()
        if isinstance(raw, str):
            raw = raw.encode("utf-8")
        if raw == b"":
            return None
        self._line_no += 1
        return raw

    def _next_record(self, expect: Optional[str] = None) -> dict:
        raw = self._read_line()
        if raw is None:
            raise ParseError(self._line_no + 1, "unexpected end of file (no end record)")
        stripped = raw.rstrip(b"\n")
        if not stripped:
            raise ParseError(self._line_no, "empty line")
        try:
            text = stripped.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(self._line_no, f"invalid UTF-8: {e}") from None
        try:
            rec = json.loads(text, parse_constant=_reject_constant)
        except ValueError as e:
            raise ParseError(self._line_no, f"not a JSON record: {e}") from None
        if not isinstance(rec, dict) or "type" not in rec:
            raise ParseError(self._line_no, "record must be an object with a 'type' field")
        if rec["type"] != "end":
            self._crc = zlib.crc32(raw if raw.endswith(b"\n") else raw + b"\n", self._crc)
        if expect is not None and rec["type"] != expect:
            raise ParseError(self._line_no, f"expected a {expect} record, got {rec['type']!r}")
        return rec

    # -- record parsing -----------------------------------------------------

    def _parse_header(self, rec: dict) -> TraceHeader:
        version = rec.get("version")
        if version != FORMAT_VERSION:
            raise VersionUnsupported(version)
        for field_name in ("d", "l_v", "encoding"):
            if field_name not in rec:
                raise ParseError(self._line_no, f"header missing field {field_name!r}")
        if rec["encoding"] not in ENCODINGS:
            raise ParseError(self._line_no, f"unsupported encoding {rec['encoding']!r}")
        latencies = rec.get("latencies", {})
        if not isinstance(latencies, dict):
            raise ParseError(self._line_no, "header latencies must be an object")
        model_names = rec.get("model_names")
        if model_names is not None:
            model_names = _text_list(model_names, self._line_no, "model_names")
            if any(m is None for m in model_names):
                raise ParseError(self._line_no, "model_names entries must be strings")
        return TraceHeader(
            d=rec["d"],
            l_v=rec["l_v"],
            encoding=rec["encoding"],
            format_version=version,
            model_names=tuple(model_names) if model_names is not None else None,
            latency_t_t=latencies.get("t_t"),
            latency_t_d=latencies.get("t_d"),
            latency_t_t_k=latencies.get("t_t_k"),
            seed=rec.get("seed"),
        )

    def _parse_step(self, rec: dict) -> DecodeStep:
        line_no = self._line_no
        for field_name in ("s", "branch", "draft_ids", "target_ids", "draft_hidden"):
            if field_name not in rec:
                raise ParseError(line_no, f"step missing field {field_name!r}")
        draft_ids = _int_list(rec["draft_ids"], line_no, "draft_ids")
        target_ids = _int_list(rec["target_ids"], line_no, "target_ids")
        hidden = _decode_matrix(rec["draft_hidden"], self.header.encoding, line_no, "draft_hidden")
        draft_texts = rec.get("draft_texts")
        if draft_texts is not None:
            draft_texts = _text_list(draft_texts, line_no, "draft_texts")
        target_texts = rec.get("target_texts")
        if target_texts is not None:
            target_texts = _text_list(target_texts, line_no, "target_texts")
        entropy = rec.get("target_entropy")
        if entropy is not None:
            if not isinstance(entropy, list) or any(
                isinstance(x, bool) or not isinstance(x, (int, float)) for x in entropy
            ):
                raise ParseError(line_no, "target_entropy must be a list of numbers")
        labels = rec.get("relevance_labels")
        if labels is not None:
            if not isinstance(labels, list) or any(not isinstance(x, bool) for x in labels):
                raise ParseError(line_no, "relevance_labels must be a list of booleans")
        branch = rec["branch"]
        if isinstance(branch, bool) or not isinstance(branch, int):
            raise ParseError(line_no, "branch must be an integer")
        s = rec["s"]
        if isinstance(s, bool) or not isinstance(s, int):
            raise ParseError(line_no, "s must be an integer")
        if branch == 1:
            self._saw_branch_one = True
        return DecodeStep(
            step_index=s,
            draft_ids=draft_ids,
            target_ids=target_ids,
            draft_hidden=hidden,
            branch=branch,
            draft_texts=draft_texts,
            target_texts=target_texts,
            target_entropy=entropy,
            relevance_labels=labels,
        )

    def _finish(self, rec: dict) -> None:
        declared = rec.get("steps")
        if isinstance(declared, bool) or not isinstance(declared, int):
            raise ParseError(self._line_no, "end record must declare an integer step count")
        if declared != self._steps_seen:
            raise ParseError(
                self._line_no,
                f"end record declares {declared} steps, file holds {self._steps_seen}",
            )
        checksum = rec.get("checksum")
        if not isinstance(checksum, str):
            raise ParseError(self._line_no, "end record must declare a checksum string")
        actual = f"{self._crc:08x}"
        if checksum.lower() != actual:
            raise ChecksumMismatch(checksum, actual)
        trailing = self._read_line()
        if trailing is not None and trailing.strip():
            raise ParseError(self._line_no, "content after the end record")
        self._done = True

    def steps(self) -> Iterator[DecodeStep]:
        while True:
            rec = self._next_record()
            if rec["type"] == "step":
                self._steps_seen += 1
                yield self._parse_step(rec)
            elif rec["type"] == "end":
                self._finish(rec)
                return
            else:
                raise ParseError(self._line_no, f"unexpected record type {rec['type']!r}")

    @property
    def branches_per_step(self) -> int:
        return 2 if self._saw_branch_one else 1

    def close(self) -> None:
        if self._own:
            self._fp.close()

    def __enter__(self) -> "TraceReader":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()


def read_trace(source: Source) -> Trace:
    """Parse, checksum-verify, and validate a trace file.

    Raises ValidationFailed (carrying every violation) when the parsed
    trace breaks domain invariants.
    """
    with TraceReader(source) as reader:
        steps = tuple(reader.steps())
        trace = Trace(
            header=reader.header,
            visual_hidden=reader.visual_hidden,
            steps=steps,
            branches_per_step=reader.branches_per_step,
        )
    violations = validate_trace(trace)
    if violations:
        raise ValidationFailed(violations)
    return trace
