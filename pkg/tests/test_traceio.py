"""Serialization round trips and the failure taxonomy of the line format."""
import dataclasses
import io
import json
import zlib

import numpy as np
import pytest

from loosespec import (
    ChecksumMismatch,
    DecodeStep,
    DomainError,
    ENCODING_F32,
    ENCODING_JSON,
    EncodingError,
    HiddenMatrix,
    ParseError,
    Trace,
    TraceHeader,
    TraceReader,
    TraceWriter,
    ValidationFailed,
    VersionUnsupported,
    read_trace,
    write_trace,
)

from conftest import make_hidden, make_step, make_trace, random_trace


def to_bytes(trace, encoding=None):
    buf = io.BytesIO()
    write_trace(trace, buf, encoding=encoding)
    return buf.getvalue()


def from_bytes(raw):
    return read_trace(io.BytesIO(raw))


def edit_line(raw, index, fn):
    """Apply fn to line `index` (json text in, json text out)."""
    lines = raw.decode("utf-8").split("\n")
    lines[index] = fn(lines[index])
    return "\n".join(lines).encode("utf-8")


def test_empty_trace_is_three_lines():
    trace = make_trace([])
    raw = to_bytes(trace)
    assert raw.endswith(b"\n")
    assert raw.count(b"\n") == 3
    back = from_bytes(raw)
    assert back.steps == ()
    assert back.header == trace.header


def test_round_trip_identity_f32(rng):
    for _ in range(30):
        tree = bool(rng.integers(0, 2))
        trace = random_trace(
            rng,
            tree=tree,
            with_entropy=bool(rng.integers(0, 2)),
            with_labels=bool(rng.integers(0, 2)),
            with_texts=bool(rng.integers(0, 2)),
        )
        raw = to_bytes(trace)
        back = from_bytes(raw)
        assert back == trace
        assert to_bytes(back) == raw


def test_round_trip_json_numbers(rng):
    trace = random_trace(rng, with_texts=True, with_labels=True)
    raw = to_bytes(trace, encoding=ENCODING_JSON)
    back = from_bytes(raw)
    assert back.header.encoding == ENCODING_JSON
    for a, b in zip(back.steps, trace.steps):
        assert np.array_equal(a.draft_ids, b.draft_ids)
        assert np.array_equal(a.draft_hidden.values, b.draft_hidden.values)
        assert a.draft_texts == b.draft_texts
    # stable under rewrite even if not bit-faithful to arbitrary floats
    assert to_bytes(back) == raw


def test_header_survives_round_trip():
    trace = make_trace([make_step([1, 2], [1, 2])], latencies=(10.0, 1.0, 10.0))
    header = dataclasses.replace(trace.header, model_names=("target-x", "draft-y"), seed=42)
    trace = Trace(header=header, visual_hidden=trace.visual_hidden, steps=trace.steps)
    back = from_bytes(to_bytes(trace))
    assert back.header.model_names == ("target-x", "draft-y")
    assert back.header.seed == 42
    assert back.header.latency_t_d == 1.0
    assert back.header.has_latencies()


def test_canonical_layout():
    trace = make_trace([make_step([1], [1])])
    lines = to_bytes(trace).decode("utf-8").splitlines()
    assert lines[0].startswith('{"type":"header","version":1,"d":')
    assert lines[1].startswith('{"type":"visual_hidden","rows":')
    assert lines[2].startswith('{"type":"step","s":0,"branch":0,"draft_ids":[1],"target_ids":[1],')
    assert lines[3].startswith('{"type":"end","steps":1,"checksum":"')
    assert " " not in lines[0]


def test_checksum_is_crc32_of_preceding_lines():
    trace = make_trace([make_step([3, 4], [3, 9])])
    raw = to_bytes(trace)
    body, end_line, tail = raw.rpartition(b'{"type":"end"')
    declared = json.loads((end_line + tail).decode("utf-8"))["checksum"]
    assert declared == f"{zlib.crc32(body):08x}"


def test_byte_count_matches_output():
    trace = make_trace([make_step([1, 2, 3], [1, 2, 3])])
    buf = io.BytesIO()
    n = write_trace(trace, buf)
    assert n == len(buf.getvalue())


def test_text_file_destination(tmp_path):
    trace = make_trace([make_step([5], [5])])
    p = tmp_path / "t.jsonl"
    with open(p, "w", encoding="utf-8") as fp:
        write_trace(trace, fp)
    assert read_trace(p) == trace
    q = tmp_path / "u.jsonl"
    write_trace(trace, q)
    assert q.read_bytes() == p.read_bytes()


def test_writer_streams_and_context_manager(tmp_path):
    steps = [make_step([1, 2], [1, 2], step_index=i) for i in range(3)]
    trace = make_trace(steps)
    buf = io.BytesIO()
    with TraceWriter(buf, trace.header, trace.visual_hidden) as w:
        for s in steps:
            w.write_step(s)
    assert from_bytes(buf.getvalue()) == trace


def test_writer_rejects_after_finish():
    trace = make_trace([])
    buf = io.BytesIO()
    w = TraceWriter(buf, trace.header, trace.visual_hidden)
    w.finish()
    with pytest.raises(DomainError):
        w.write_step(make_step([1], [1]))


def test_writer_rejects_length_disagreement():
    buf = io.BytesIO()
    trace = make_trace([])
    w = TraceWriter(buf, trace.header, trace.visual_hidden)
    bad = DecodeStep(
        step_index=0,
        draft_ids=[1, 2],
        target_ids=[1],
        draft_hidden=make_hidden(2, 2),
    )
    with pytest.raises(DomainError):
        w.write_step(bad)


def test_writer_rejects_unknown_encoding():
    trace = make_trace([])
    header = dataclasses.replace(trace.header, encoding="zip")
    with pytest.raises(DomainError):
        TraceWriter(io.BytesIO(), header, trace.visual_hidden)


def test_nonfinite_hidden_named_in_error():
    bad = HiddenMatrix(rows=2, cols=2, values=np.array([0, 1, np.nan, 3], np.float32))
    step = DecodeStep(step_index=0, draft_ids=[1, 2], target_ids=[1, 2], draft_hidden=bad)
    trace = make_trace([step])
    for enc in (ENCODING_F32, ENCODING_JSON):
        with pytest.raises(EncodingError, match="row 1"):
            to_bytes(trace, encoding=enc)


def test_nonfinite_entropy_rejected():
    step = make_step([1], [1], entropy=[np.inf])
    with pytest.raises(EncodingError, match="entropy"):
        to_bytes(make_trace([step]))


# -- reader failure taxonomy ------------------------------------------------------


def valid_raw(n_steps=2, **kw):
    steps = [make_step([1, 2, 3], [1, 2, 9], step_index=i) for i in range(n_steps)]
    return to_bytes(make_trace(steps, **kw))


def test_version_gate():
    raw = edit_line(valid_raw(), 0, lambda l: l.replace('"version":1', '"version":2'))
    with pytest.raises(VersionUnsupported) as exc:
        from_bytes(raw)
    assert exc.value.version == 2
    assert "2" in str(exc.value)


def test_unknown_encoding_in_header():
    raw = edit_line(
        valid_raw(), 0, lambda l: l.replace('"encoding":"f32le-base64"', '"encoding":"zip"')
    )
    with pytest.raises(ParseError, match="encoding"):
        from_bytes(raw)


def test_header_missing_field():
    raw = valid_raw()
    lines = raw.decode("utf-8").split("\n")
    rec = json.loads(lines[0])
    del rec["d"]
    lines[0] = json.dumps(rec, separators=(",", ":"))
    with pytest.raises(ParseError, match="'d'"):
        from_bytes("\n".join(lines).encode("utf-8"))


def test_step_where_visual_expected():
    raw = valid_raw()
    lines = raw.decode("utf-8").split("\n")
    del lines[1]
    with pytest.raises(ParseError, match="expected a visual_hidden record"):
        from_bytes("\n".join(lines).encode("utf-8"))


def test_truncated_file():
    raw = valid_raw()
    lines = raw.decode("utf-8").split("\n")
    truncated = "\n".join(lines[:-2]) + "\n"
    with pytest.raises(ParseError, match="end record"):
        from_bytes(truncated.encode("utf-8"))


def test_checksum_mismatch_carries_both_sums():
    raw = valid_raw()
    lines = raw.decode("utf-8").split("\n")
    rec = json.loads(lines[-2])
    good = rec["checksum"]
    rec["checksum"] = ("0" if good[0] != "0" else "1") + good[1:]
    lines[-2] = json.dumps(rec, separators=(",", ":"))
    with pytest.raises(ChecksumMismatch) as exc:
        from_bytes("\n".join(lines).encode("utf-8"))
    assert exc.value.actual == good
    assert exc.value.expected == rec["checksum"]


def test_uppercase_checksum_accepted():
    raw = valid_raw()
    lines = raw.decode("utf-8").split("\n")
    rec = json.loads(lines[-2])
    rec["checksum"] = rec["checksum"].upper()
    lines[-2] = json.dumps(rec, separators=(",", ":"))
    trace = from_bytes("\n".join(lines).encode("utf-8"))
    assert len(trace.steps) == 2


def test_step_count_checked_before_checksum():
    raw = valid_raw()
    lines = raw.decode("utf-8").split("\n")
    rec = json.loads(lines[-2])
    rec["steps"] = 3
    lines[-2] = json.dumps(rec, separators=(",", ":"))
    with pytest.raises(ParseError, match="declares 3 steps"):
        from_bytes("\n".join(lines).encode("utf-8"))


def test_trailing_content():
    raw = valid_raw() + b'{"type":"step"}\n'
    with pytest.raises(ParseError, match="after the end record"):
        from_bytes(raw)


def test_blank_line_between_records():
    raw = valid_raw()
    lines = raw.decode("utf-8").split("\n")
    lines.insert(2, "")
    with pytest.raises(ParseError, match="empty line"):
        from_bytes("\n".join(lines).encode("utf-8"))


def test_invalid_utf8():
    raw = valid_raw()
    head, _, rest = raw.partition(b"\n")
    broken = head + b"\n" + b"\xff\xfe{}\n" + rest
    with pytest.raises(ParseError, match="UTF-8"):
        from_bytes(broken)


def test_not_json():
    raw = edit_line(valid_raw(), 2, lambda l: "not json at all")
    with pytest.raises(ParseError, match="not a JSON record"):
        from_bytes(raw)


def test_non_object_record():
    raw = edit_line(valid_raw(), 2, lambda l: "[1,2,3]")
    with pytest.raises(ParseError, match="object"):
        from_bytes(raw)


def test_infinity_constant_rejected():
    # syntactically valid JSON5-style constant; the reader must not admit it
    raw = to_bytes(make_trace([]), encoding=ENCODING_JSON)
    raw = edit_line(raw, 1, lambda l: l.replace("[[", "[[Infinity,", 1))
    with pytest.raises(ParseError, match="JSON"):
        from_bytes(raw)


def test_bad_base64():
    def mangle(line):
        rec = json.loads(line)
        rec["data"] = "@@@@"
        return json.dumps(rec, separators=(",", ":"))

    raw = edit_line(valid_raw(), 1, mangle)
    with pytest.raises(ParseError, match="base64"):
        from_bytes(raw)


def test_wrong_payload_length():
    def mangle(line):
        rec = json.loads(line)
        rec["data"] = "AAAA"
        return json.dumps(rec, separators=(",", ":"))

    raw = edit_line(valid_raw(), 1, mangle)
    with pytest.raises(ParseError, match="bytes"):
        from_bytes(raw)


def test_non_numeric_json_data():
    def mangle(line):
        rec = json.loads(line)
        rec["data"] = [["a", "b"], [1.0, 2.0]]
        return json.dumps(rec, separators=(",", ":"))

    raw = edit_line(to_bytes(make_trace([]), encoding=ENCODING_JSON), 1, mangle)
    with pytest.raises(ParseError, match="numeric"):
        from_bytes(raw)


def test_flat_json_data_rejected():
    def mangle(line):
        rec = json.loads(line)
        rec["data"] = "AAAA"
        return json.dumps(rec, separators=(",", ":"))

    raw = edit_line(to_bytes(make_trace([]), encoding=ENCODING_JSON), 1, mangle)
    with pytest.raises(ParseError, match="nested lists"):
        from_bytes(raw)


def test_step_missing_field():
    def mangle(line):
        rec = json.loads(line)
        del rec["target_ids"]
        return json.dumps(rec, separators=(",", ":"))

    raw = edit_line(valid_raw(), 2, mangle)
    with pytest.raises(ParseError, match="'target_ids'"):
        from_bytes(raw)


def test_parse_error_reports_line_number():
    raw = edit_line(valid_raw(), 3, lambda l: "?")
    with pytest.raises(ParseError) as exc:
        from_bytes(raw)
    assert exc.value.line_no == 4
    assert "line 4" in str(exc.value)


def test_parsed_but_invalid_trace():
    step = make_step([1, -2], [1, 2])
    raw = to_bytes(make_trace([step]))
    with pytest.raises(ValidationFailed) as exc:
        from_bytes(raw)
    assert any(v.code == "token-id-negative" for v in exc.value.violations)


# -- streaming ----------------------------------------------------------------


def test_reader_streams_before_end(rng):
    raw = valid_raw(n_steps=3)
    lines = raw.decode("utf-8").split("\n")
    lines[4] = "broken"
    reader = TraceReader(io.BytesIO("\n".join(lines).encode("utf-8")))
    gen = reader.steps()
    first = next(gen)
    second = next(gen)
    assert first.step_index == 0 and second.step_index == 1
    with pytest.raises(ParseError):
        next(gen)


def test_reader_infers_tree_layout(rng):
    trace = random_trace(rng, tree=True)
    reader = TraceReader(io.BytesIO(to_bytes(trace)))
    steps = tuple(reader.steps())
    assert reader.branches_per_step == 2
    assert len(steps) == len(trace.steps)
    back = from_bytes(to_bytes(trace))
    assert back.branches_per_step == 2
    assert back.n_events == len(trace.steps) // 2
