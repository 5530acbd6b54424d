"""The writer is pinned byte for byte against the format document's own
worked examples, checksums included, so any drift between this package
and the document shows up as a failed fixture rather than a subtle
incompatibility discovered at replay time."""
import io
import zlib

import numpy as np
import pytest

from traceexport import ExportError, TraceFileWriter

DOC_ONE_STEP = (
    '{"type":"header","version":1,"d":2,"l_v":2,"encoding":"f32le-base64",'
    '"latencies":{"t_t":10.0,"t_d":1.0,"t_t_k":10.0},"seed":7}\n'
    '{"type":"visual_hidden","rows":2,"cols":2,"data":"AACAPwAAAAAAAAAAAACAPw=="}\n'
    '{"type":"step","s":0,"branch":0,"draft_ids":[5,9],"target_ids":[5,12],'
    '"draft_hidden":{"rows":2,"cols":2,"data":"AAAAPwAAAD8AAIA/AAAAAA=="},'
    '"target_entropy":[0.03,0.55],"relevance_labels":[true,false]}\n'
    '{"type":"end","steps":1,"checksum":"a0bf32f7"}\n'
)

DOC_EMPTY = (
    '{"type":"header","version":1,"d":2,"l_v":1,"encoding":"f32le-base64"}\n'
    '{"type":"visual_hidden","rows":1,"cols":2,"data":"AABAQAAAgEA="}\n'
    '{"type":"end","steps":0,"checksum":"df680ba9"}\n'
)


def test_reproduces_documented_one_step_file():
    buf = io.BytesIO()
    writer = TraceFileWriter(
        buf,
        d=2,
        l_v=2,
        visual=np.array([[1.0, 0.0], [0.0, 1.0]]),
        latencies={"t_t": 10.0, "t_d": 1.0, "t_t_k": 10.0},
        seed=7,
    )
    writer.write_step(
        s=0,
        draft_ids=[5, 9],
        target_ids=[5, 12],
        draft_hidden=np.array([[0.5, 0.5], [1.0, 0.0]]),
        target_entropy=[0.03, 0.55],
        relevance_labels=[True, False],
    )
    nbytes = writer.finish()
    assert buf.getvalue() == DOC_ONE_STEP.encode("utf-8")
    assert nbytes == len(buf.getvalue())


def test_reproduces_documented_empty_file():
    buf = io.BytesIO()
    writer = TraceFileWriter(buf, d=2, l_v=1, visual=np.array([[3.0, 4.0]]))
    writer.finish()
    assert buf.getvalue() == DOC_EMPTY.encode("utf-8")


def test_checksum_covers_all_lines_before_end():
    buf = io.BytesIO()
    with TraceFileWriter(buf, d=3, l_v=2, visual=np.ones((2, 3))) as writer:
        writer.write_step(
            s=0, draft_ids=[1, 2], target_ids=[1, 3], draft_hidden=np.zeros((2, 3))
        )
    body, _, end = buf.getvalue().rpartition(b'{"type":"end"')
    declared = end.split(b'"checksum":"')[1][:8].decode()
    assert declared == f"{zlib.crc32(body):08x}"


def test_finish_is_idempotent_and_seals_the_writer():
    buf = io.BytesIO()
    writer = TraceFileWriter(buf, d=2, l_v=1, visual=np.ones((1, 2)))
    assert writer.finish() == writer.finish() == len(buf.getvalue())
    with pytest.raises(ExportError, match="finished"):
        writer.write_step(s=0, draft_ids=[1], target_ids=[1], draft_hidden=np.ones((1, 2)))


def test_latencies_written_in_fixed_order_and_partial():
    buf = io.BytesIO()
    TraceFileWriter(
        buf, d=2, l_v=1, visual=np.ones((1, 2)), latencies={"t_d": 1.0, "t_t": 9.0}
    ).finish()
    header = buf.getvalue().splitlines()[0].decode()
    assert '"latencies":{"t_t":9.0,"t_d":1.0}' in header


def test_model_names_recorded():
    buf = io.BytesIO()
    TraceFileWriter(
        buf, d=2, l_v=1, visual=np.ones((1, 2)), model_names=["target=a", "draft=b"]
    ).finish()
    assert '"model_names":["target=a","draft=b"]' in buf.getvalue().splitlines()[0].decode()


@pytest.mark.parametrize("bad", [np.nan, np.inf, 1e300])
def test_non_finite_hidden_rejected(bad):
    # 1e300 overflows to inf only at the float32 cast; still rejected
    buf = io.BytesIO()
    writer = TraceFileWriter(buf, d=2, l_v=1, visual=np.ones((1, 2)))
    with pytest.raises(ExportError, match="non-finite"):
        writer.write_step(
            s=0, draft_ids=[1], target_ids=[1], draft_hidden=np.array([[bad, 0.0]])
        )


def test_non_finite_entropy_rejected():
    buf = io.BytesIO()
    writer = TraceFileWriter(buf, d=2, l_v=1, visual=np.ones((1, 2)))
    with pytest.raises(ExportError, match="entropy"):
        writer.write_step(
            s=0,
            draft_ids=[1],
            target_ids=[1],
            draft_hidden=np.ones((1, 2)),
            target_entropy=[np.inf],
        )


def test_non_2d_visual_rejected():
    with pytest.raises(ExportError, match="2-D"):
        TraceFileWriter(io.BytesIO(), d=2, l_v=1, visual=np.ones(4))
