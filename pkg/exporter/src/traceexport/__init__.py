"""Trace exporter: runs a toy target/draft model pair through greedy
speculative decoding and dumps each step into the trace file format."""

from .errors import ExportError
from .export import ExportResult, ExportSession, export_generation
from .models import (
    FRAME_DIM,
    MAX_VISUAL_ROWS,
    N_CTX,
    Projector,
    TinyDecoder,
    VideoModel,
    load_model,
    make_video,
)
from .writer import ENCODING, TraceFileWriter
