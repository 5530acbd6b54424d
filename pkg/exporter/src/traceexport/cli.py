"""trace-export command: dump one decode trace from a model pair."""
from __future__ import annotations

import argparse
import json
import sys
from typing import Optional

from .errors import ExportError
from .export import ExportSession, export_generation
from .models import load_model, make_video

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="trace-export",
        description="Greedy speculative decode of a target/draft pair, written as a trace file.",
    )
    p.add_argument("--target", default="toy-d32-l2", help="target model name")
    p.add_argument("--draft", default="toy-d32-l1", help="draft model name")
    p.add_argument(
        "--self-draft", action="store_true", help="draft with the target model itself"
    )
    p.add_argument("--prompt", default="describe the clip", help="text prompt")
    p.add_argument("--frames", type=int, default=4, help="synthetic clip length")
    p.add_argument("--lv", type=int, default=12, help="visual rows in the context")
    p.add_argument("--k", type=int, default=8, help="draft tokens per step")
    p.add_argument("--max-new-tokens", type=int, default=48)
    p.add_argument("--seed", type=int, default=0, help="clip seed, recorded in the header")
    p.add_argument("--out", required=True, help="trace file path")
    p.add_argument("--tau-log", help="also write the per-step accepted prefix lengths as JSON")
    p.add_argument("--tt", type=float, help="stamp target latency into the header")
    p.add_argument("--td", type=float, help="stamp draft latency into the header")
    p.add_argument("--ttk", type=float, help="stamp verification latency into the header")
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        target = load_model(args.target)
        draft = target if args.self_draft else load_model(args.draft)
        session = ExportSession(
            target=target,
            draft=draft,
            frames=make_video(args.seed, args.frames),
            prompt=args.prompt,
            k=args.k,
            l_v=args.lv,
            seed=args.seed,
        )
        latencies = {
            key: value
            for key, value in (("t_t", args.tt), ("t_d", args.td), ("t_t_k", args.ttk))
            if value is not None
        }
        result = export_generation(
            session, args.max_new_tokens, args.out, latencies=latencies or None
        )
        if args.tau_log:
            with open(args.tau_log, "w", encoding="utf-8") as fp:
                json.dump({"taus": list(result.taus)}, fp)
                fp.write("\n")
    except (ExportError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
    print(f"wrote {result.steps} steps ({result.bytes_written} bytes) to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
