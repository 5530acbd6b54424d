"""Command-line front end.

Subcommands: theory (closed-form tables), simulate (Monte Carlo sweeps),
gen-synthetic (write a synthetic trace file), replay (one strategy over
one trace), report (per-position loosening audit), dilution (failure
dilution check).

Exit codes: 0 success, 1 domain or validation error, 2 usage error.
Randomized commands default to seed 0; every run is deterministic given
its flags.

Strategies are named in a small spec language, `name:key=val,flag,...`:

    strict
    random:p=0.3,seed=7
    entropy:threshold=0.1
    fly:threshold=0.1,window=2
    lvspec:lambda=0.7,n=5[,pst]
    oracle-visual[:pst]        (simulate only; needs ground-truth labels)
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from typing import Optional, Sequence

from .domain import StrategyConfig, Trace
from .errors import EngineError
from .synthetic import (
    OracleRelaxedStrategy,
    SyntheticConfig,
    dilution_check,
    generate_trace,
    run_sweep,
    sweep_csv,
)
from .theory import TheoryParams, effective_alignment, strict_acceptance_bound
from .traceio import read_trace, write_trace
from .verification import loosening_report, replay_trace

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2

DEFAULT_SEED = 0

STRATEGY_GRAMMAR = "name:key=val,flag,... e.g. lvspec:lambda=0.7,n=5,pst"


def parse_strategy(text: str, allow_oracle: bool = False):
    """Parse one strategy spec; raises ValueError with a usable message."""
    name, _, rest = text.strip().partition(":")
    name = name.strip()
    pairs = {}
    flags = set()
    if rest:
        for part in rest.split(","):
            part = part.strip()
            if not part:
                raise ValueError(f"empty parameter in strategy spec {text!r}")
            if "=" in part:
                key, _, value = part.partition("=")
                pairs[key.strip()] = value.strip()
            else:
                flags.add(part)

    def need(key: str, cast):
        if key not in pairs:
            raise ValueError(f"strategy {name!r} requires {key}= ({STRATEGY_GRAMMAR})")
        try:
            return cast(pairs.pop(key))
        except ValueError:
            raise ValueError(f"bad value for {key} in strategy spec {text!r}") from None

    if name == "strict":
        config = StrategyConfig.strict()
    elif name == "random":
        config = StrategyConfig.random_accept(p=need("p", float), seed=need("seed", int))
    elif name == "entropy":
        config = StrategyConfig.entropy_gate(threshold=need("threshold", float))
    elif name == "fly":
        config = StrategyConfig.fly(threshold=need("threshold", float), window=need("window", int))
    elif name == "lvspec":
        config = StrategyConfig.lvspec(
            lam=need("lambda", float), top_n=need("n", int), pst="pst" in flags
        )
        flags.discard("pst")
    elif name == "oracle-visual" and allow_oracle:
        config = OracleRelaxedStrategy(pst_enabled="pst" in flags)
        flags.discard("pst")
    else:
        raise ValueError(f"unknown strategy {name!r}")
    if pairs:
        raise ValueError(f"strategy {name!r} does not take {sorted(pairs)}")
    if flags:
        raise ValueError(f"strategy {name!r} does not take flags {sorted(flags)}")
    return config


def _parse_strategy_list(specs: Sequence[str], parser: argparse.ArgumentParser, allow_oracle: bool):
    out = []
    for chunk in specs:
        for spec in chunk.split(";"):
            if not spec.strip():
                continue
            try:
                out.append(parse_strategy(spec, allow_oracle=allow_oracle))
            except ValueError as e:
                parser.error(str(e))
    if not out:
        parser.error("at least one strategy is required")
    return out


def _write_text(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(path, "w", encoding="utf-8") as fp:
            fp.write(text)


# ---------------------------------------------------------------------------
# config flags shared by simulate and gen-synthetic
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic config")
    g.add_argument("--alpha", type=float, help="match probability for both relevance classes")
    g.add_argument("--alpha-relevant", type=float, help="match probability at relevant positions")
    g.add_argument("--alpha-irrelevant", type=float, help="match probability at irrelevant positions")
    g.add_argument("--rho", type=float, help="probability a position is visual-relevant")
    g.add_argument("--k", type=int, help="draft tokens per step")
    g.add_argument("--steps", type=int, help="steps per trace")
    g.add_argument("--d", type=int, help="hidden dimension")
    g.add_argument("--lv", type=int, help="visual rows")
    g.add_argument("--salient-count", type=int, help="visual rows near the salient direction")
    g.add_argument("--kappa-relevant", type=float, help="concentration of relevant draft rows")
    g.add_argument("--kappa-irrelevant", type=float, help="concentration of irrelevant draft rows")
    g.add_argument("--shift-rate", type=float, help="share of mismatches that are positional shifts")
    g.add_argument("--match-autocorr", type=float, help="within-step match correlation (stretch knob)")
    g.add_argument("--entropy-match-mean", type=float)
    g.add_argument("--entropy-mismatch-mean", type=float)


_CONFIG_FLAG_FIELDS = {
    "alpha_relevant": "alpha_relevant",
    "alpha_irrelevant": "alpha_irrelevant",
    "rho": "rho",
    "k": "k",
    "steps": "steps",
    "d": "d",
    "lv": "l_v",
    "salient_count": "salient_count",
    "kappa_relevant": "relevant_concentration",
    "kappa_irrelevant": "irrelevant_concentration",
    "shift_rate": "shift_event_rate",
    "match_autocorr": "match_autocorr",
    "entropy_match_mean": "entropy_match_mean",
    "entropy_mismatch_mean": "entropy_mismatch_mean",
}


def _config_from_args(args: argparse.Namespace, seed: int) -> SyntheticConfig:
    overrides = {"seed": seed}
    if args.alpha is not None:
        overrides["alpha_relevant"] = args.alpha
        overrides["alpha_irrelevant"] = args.alpha
    for attr, field_name in _CONFIG_FLAG_FIELDS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[field_name] = value
    return replace(SyntheticConfig(), **overrides)


def _configs_from_file(path: str, seed: int) -> list:
    with open(path, "r", encoding="utf-8") as fp:
        data = json.load(fp)
    points = data if isinstance(data, list) else [data]
    configs = []
    for point in points:
        if not isinstance(point, dict):
            raise ValueError("config file must hold an object or a list of objects")
        unknown = set(point) - set(SyntheticConfig.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        configs.append(replace(SyntheticConfig(seed=seed), **point))
    return configs


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_theory(args: argparse.Namespace) -> int:
    params = TheoryParams(
        alpha=args.alpha, rho=args.rho, k=args.k, t_t=args.tt, t_d=args.td, t_t_k=args.ttk
    )
    strict = params.strict()
    loose = params.loose()
    rows = [
        ("expected_tau_strict", f"{strict:.6g}"),
        ("expected_tau_loose", f"{loose:.6g}"),
    ]
    if params.alpha < 1.0:
        rows.append(("strict_bound", f"{strict_acceptance_bound(params.alpha):.6g}"))
    alpha_bar = effective_alignment(params.alpha, params.rho)
    if alpha_bar < 1.0:
        rows.append(("loose_bound", f"{strict_acceptance_bound(alpha_bar):.6g}"))
    if 0.0 < params.alpha < 1.0 and params.rho > 0.0:
        ratio = params.ratio()
        rows.append(("scaling_ratio_exact", f"{ratio.exact:.6g}"))
        rows.append(("scaling_ratio_asymptotic", f"{ratio.asymptotic:.6g}"))
    if params.has_latencies():
        rows.append(("speedup_strict", f"{params.speedup(strict):.6g}"))
        rows.append(("speedup_loose", f"{params.speedup(loose):.6g}"))
    width = max(len(name) for name, _ in rows)
    print(f"alpha={params.alpha:g} rho={params.rho:g} k={params.k}")
    for name, value in rows:
        print(f"  {name:<{width}}  {value}")
    return EXIT_OK


def _summarize_point(result) -> str:
    c = result.config
    head = f"alpha={c.alpha_relevant:g}/{c.alpha_irrelevant:g} rho={c.rho:g} k={c.k} steps={c.steps}"
    if result.error:
        return f"{head}: FAILED {result.error}"
    lines = [f"{head}: analytic strict {result.analytic_strict:.4f}, loose {result.analytic_loose:.4f}"]
    for s in result.stats:
        analytic = None
        if s.name == "strict":
            analytic = result.analytic_strict
        elif s.name.startswith("oracle-visual"):
            analytic = result.analytic_loose
        mark = ""
        if analytic is not None and result.trials > 1 and s.std_error > 0:
            ok = abs(s.mean_tau - analytic) <= 3 * s.std_error
            mark = "  [ok]" if ok else "  [off]"
        elif analytic is not None:
            mark = f"  (analytic {analytic:.4f})"
        lines.append(f"  {s.name:<28} mean_tau {s.mean_tau:.4f} +/- {s.std_error:.4f}{mark}")
    return "\n".join(lines)


def _cmd_simulate(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    strategies = _parse_strategy_list(args.strategies, parser, allow_oracle=True)
    if args.config_file:
        try:
            grid = _configs_from_file(args.config_file, args.seed)
        except (ValueError, OSError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_DOMAIN
    else:
        grid = [_config_from_args(args, args.seed)]
    results = run_sweep(grid, strategies, trials=args.trials, base_seed=args.seed)
    for result in results:
        print(_summarize_point(result))
    if args.format == "csv":
        payload = sweep_csv(results)
    else:
        payload = "".join(json.dumps(r.to_record()) + "\n" for r in results)
    if args.out:
        _write_text(args.out, payload)
    return EXIT_DOMAIN if any(r.error for r in results) else EXIT_OK


def _cmd_gen_synthetic(args: argparse.Namespace) -> int:
    config = _config_from_args(args, args.seed)
    trace = generate_trace(config)
    if args.tt is not None or args.td is not None or args.ttk is not None:
        header = replace(
            trace.header, latency_t_t=args.tt, latency_t_d=args.td, latency_t_t_k=args.ttk
        )
        trace = Trace(
            header=header,
            visual_hidden=trace.visual_hidden,
            steps=trace.steps,
            branches_per_step=trace.branches_per_step,
        )
    n = write_trace(trace, args.out, encoding=args.encoding)
    print(f"wrote {len(trace.steps)} steps ({n} bytes) to {args.out}")
    return EXIT_OK


def _verdict_records(result) -> str:
    lines = []
    for r in result.steps:
        rec = {
            "step": r.step_index,
            "branch": r.branch,
            "tau": r.verdict.accepted_length,
            "decisions": [d.label for d in r.verdict.per_position],
        }
        lines.append(json.dumps(rec, separators=(",", ":")))
    return "\n".join(lines) + "\n"


def _cmd_replay(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    try:
        strategy = parse_strategy(args.strategy)
    except ValueError as e:
        parser.error(str(e))
    trace = read_trace(args.trace)
    result = replay_trace(strategy, trace)
    m = result.metrics
    print(f"strategy    {m.strategy}")
    print(f"steps       {m.total_steps}")
    print(f"accepted    {m.total_accepted}")
    print(f"mean_tau    {m.mean_tau:.6g}")
    counts = {d.label: n for d, n in m.per_position_counts.items() if n}
    print(f"decisions   {json.dumps(counts)}")
    if m.speedup_estimate is not None:
        print(f"speedup     {m.speedup_estimate:.6g}")
    if m.relevance_wall_share is not None:
        print(f"relevance_wall_share {m.relevance_wall_share:.4%}")
    if args.out:
        _write_text(args.out, json.dumps(m.to_record(), indent=2) + "\n")
    if args.verdicts_out:
        _write_text(args.verdicts_out, _verdict_records(result))
    return EXIT_OK


def _cmd_report(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    try:
        strategy = parse_strategy(args.strategy)
    except ValueError as e:
        parser.error(str(e))
    trace = read_trace(args.trace)
    result = replay_trace(strategy, trace)
    report = loosening_report(result, trace)
    if args.format == "text":
        payload = report.render_table() + "\n"
    else:
        payload = "".join(json.dumps(r.to_record(), separators=(",", ":")) + "\n" for r in report.rows)
    _write_text(args.out, payload)
    return EXIT_OK


def _cmd_dilution(args: argparse.Namespace) -> int:
    report = dilution_check(
        alpha=args.alpha,
        lam=args.lam,
        k=args.k,
        trials=args.trials,
        steps_per_trial=args.steps,
        base_seed=args.seed,
        top_n=args.top_n,
    )
    rec = report.to_record()
    width = max(len(k) for k in rec)
    for key, value in rec.items():
        value = f"{value:.6g}" if isinstance(value, float) else str(value)
        print(f"{key:<{width}}  {value}")
    if args.out:
        _write_text(args.out, json.dumps(rec, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loosespec",
        description="Loose speculative-decoding verification: theory, synthesis, replay.",
        epilog=f"strategy spec grammar: {STRATEGY_GRAMMAR}",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("theory", help="closed-form expectations and ratios")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--tt", type=float, help="target forward latency")
    p.add_argument("--td", type=float, help="draft forward latency")
    p.add_argument("--ttk", type=float, help="target K-token verification latency")

    p = sub.add_parser("simulate", help="Monte Carlo sweep over synthetic traces")
    p.add_argument("--config-file", help="JSON object or list of objects with config fields")
    _add_config_flags(p)
    p.add_argument(
        "--strategies",
        action="append",
        default=None,
        required=True,
        help="strategy spec, repeatable; semicolons separate specs within one value",
    )
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"base seed (default {DEFAULT_SEED})")
    p.add_argument("--out", help="write results here ('-' for stdout)")
    p.add_argument("--format", choices=("csv", "records"), default="csv")

    p = sub.add_parser("gen-synthetic", help="generate and write one synthetic trace")
    _add_config_flags(p)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"default {DEFAULT_SEED}")
    p.add_argument("--out", required=True, help="trace file path")
    p.add_argument("--encoding", choices=("f32le-base64", "json-numbers"), default=None)
    p.add_argument("--tt", type=float, help="stamp target latency into the header")
    p.add_argument("--td", type=float, help="stamp draft latency into the header")
    p.add_argument("--ttk", type=float, help="stamp verification latency into the header")

    p = sub.add_parser("replay", help="replay one strategy over a trace file")
    p.add_argument("--trace", required=True)
    p.add_argument("--strategy", required=True, help=STRATEGY_GRAMMAR)
    p.add_argument("--out", help="write the metrics record here")
    p.add_argument("--verdicts-out", help="write per-step verdict records here")

    p = sub.add_parser("report", help="per-position loosening audit of a replay")
    p.add_argument("--trace", required=True)
    p.add_argument("--strategy", required=True, help=STRATEGY_GRAMMAR)
    p.add_argument("--format", choices=("text", "records"), default="text")
    p.add_argument("--out", help="default stdout")

    p = sub.add_parser("dilution", help="strict vs loose failure-rate dilution")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--steps", type=int, default=2000, help="steps per trial")
    p.add_argument("--top-n", type=int, default=5)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"default {DEFAULT_SEED}")
    p.add_argument("--out", help="write the report record here")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "theory":
            return _cmd_theory(args)
        if args.command == "simulate":
            return _cmd_simulate(args, parser)
        if args.command == "gen-synthetic":
            return _cmd_gen_synthetic(args)
        if args.command == "replay":
            return _cmd_replay(args, parser)
        if args.command == "report":
            return _cmd_report(args, parser)
        if args.command == "dilution":
            return _cmd_dilution(args)
        parser.error(f"unknown command {args.command!r}")
    except EngineError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
