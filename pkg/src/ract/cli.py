"""Command-line entry point: ``ract <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 success with
repaired generations (``rerank --strict-report``), 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import __version__
from .core import atomic_write, dumps_jsonl, iter_jsonl, read_candidates, validate_ranking
from .cotparse import RepairPolicy
from .evalkit import (
    DegenerateVariance,
    as_percent,
    mean_metric,
    metric_report,
    missing_qids,
    ndcg_at_k,
    paired_t_test,
    read_qrels,
    read_run,
    write_run,
)
from .llmgate import ChatGateway, EndpointConfig, MockOracleConfig, sample_candidates
from .pipeline import RepairLog, mock_configs, rerank_to_run
from .promptgen import PromptFormat, RenderedPrompt, emit_sft_dataset
from .rpo import GRAD_RTOL, RpoPrompt, build_rpo_dataset, gradient_check
from .slidewin import WindowConfig

logger = logging.getLogger("ract")

EXIT_OK, EXIT_USAGE, EXIT_REPAIRED, EXIT_DATA = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--mock-truth", help="JSON file {qid: {docid: score}} driving the mock model")
    g.add_argument("--noise", type=float, default=0.0, help="mock score noise stddev")
    g.add_argument("--malform-rate", type=float, default=0.0)
    g.add_argument("--base-url", help="chat-completions endpoint base URL")
    g.add_argument("--model", help="model name sent to the endpoint")
    g.add_argument("--api-key-env", default="RACT_API_KEY")
    g.add_argument("--temperature", type=float, default=0.0)
    g.add_argument("--max-tokens", type=int, default=2048)
    g.add_argument("--timeout", type=float, default=60.0)
    g.add_argument("--max-retries", type=int, default=3)
    g.add_argument("--parallelism", type=_positive_int, default=4)
    g.add_argument("--seed", type=int, default=0)


def _add_format_arg(p: argparse.ArgumentParser, default: str = "CoTExplicit") -> None:
    p.add_argument("--format", choices=[f.value for f in PromptFormat], default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ract", description="Listwise LLM reranking toolkit")
    parser.add_argument("--version", action="version", version=f"ract {__version__}")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("rerank", help="sliding-window rerank a candidate file into a TREC run")
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--candidates", required=True)
    p.add_argument("--output", required=True, help="run file to write")
    p.add_argument("--repair-log", help="defaults to <output>.repairs.jsonl")
    p.add_argument("--window", type=_positive_int, default=20)
    p.add_argument("--stride", type=_positive_int, default=10)
    p.add_argument("--strict", dest="policy", action="store_const", const="Strict")
    p.add_argument("--repair", dest="policy", action="store_const", const="Repair")
    p.add_argument("--strict-report", action="store_true", help="exit 2 when any window needed repair")
    p.add_argument("--tag", default="ract")
    _add_format_arg(p)
    _add_model_args(p)
    p.set_defaults(policy="Repair")

    p = sub.add_parser("build-data", help="emit SFT and RPO prompt files from teacher rankings")
    p.add_argument("--config")
    p.add_argument("--input", required=True, help="candidate records with a teacher_order field")
    p.add_argument("--sft-output", required=True)
    p.add_argument("--rpo-output", required=True)
    p.add_argument("--mix", default="DirectList=1/3,CoTExplicit=1/3,CoTImplicitFinal=1/3",
                   help="comma-separated format=weight pairs")
    p.add_argument("--split", type=float, default=0.9)
    p.add_argument("--max-window", type=_positive_int, default=20)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("build-rpo-pairs", help="sample candidates and emit preference tuples")
    p.add_argument("--config")
    p.add_argument("--input", required=True, help="RPO prompt records")
    p.add_argument("--output", required=True)
    p.add_argument("--k", type=_positive_int, default=3)
    p.add_argument("--mock", action="store_true", help="sample from a mock model that knows the teacher order")
    p.add_argument("--sample-temperature", type=float, default=0.7)
    p.add_argument("--strict", dest="policy", action="store_const", const="Strict")
    p.add_argument("--repair", dest="policy", action="store_const", const="Repair")
    _add_model_args(p)
    p.set_defaults(policy="Repair")

    p = sub.add_parser("eval", help="nDCG@k of a run, optionally t-tested against a baseline")
    p.add_argument("--config")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--baseline")
    p.add_argument("--report", help="metric report (JSON lines)")
    p.add_argument("--gain", choices=["linear", "exponential"], default="linear")
    p.add_argument("--strict", action="store_true", help="fail when a run qid has no judgments")

    p = sub.add_parser("gradcheck", help="finite-difference check of the preference-loss gradient")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--report", help="per-trial results (JSON lines)")
    return parser


# --- config file handling ---


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    A manifest written by a previous run is accepted too: its config
    snapshot is replayed, so the run can be repeated from it.
    """
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            snapshot = json.loads(text)["config"]
        except (ValueError, KeyError, TypeError) as e:
            raise UsageError(f"{path}: not a manifest: {e}") from e
        return _from_snapshot(snapshot)
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("_", "-")] = value
    return out


def _from_snapshot(snapshot: dict) -> dict[str, str]:
    out = {}
    for key, value in snapshot.items():
        if key in ("command", "config") or value is None or value is False:
            continue
        out[key.replace("_", "-")] = "true" if value is True else str(value)
    return out


_BOOL_KEYS = ("strict", "repair", "strict-report", "mock")


def _config_argv(cfg: dict[str, str]) -> list[str]:
    argv = []
    for key, value in cfg.items():
        if key == "policy":
            argv.append("--strict" if value.lower() == "strict" else "--repair")
        elif key in _BOOL_KEYS:
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(f"--{key}")
        else:
            argv += [f"--{key}", value]
    return argv


def _config_path(argv: Sequence[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    argv = list(argv)
    path = _config_path(argv)
    if path is not None:
        command = next((a for a in argv if a in COMMANDS), None)
        if command is None:
            parser.parse_args(argv)  # reports the missing subcommand
        try:
            extra = _config_argv(read_config(path))
        except (OSError, UsageError) as e:
            parser.exit(EXIT_USAGE, f"ract: config error: {e}\n")
        at = argv.index(command) + 1
        # config values sit before the real flags, so flags win
        argv = argv[:at] + extra + argv[at:]
    return parser.parse_args(argv)


# --- manifests ---


def _snapshot(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("log_level",)}


def write_manifest(primary: str | Path, args: argparse.Namespace, inputs: dict, outputs: list, started: str) -> None:
    manifest = {
        "command": args.command,
        "config": _snapshot(args),
        "inputs": inputs,
        "outputs": [str(o) for o in outputs],
        "version": __version__,
        "started": started,
        "finished": _now(),
    }
    atomic_write(f"{primary}.manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --- commands ---


def _endpoint(args: argparse.Namespace) -> EndpointConfig:
    if not args.base_url or not args.model:
        raise UsageError("give --mock-truth (mock model) or both --base-url and --model")
    return EndpointConfig(
        base_url=args.base_url,
        model_name=args.model,
        api_key_env=args.api_key_env,
        temperature=args.temperature,
        max_output_tokens=args.max_tokens,
        timeout=args.timeout,
        max_retries=args.max_retries,
        parallelism=args.parallelism,
    )


def cmd_rerank(args: argparse.Namespace) -> int:
    started = _now()
    try:
        cfg = WindowConfig(args.window, args.stride)
    except ValueError as e:
        raise UsageError(str(e)) from e
    fmt = PromptFormat(args.format)
    policy = RepairPolicy(args.policy)
    lists = read_candidates(args.candidates)
    log = RepairLog()

    if args.mock_truth:
        truth = json.loads(Path(args.mock_truth).read_text(encoding="utf-8"))
        generator_for = mock_configs(truth, args.noise, args.malform_rate, fmt, args.seed)
        gateway = None
    else:
        gateway = ChatGateway(_endpoint(args))

        def generator_for(c):
            return lambda prompt, docids: gateway.complete(prompt)

    try:
        run = rerank_to_run(lists, generator_for, cfg, fmt, policy, args.parallelism, args.tag, log)
    finally:
        if gateway is not None:
            gateway.close()

    repair_path = args.repair_log or f"{args.output}.repairs.jsonl"
    write_run(args.output, run)
    atomic_write(repair_path, dumps_jsonl(log.sorted_records()))
    write_manifest(args.output, args, {"candidates": args.candidates}, [args.output, repair_path], started)
    repaired = log.repaired_qids
    print(f"reranked {len(lists)} queries, {len(run)} rows; {len(repaired)} queries needed repair")
    if repaired and args.strict_report:
        return EXIT_REPAIRED
    return EXIT_OK


def _parse_mix(spec: str) -> dict[str, float]:
    from fractions import Fraction

    mix = {}
    for part in spec.split(","):
        if not part.strip():
            continue
        name, _, weight = part.partition("=")
        try:
            mix[PromptFormat(name.strip())] = float(Fraction(weight.strip()))
        except ValueError as e:
            raise UsageError(f"bad --mix entry {part!r}: {e}") from e
    return mix


def cmd_build_data(args: argparse.Namespace) -> int:
    from .core import candidates_from_record

    started = _now()
    mix = _parse_mix(args.mix)
    examples = []
    for lineno, rec in iter_jsonl(args.input):
        try:
            c = candidates_from_record(rec)
            teacher = validate_ranking(rec["teacher_order"], len(c))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{args.input}:{lineno}: {e}") from e
        examples.append((c, teacher, rec.get("teacher")))
    try:
        sft, rpo = emit_sft_dataset(examples, mix, args.split, args.seed, args.max_window)
    except ValueError as e:
        raise DataError(str(e)) from e
    atomic_write(args.sft_output, dumps_jsonl(sft))
    atomic_write(args.rpo_output, dumps_jsonl(rpo))
    write_manifest(args.sft_output, args, {"input": args.input}, [args.sft_output, args.rpo_output], started)
    print(f"{len(sft)} SFT records, {len(rpo)} RPO prompt records")
    return EXIT_OK


def _rpo_prompts(path: str) -> list[RpoPrompt]:
    prompts = []
    for lineno, rec in iter_jsonl(path):
        try:
            order = rec["teacher_order"]
            truth = validate_ranking(order, len(order))
            prompts.append(RpoPrompt(str(rec["qid"]), len(order), truth, PromptFormat(rec["format"]), rec["prompt"]))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}:{lineno}: {e}") from e
    return prompts


def teacher_mock(p: RpoPrompt, noise: float, malform_rate: float, seed: int) -> tuple[MockOracleConfig, list[str]]:
    """Mock whose true scores follow the teacher order; docids are the identifiers."""
    scores = {str(i): float(p.n - pos) for pos, i in enumerate(p.truth.order)}
    return MockOracleConfig(scores, noise, malform_rate, p.format, seed), [str(i) for i in range(1, p.n + 1)]


def cmd_build_rpo_pairs(args: argparse.Namespace) -> int:
    started = _now()
    prompts = _rpo_prompts(args.input)
    policy = RepairPolicy(args.policy)
    gateway = None if args.mock else ChatGateway(_endpoint(args))

    def sampler(p: RpoPrompt) -> list[str]:
        rendered = RenderedPrompt(p.prompt, p.n, p.format)
        if gateway is None:
            mock, docids = teacher_mock(p, args.noise, args.malform_rate, args.seed)
            return sample_candidates(mock, rendered, args.k, window_docids=docids)
        return sample_candidates(gateway.cfg, rendered, args.k, gateway=gateway, temperature=args.sample_temperature)

    try:
        examples, stats = build_rpo_dataset(prompts, sampler, policy)
    finally:
        if gateway is not None:
            gateway.close()
    summary = {
        "n": len(examples),
        "prompts": stats.prompts,
        "candidates": stats.candidates,
        "duplicates_dropped": stats.duplicates_dropped,
        "mean_overlap": stats.mean_overlap,
    }
    summary_path = f"{args.output}.summary.json"
    atomic_write(args.output, dumps_jsonl(ex.to_record() for ex in examples))
    atomic_write(summary_path, json.dumps(summary, sort_keys=True) + "\n")
    write_manifest(args.output, args, {"input": args.input}, [args.output, summary_path], started)
    print(f"tuples emitted: {summary['n']}  duplicates dropped: {stats.duplicates_dropped}  "
          f"mean overlap: {stats.mean_overlap:.3f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    started = _now()
    run = read_run(args.run)
    qrels = read_qrels(args.qrels)
    missing = missing_qids(run, qrels)
    per_query = ndcg_at_k(run, qrels, args.k, args.gain)
    if not per_query:
        raise DataError("no run query has relevance judgments")
    status = EXIT_OK
    if missing:
        print(f"warning: {len(missing)} run queries missing from qrels: {' '.join(missing[:10])}", file=sys.stderr)
        if args.strict:
            status = EXIT_DATA
    mean = mean_metric(per_query)
    print(f"nDCG@{args.k}: {as_percent(mean)}  ({len(per_query)} queries)")
    if args.baseline:
        base = ndcg_at_k(read_run(args.baseline), qrels, args.k, args.gain)
        try:
            res = paired_t_test(per_query, base)
        except DegenerateVariance:
            print("paired t-test: degenerate variance (identical per-query differences), no significance")
        else:
            mark = " †" if res.significant and res.t > 0 else ""
            print(f"baseline nDCG@{args.k}: {as_percent(mean_metric(base))}")
            print(f"paired t-test: t={res.t:.6f} p={res.p:.6g} dof={res.dof}{mark}")
    if args.report:
        atomic_write(args.report, dumps_jsonl(metric_report(per_query, args.k)))
        write_manifest(args.report, args, {"run": args.run, "qrels": args.qrels, "baseline": args.baseline},
                       [args.report], started)
    return status


def cmd_gradcheck(args: argparse.Namespace) -> int:
    started = _now()
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    results = gradient_check(args.seed, args.trials)
    failed = [r for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results)
    if args.report:
        recs = [{"trial": r.trial, "n": r.n, "beta": r.beta, "max_rel_error": r.max_rel_error, "passed": r.passed}
                for r in results]
        atomic_write(args.report, dumps_jsonl(recs))
        write_manifest(args.report, args, {}, [args.report], started)
    print(f"gradcheck: {len(results) - len(failed)}/{len(results)} trials within {GRAD_RTOL:g} "
          f"(worst relative error {worst:.3e})")
    return EXIT_OK if not failed else EXIT_DATA


COMMANDS = {
    "rerank": cmd_rerank,
    "build-data": cmd_build_data,
    "build-rpo-pairs": cmd_build_rpo_pairs,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"ract {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError, KeyError, OSError, RuntimeError) as e:
        print(f"ract {args.command}: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
