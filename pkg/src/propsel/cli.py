"""``propsel`` command-line entry point."""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, NoReturn

from . import __version__
from .agents import AgentLimits
from .bench import (
    bin_by_proposal_count,
    bin_by_reward,
    dumps_report,
    load_verdicts,
    overlap_analysis,
    passed_ids,
    score_ic_run,
    score_manager_run,
    selector_overlap,
)
from .core import (
    PropselError,
    dataset_stats,
    dumps_jsonl,
    load_instances,
    load_issues,
    read_jsonl,
    save_instances,
)
from .curate import (
    BenchmarkKeys,
    SelectionRationale,
    build_sft_target,
    filter_leakage,
    required_sample_size,
    tally_rationales,
    token_length_stats,
)
from .engine import Decision, ManagerRunConfig, decide_batch, dumps_decision_log
from .llm import BackendConfig, MockBackend, OpenAICompatibleBackend
from .pipeline import P2AConfig, run_p2a_batch, write_p2a_outputs
from .reward import make_server, score_request

logger = logging.getLogger("propsel")

DEFAULTS: dict[str, Any] = {
    "base_url": "https://api.openai.com/v1",
    "api_key_env": "OPENAI_API_KEY",
    "timeout": 120.0,
    "max_retries": 3,
    "max_in_flight": 4,
    "parallelism": 1,
    "temperature": 0.0,
    "max_parse_retries": 2,
    "max_tokens": 4096,
    "max_steps": 50,
    "command_timeout": 60.0,
    "max_observation_chars": 10_000,
    "seed": 0,
    "host": "127.0.0.1",
    "port": 8000,
    "margin": 0.05,
    "confidence": 0.95,
}


class UsageError(PropselError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_help(sys.stderr)
        self.exit(2, f"\n{self.prog}: error: {message}\n")


def _digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, args: argparse.Namespace, datasets: list[str], backends: list[str]) -> Path:
    """Record what produced the contents of ``out_dir`` (one manifest per directory)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",) and _jsonable(v)}
    manifest = {
        "tool": "propsel",
        "version": __version__,
        "command": [args.command, getattr(args, "subcommand", None)],
        "config": config,
        "datasets": [{"path": str(p), "sha256": _digest(p)} for p in datasets],
        "backends": backends,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _jsonable(v: Any) -> bool:
    try:
        json.dumps(v)
    except TypeError:
        return False
    return True


def make_backend(spec: str, args: argparse.Namespace, *, seed_offset: int = 0):
    """Build a backend from ``mock:FILE`` or ``openai:MODEL``."""
    kind, _, rest = spec.partition(":")
    if kind == "mock":
        if not rest:
            raise UsageError("mock backend needs a script file: mock:PATH")
        script = json.loads(Path(rest).read_text(encoding="utf-8"))
        if not isinstance(script, (list, dict)):
            raise UsageError(f"{rest}: mock script must be a JSON list or object")
        return MockBackend(script, model=f"mock:{Path(rest).name}")
    if kind == "openai":
        if not rest:
            raise UsageError("openai backend needs a model name: openai:MODEL")
        config = BackendConfig(
            base_url=args.base_url,
            model=rest,
            api_key_env=args.api_key_env,
            timeout_s=args.timeout,
            max_retries=args.max_retries,
            max_in_flight=args.max_in_flight,
        )
        return OpenAICompatibleBackend(config, seed=args.seed + seed_offset)
    raise UsageError(f"unknown backend kind {kind!r} (expected mock:FILE or openai:MODEL)")


def _out_dir(out: str | None, default_name: str | None = None) -> tuple[Path | None, Path | None]:
    """Split ``--out`` into (directory, file); a ``.jsonl``/``.json`` path names a file."""
    if out is None:
        return None, None
    p = Path(out)
    if p.suffix in (".jsonl", ".json"):
        return p.parent, p
    return p, (p / default_name if default_name else None)


def _manager_config(args: argparse.Namespace) -> ManagerRunConfig:
    return ManagerRunConfig(args.temperature, args.max_parse_retries, args.max_tokens)


def _load_decisions(path: str) -> list[Decision]:
    return [Decision.from_log_dict(row) for row in read_jsonl(path)]


def _emit(args: argparse.Namespace, text: str, payload: Any, stem: str, datasets: list[str]) -> None:
    print(dumps_report(payload) if args.json else text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(dumps_report(payload), encoding="utf-8")
        (out / f"{stem}.txt").write_text(text, encoding="utf-8")
        write_manifest(out, args, datasets, [])


def cmd_validate(args: argparse.Namespace) -> int:
    instances = load_instances(args.dataset)
    stats = dataset_stats(instances)
    print(dumps_report({"ok": True, **stats.to_dict()}), end="")
    return 0


def cmd_select(args: argparse.Namespace) -> int:
    instances = load_instances(args.dataset)
    backend = make_backend(args.backend, args)
    out_dir, out_file = _out_dir(args.out, "decisions.jsonl")
    decisions = decide_batch(instances, backend, _manager_config(args), args.parallelism)
    log = dumps_decision_log(decisions)
    if out_file is None:
        print(log, end="")
    else:
        out_dir.mkdir(parents=True, exist_ok=True)
        out_file.write_text(log, encoding="utf-8")
        write_manifest(out_dir, args, [args.dataset], [args.backend])
    n_err = sum(d.error is not None for d in decisions)
    print(f"{len(decisions)} decisions, {n_err} errors", file=sys.stderr)
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    if args.subcommand == "manager":
        instances = load_instances(args.dataset)
        score = score_manager_run(_load_decisions(args.run), instances, allow_partial=args.allow_partial)
        _emit(args, score.to_text(2), score.to_dict(2), "manager_score", [args.dataset, args.run])
    else:
        issues = load_issues(args.dataset)
        score = score_ic_run(load_verdicts(args.run), issues, allow_partial=args.allow_partial)
        _emit(args, score.to_text(1), score.to_dict(1), "ic_score", [args.dataset, args.run])
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    if args.subcommand == "bins":
        instances = load_instances(args.dataset)
        decisions = _load_decisions(args.run)
        fn = bin_by_proposal_count if args.by == "count" else bin_by_reward
        report = fn(decisions, instances, allow_partial=args.allow_partial)
        _emit(args, report.to_text(), report.to_dict(), f"bins_{args.by}", [args.dataset, args.run])
        if args.out:
            (Path(args.out) / f"bins_{args.by}.csv").write_text(report.to_csv(), encoding="utf-8")
        return 0
    run_a = load_verdicts(args.a)
    runs_b = [load_verdicts(p) for p in args.b]
    if len(runs_b) == 1 and not args.loose:
        report = selector_overlap(run_a, runs_b[0])
    else:
        union = frozenset().union(*(passed_ids(r) for r in runs_b))
        report = overlap_analysis(passed_ids(run_a), union)
    _emit(args, report.to_text(), report.to_dict(), "overlap", [args.a, *args.b])
    return 0


def cmd_reward(args: argparse.Namespace) -> int:
    if args.subcommand == "score":
        payload = json.loads(Path(args.input).read_text(encoding="utf-8"))
        items = payload if isinstance(payload, list) else [payload]
        results = [score_request(item) for item in items]
        print(dumps_report(results if isinstance(payload, list) else results[0]), end="")
        return 0
    server = make_server(args.host, args.port)
    host, port = server.server_address[:2]
    print(f"reward service listening on http://{host}:{port} (POST /score, /score_batch)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_curate(args: argparse.Namespace) -> int:
    sub = args.subcommand
    if sub == "sample-size":
        print(required_sample_size(args.population, args.margin, args.confidence))
        return 0
    if sub == "filter-leakage":
        train = load_instances(args.train)
        keys = BenchmarkKeys.from_instances(load_instances(args.benchmark, validate=False))
        kept, report = filter_leakage(train, keys)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_instances(out / "train.filtered.jsonl", kept)
        (out / "leakage_report.json").write_text(dumps_report(report.to_dict()), encoding="utf-8")
        write_manifest(out, args, [args.train, args.benchmark], [])
        print(f"kept {report.n_after}/{report.n_before}; removed {len(report.removed_ids)}")
        return 0
    if sub == "annotate":
        instances = load_instances(args.dataset)
        backend = make_backend(args.backend, args)
        config = _manager_config(args)
        rows, failures = [], []
        for inst in instances:
            try:
                rows.append(build_sft_target(inst, backend, config).to_dict())
            except PropselError as exc:
                failures.append({"instance_id": inst.id, "error": type(exc).__name__, "message": str(exc)})
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "annotated.jsonl").write_text(dumps_jsonl(rows), encoding="utf-8")
        (out / "annotation_failures.jsonl").write_text(dumps_jsonl(failures), encoding="utf-8")
        write_manifest(out, args, [args.dataset], [args.backend])
        print(f"annotated {len(rows)}/{len(instances)}")
        return 0 if not failures else 1
    if sub == "stats":
        instances = load_instances(args.dataset)
        payload = {**dataset_stats(instances).to_dict(),
                   "prompt_length": token_length_stats(instances).to_dict()}
        print(dumps_report(payload), end="")
        return 0
    # tally
    tags = [SelectionRationale.of(row["criterion"]) for row in read_jsonl(args.tags)]
    print(dumps_report(tally_rationales(tags).to_dict()), end="")
    return 0


def cmd_p2a(args: argparse.Namespace) -> int:
    issues = load_issues(args.dataset)
    root = Path(args.workspaces)
    workspaces = [root / issue.id for issue in issues]
    missing = [str(w) for w in workspaces if not w.is_dir()]
    if missing:
        raise UsageError(f"missing workspaces: {', '.join(missing[:5])}")
    if len(args.proposal_backend) < 2:
        raise UsageError("need at least two --proposal-backend")
    config = P2AConfig(
        proposal_backends=[make_backend(s, args, seed_offset=i) for i, s in enumerate(args.proposal_backend)],
        manager_backend=make_backend(args.manager_backend, args, seed_offset=100),
        implementation_backend=make_backend(args.impl_backend, args, seed_offset=200),
        agent_limits=AgentLimits(args.max_steps, args.command_timeout, args.max_observation_chars),
        manager_config=_manager_config(args),
        pool_shuffle_seed=args.seed if args.shuffle_pool else None,
    )
    results, skeletons = run_p2a_batch(issues, workspaces, config, args.parallelism)
    out = Path(args.out)
    write_p2a_outputs(results, skeletons, out)
    write_manifest(out, args, [args.dataset],
                   [*args.proposal_backend, args.manager_backend, args.impl_backend])
    counts: dict[str, int] = {}
    for r in results:
        counts[r.status] = counts.get(r.status, 0) + 1
    print(json.dumps(counts, sort_keys=True))
    return 0


def _backend_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("backend")
    g.add_argument("--base-url")
    g.add_argument("--api-key-env", help="environment variable holding the API key")
    g.add_argument("--timeout", type=float)
    g.add_argument("--max-retries", type=int)
    g.add_argument("--max-in-flight", type=int)


def _manager_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-parse-retries", type=int)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--parallelism", type=int)


def _report_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--json", action="store_true", help="print JSON instead of aligned text")
    p.add_argument("--out", help="directory for report files")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="propsel", description="Proposal selection and benchmark toolkit.")
    parser.add_argument("--version", action="version", version=f"propsel {__version__}")
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--seed", type=int, help="seed for every random choice")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="validate a manager-instance JSONL dataset")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("select", help="run the manager over a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--backend", required=True, help="mock:FILE or openai:MODEL")
    p.add_argument("--out", help="decisions file (.jsonl) or output directory")
    _manager_flags(p)
    _backend_flags(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("score", help="score a manager decision log or IC verdicts")
    ss = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    for name in ("manager", "ic"):
        q = ss.add_parser(name)
        q.add_argument("--dataset", required=True)
        q.add_argument("--run", required=True, help="decision log (manager) or verdict JSONL (ic)")
        q.add_argument("--allow-partial", action="store_true", help="count missing entries as failures")
        _report_flags(q)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("analyze", help="bin and overlap analyses")
    ss = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    q = ss.add_parser("bins")
    q.add_argument("--dataset", required=True)
    q.add_argument("--run", required=True)
    q.add_argument("--by", choices=("count", "reward"), default="count")
    q.add_argument("--allow-partial", action="store_true")
    _report_flags(q)
    q = ss.add_parser("overlap")
    q.add_argument("--a", required=True, help="verdict JSONL for run A")
    q.add_argument("--b", required=True, action="append", help="verdict JSONL for run B (repeat to union)")
    q.add_argument("--loose", action="store_true", help="do not require identical instance sets")
    _report_flags(q)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("reward", help="composite reward scoring")
    ss = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    q = ss.add_parser("score")
    q.add_argument("--input", required=True, help="JSON request object or array of them")
    q = ss.add_parser("serve")
    q.add_argument("--host")
    q.add_argument("--port", type=int)
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("curate", help="dataset curation tools")
    ss = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    q = ss.add_parser("sample-size")
    q.add_argument("--population", type=int, required=True)
    q.add_argument("--margin", type=float)
    q.add_argument("--confidence", type=float)
    q = ss.add_parser("filter-leakage")
    q.add_argument("--train", required=True)
    q.add_argument("--benchmark", required=True)
    q.add_argument("--out", required=True)
    q = ss.add_parser("annotate")
    q.add_argument("--dataset", required=True)
    q.add_argument("--backend", required=True)
    q.add_argument("--out", required=True)
    _manager_flags(q)
    _backend_flags(q)
    q = ss.add_parser("stats")
    q.add_argument("--dataset", required=True)
    q = ss.add_parser("tally")
    q.add_argument("--tags", required=True, help="JSONL rows with a 'criterion' field")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("p2a", help="proposal -> manager -> implementation pipeline")
    ss = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)
    q = ss.add_parser("run")
    q.add_argument("--dataset", required=True, help="issue JSONL")
    q.add_argument("--workspaces", required=True, help="directory with one checkout per instance id")
    q.add_argument("--out", required=True)
    q.add_argument("--proposal-backend", action="append", required=True)
    q.add_argument("--manager-backend", required=True)
    q.add_argument("--impl-backend", required=True)
    q.add_argument("--max-steps", type=int)
    q.add_argument("--command-timeout", type=float)
    q.add_argument("--max-observation-chars", type=int)
    q.add_argument("--shuffle-pool", action="store_true")
    _manager_flags(q)
    _backend_flags(q)
    p.set_defaults(func=cmd_p2a)
    return parser


def _apply_config(args: argparse.Namespace) -> None:
    """Fill unset flags from ``--config`` and then from built-in defaults."""
    config: dict[str, Any] = {}
    if args.config:
        config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(config, dict):
            raise UsageError("--config must hold a JSON object")
        config = {k.replace("-", "_"): v for k, v in config.items()}
    for key in set(vars(args)) | set(DEFAULTS):
        if getattr(args, key, None) is None:
            if key in config:
                setattr(args, key, config[key])
            elif key in DEFAULTS:
                setattr(args, key, DEFAULTS[key])


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        _apply_config(args)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"propsel: error: {exc}", file=sys.stderr)
        return 2
    except (PropselError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"propsel: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
