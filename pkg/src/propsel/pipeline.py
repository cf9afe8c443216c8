"""Proposal pool -> manager decision -> golden-proposal-guided implementation."""

from __future__ import annotations

import logging
import random
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .agents import (
    AgentError,
    AgentLimits,
    AgentTranscript,
    PatchArtifact,
    run_implementation_agent,
    run_proposal_pool,
)
from .core import IssueRecord, ManagerInstance, Proposal, dumps_jsonl, validate_instance
from .engine import Clock, Decision, ManagerRunConfig, decide
from .llm import Backend

logger = logging.getLogger(__name__)

STATUSES = ("patched", "pool_failed", "manager_failed", "impl_failed")


@dataclass
class P2AConfig:
    proposal_backends: Sequence[Backend]
    manager_backend: Backend
    implementation_backend: Backend
    agent_limits: AgentLimits = field(default_factory=AgentLimits)
    manager_config: ManagerRunConfig = field(default_factory=ManagerRunConfig)
    implementation_temperature: float = 0.0
    # None keeps backend order; an int shuffles the pool reproducibly
    pool_shuffle_seed: int | None = None

    def __post_init__(self) -> None:
        if len(self.proposal_backends) < 2:
            raise ValueError("need at least 2 proposal backends")


@dataclass
class P2AResult:
    instance_id: str
    pool: list[Proposal]
    decision: Decision | None
    patch: PatchArtifact | None
    transcripts: dict[str, AgentTranscript | None]
    status: str
    error: str | None = None

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if (self.patch is not None) != (self.status == "patched"):
            raise ValueError("patch must be present iff status is 'patched'")

    def to_dict(self, diff_path: str | None = None, transcript_paths: dict[str, str] | None = None) -> dict[str, Any]:
        d = self.decision
        golden = d.output.golden.to_dict() if d is not None and d.output is not None else None
        return {
            "instance_id": self.instance_id,
            "status": self.status,
            "error": self.error,
            "pool": [p.to_dict() for p in self.pool],
            "decision": d.to_log_dict() if d is not None else None,
            "golden": golden,
            "files_touched": list(self.patch.files_touched) if self.patch else [],
            "diff_path": diff_path,
            "transcript_paths": transcript_paths or {},
        }


def run_p2a(
    issue: IssueRecord,
    workspace_dir: str | Path,
    config: P2AConfig,
    *,
    clock: Clock = time.perf_counter,
) -> P2AResult:
    """Run the three roles for one issue. Stage failures become a status, never an exception."""
    transcripts: dict[str, AgentTranscript | None] = {}
    entries = run_proposal_pool(issue, workspace_dir, config.proposal_backends, config.agent_limits)
    for e in entries:
        transcripts[f"proposal-{e.backend_index + 1}"] = e.transcript
    pool = [e.proposal for e in entries if e.proposal is not None]

    if config.pool_shuffle_seed is not None:
        random.Random(f"{config.pool_shuffle_seed}:{issue.id}").shuffle(pool)
    pool = [
        Proposal(i, p.raw_text, p.problem, p.root_cause, p.solution, extra=p.extra)
        for i, p in enumerate(pool, 1)
    ]
    if len(pool) < 2:
        return P2AResult(issue.id, pool, None, None, transcripts, "pool_failed",
                         error=f"only {len(pool)} proposal(s) survived")

    instance = validate_instance(ManagerInstance(issue, tuple(pool), None), require_ground_truth=False)
    decision = decide(instance, config.manager_backend, config.manager_config, clock=clock)
    if decision.output is None:
        return P2AResult(issue.id, pool, decision, None, transcripts, "manager_failed",
                         error=decision.error)

    try:
        patch, impl_transcript = run_implementation_agent(
            issue, decision.output.golden, workspace_dir, config.implementation_backend,
            config.agent_limits, temperature=config.implementation_temperature,
        )
    except AgentError as exc:
        transcripts["implementation"] = exc.transcript
        return P2AResult(issue.id, pool, decision, None, transcripts, "impl_failed", error=exc.tag)
    transcripts["implementation"] = impl_transcript
    return P2AResult(issue.id, pool, decision, patch, transcripts, "patched")


def _run_isolated(issue: IssueRecord, workspace: Path, config: P2AConfig, clock: Clock) -> P2AResult:
    try:
        return run_p2a(issue, workspace, config, clock=clock)
    except Exception as exc:
        logger.exception("[%s] P2A run crashed", issue.id)
        return P2AResult(issue.id, [], None, None, {}, "pool_failed", error=type(exc).__name__)


def run_p2a_batch(
    instances: Sequence[IssueRecord],
    workspaces: Sequence[str | Path],
    config: P2AConfig,
    parallelism: int = 1,
    *,
    clock: Clock = time.perf_counter,
) -> tuple[list[P2AResult], list[dict[str, Any]]]:
    """Run P2A per instance; returns results in input order and verdict skeletons."""
    if len(instances) != len(workspaces):
        raise ValueError("need exactly one workspace per instance")
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    jobs = list(zip(instances, (Path(w) for w in workspaces)))
    if parallelism == 1:
        results = [_run_isolated(i, w, config, clock) for i, w in jobs]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(lambda job: _run_isolated(job[0], job[1], config, clock), jobs))
    skeletons = [
        {"instance_id": issue.id, "passed": None, "price_usd": issue.price.amount}
        for issue in instances
    ]
    return results, skeletons


def write_p2a_outputs(results: Sequence[P2AResult], skeletons: Sequence[dict[str, Any]], out_dir: str | Path) -> Path:
    """Write diffs, transcripts, ``results.jsonl`` and ``verdicts.skeleton.jsonl`` under ``out_dir``.

    Paths recorded in the results file are relative to ``out_dir``.
    """
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    (out / "transcripts").mkdir(parents=True, exist_ok=True)
    rows = []
    for res in results:
        diff_path = None
        if res.patch is not None:
            diff_path = f"patches/{res.instance_id}.diff"
            (out / diff_path).write_text(res.patch.diff_text, encoding="utf-8")
        tpaths = {}
        for role, transcript in sorted(res.transcripts.items()):
            if transcript is None:
                continue
            rel = f"transcripts/{res.instance_id}.{role}.jsonl"
            (out / rel).write_text(transcript.to_jsonl(), encoding="utf-8")
            tpaths[role] = rel
        rows.append(res.to_dict(diff_path, tpaths))
    results_path = out / "results.jsonl"
    results_path.write_text(dumps_jsonl(rows), encoding="utf-8")
    (out / "verdicts.skeleton.jsonl").write_text(dumps_jsonl(skeletons), encoding="utf-8")
    return results_path
