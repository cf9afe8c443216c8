"""Bash-loop agents that draft proposals and implement a golden proposal.

Loop protocol (this toolkit's contract with the model):

* every reply holds exactly one fenced shell block (```bash ... ```), which is
  executed in the workspace and its output returned as the next user message;
* to finish, the reply contains a line ``FINAL_ANSWER``; whatever follows it is
  the answer (a proposal for the proposal agent, a short summary for the
  implementation agent).
"""

from __future__ import annotations

import json
import logging
import os
import re
import shutil
import signal
import subprocess
import tempfile
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .core import GoldenProposal, IssueRecord, PropselError, Proposal
from .llm import Backend, ChatRequest
from .manager_io import MissingGolden, parse_golden_sections

logger = logging.getLogger(__name__)

SENTINEL = "FINAL_ANSWER"
TRUNCATION_MARKER = "…[truncated]"
TIMEOUT_EXIT_CODE = 124
FORMAT_ERROR_EXIT_CODE = -2

_FENCE_RE = re.compile(r"```[ \t]*(?:bash|sh|shell|console)?[ \t]*\n(.*?)```", re.DOTALL)
_SENTINEL_RE = re.compile(rf"^[ \t]*{SENTINEL}[ \t]*$", re.MULTILINE)


class AgentError(PropselError):
    tag = "AgentError"

    def __init__(self, message: str, transcript: AgentTranscript | None = None):
        self.transcript = transcript
        super().__init__(message)


class WorkspaceMissing(AgentError):
    tag = "WorkspaceMissing"


class StepLimitNoAnswer(AgentError):
    tag = "StepLimitNoAnswer"


class MalformedProposal(AgentError):
    tag = "MalformedProposal"


class EmptyPatch(AgentError):
    tag = "EmptyPatch"


class EmptyPool(AgentError):
    tag = "EmptyPool"


class AgentAborted(AgentError):
    tag = "Aborted"


@dataclass(frozen=True)
class AgentLimits:
    max_steps: int = 50
    command_timeout_s: float = 60.0
    max_observation_chars: int = 10_000

    def __post_init__(self) -> None:
        if self.max_steps < 1 or self.command_timeout_s <= 0 or self.max_observation_chars < 1:
            raise ValueError("agent limits must all be positive")


@dataclass(frozen=True)
class CommandResult:
    stdout: str
    stderr: str
    exit_code: int
    truncated: bool
    timed_out: bool = False


@dataclass(frozen=True)
class Turn:
    command: str
    stdout: str = ""
    stderr: str = ""
    exit_code: int = 0
    truncated: bool = False
    kind: str = "command"  # command | submit | format_error


@dataclass
class AgentTranscript:
    turns: list[Turn] = field(default_factory=list)
    terminal_status: str = "aborted"  # submitted | step_limit | aborted
    messages: list[dict[str, str]] = field(default_factory=list, repr=False)

    def to_jsonl(self) -> str:
        rows = [
            {
                "step": i,
                "kind": t.kind,
                "command": t.command,
                "exit_code": t.exit_code,
                "stdout": t.stdout,
                "stderr": t.stderr,
                "truncated": t.truncated,
            }
            for i, t in enumerate(self.turns, 1)
        ]
        return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows)


@dataclass(frozen=True)
class PatchArtifact:
    diff_text: str
    files_touched: tuple[str, ...]

    @classmethod
    def from_diff(cls, diff_text: str) -> PatchArtifact:
        return cls(diff_text, tuple(diff_paths(diff_text)))


def _cut(text: str, limit: int) -> tuple[str, bool]:
    if len(text) <= limit:
        return text, False
    return text[:limit] + TRUNCATION_MARKER, True


def execute_command(command: str, workspace_dir: str | Path, limits: AgentLimits = AgentLimits()) -> CommandResult:
    """Run ``command`` with bash in ``workspace_dir``; kill its process group on timeout."""
    workspace = Path(workspace_dir)
    if not workspace.is_dir():
        raise WorkspaceMissing(f"workspace {workspace} does not exist")
    proc = subprocess.Popen(
        ["bash", "-c", command],
        cwd=workspace,
        stdin=subprocess.DEVNULL,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        start_new_session=True,
    )
    timed_out = False
    try:
        out, err = proc.communicate(timeout=limits.command_timeout_s)
        code = proc.returncode
    except subprocess.TimeoutExpired:
        timed_out = True
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        out, err = proc.communicate()
        code = TIMEOUT_EXIT_CODE
    stdout, cut_out = _cut(out.decode("utf-8", errors="replace"), limits.max_observation_chars)
    stderr, cut_err = _cut(err.decode("utf-8", errors="replace"), limits.max_observation_chars)
    if timed_out:
        stderr += f"\n[killed after {limits.command_timeout_s:g}s timeout]"
    return CommandResult(stdout, stderr, code, cut_out or cut_err, timed_out)


def parse_action(reply: str) -> tuple[str, str]:
    """Classify a model reply as ``("submit", answer)``, ``("command", cmd)`` or ``("format_error", why)``."""
    m = _SENTINEL_RE.search(reply)
    if m:
        return "submit", reply[m.end():].strip()
    blocks = _FENCE_RE.findall(reply)
    if len(blocks) == 1:
        return "command", blocks[0].strip()
    if not blocks:
        return "format_error", "no fenced shell block found"
    return "format_error", f"expected exactly one fenced shell block, found {len(blocks)}"


def _observation(result: CommandResult) -> str:
    return (
        f"<returncode>{result.exit_code}</returncode>\n"
        f"<stdout>\n{result.stdout}</stdout>\n"
        f"<stderr>\n{result.stderr}</stderr>"
    )


PROTOCOL = f"""\
You interact with the repository only through shell commands.
Each reply must contain exactly one shell command in a fenced block:
```bash
<command>
```
The command runs in the repository root and you will see its output.
When you are done, reply with a line containing only {SENTINEL} followed by your answer."""

PROPOSAL_SYSTEM = f"""\
You are a software engineer drafting a proposal to resolve a GitHub issue.
Investigate the repository to understand the failure, but do not modify any files.
{PROTOCOL}
Your answer must be a proposal in exactly this format:
## Problem
<restatement of the problem and its scope>
## Root Cause
<why the issue occurs>
## Solution
<the concrete code changes you propose>"""

IMPLEMENTATION_SYSTEM = f"""\
You are a software engineer implementing an agreed plan that resolves a GitHub issue.
Edit the repository files so the plan below is carried out.
{PROTOCOL}
After {SENTINEL}, briefly summarize what you changed.

Plan to implement:
## Problem
{{problem}}
## Root Cause
{{root_cause}}
## Solution
{{solution}}"""


def _issue_message(issue: IssueRecord) -> str:
    return f"Issue {issue.repo}#{issue.issue_number}: {issue.title}\n\n{issue.body}"


def run_agent_loop(
    system_prompt: str,
    task: str,
    workspace_dir: str | Path,
    backend: Backend,
    limits: AgentLimits = AgentLimits(),
    *,
    temperature: float = 0.0,
    max_tokens: int = 4096,
) -> tuple[str, AgentTranscript]:
    """Drive one episode; return the submitted answer and the transcript."""
    workspace = Path(workspace_dir)
    if not workspace.is_dir():
        raise WorkspaceMissing(f"workspace {workspace} does not exist")
    transcript = AgentTranscript()
    messages = [{"role": "system", "content": system_prompt}, {"role": "user", "content": task}]
    transcript.messages = messages
    model = getattr(backend, "model", "")
    for _ in range(limits.max_steps):
        try:
            reply = backend.complete(ChatRequest(model, tuple(messages), temperature, max_tokens)).content
        except PropselError as exc:
            transcript.terminal_status = "aborted"
            raise AgentAborted(f"backend failure: {exc}", transcript) from exc
        messages.append({"role": "assistant", "content": reply})
        kind, payload = parse_action(reply)
        if kind == "submit":
            transcript.turns.append(Turn(SENTINEL, kind="submit"))
            transcript.terminal_status = "submitted"
            return payload, transcript
        if kind == "format_error":
            transcript.turns.append(
                Turn("", stderr=payload, exit_code=FORMAT_ERROR_EXIT_CODE, kind="format_error")
            )
            messages.append({"role": "user", "content": f"Format error: {payload}.\n{PROTOCOL}"})
            continue
        result = execute_command(payload, workspace, limits)
        transcript.turns.append(
            Turn(payload, result.stdout, result.stderr, result.exit_code, result.truncated)
        )
        messages.append({"role": "user", "content": _observation(result)})
    transcript.terminal_status = "step_limit"
    raise StepLimitNoAnswer(f"no {SENTINEL} within {limits.max_steps} steps", transcript)


def run_proposal_agent(
    issue: IssueRecord,
    workspace_dir: str | Path,
    backend: Backend,
    limits: AgentLimits = AgentLimits(),
    *,
    proposal_id: int = 1,
    temperature: float = 0.0,
) -> tuple[Proposal, AgentTranscript]:
    answer, transcript = run_agent_loop(
        PROPOSAL_SYSTEM, _issue_message(issue), workspace_dir, backend, limits,
        temperature=temperature,
    )
    try:
        golden = parse_golden_sections(answer)
    except MissingGolden as exc:
        raise MalformedProposal(f"proposal missing sections: {', '.join(exc.missing)}", transcript) from exc
    proposal = Proposal(
        proposal_id=proposal_id,
        raw_text=answer,
        problem=golden.problem,
        root_cause=golden.root_cause,
        solution=golden.solution,
    )
    return proposal, transcript


@dataclass
class PoolEntry:
    backend_index: int
    model: str
    proposal: Proposal | None
    transcript: AgentTranscript | None
    error: str | None = None


def copy_workspace(src: str | Path, dest_root: str | Path, name: str) -> Path:
    dest = Path(dest_root) / name
    shutil.copytree(src, dest, symlinks=True)
    return dest


def run_proposal_pool(
    issue: IssueRecord,
    workspace_dir: str | Path,
    backends: Sequence[Backend],
    limits: AgentLimits = AgentLimits(),
    *,
    parallelism: int = 1,
) -> list[PoolEntry]:
    """Run one proposal agent per backend, each in its own workspace copy.

    Surviving proposals are renumbered 1..k in backend order.
    """
    if not backends:
        raise ValueError("need at least one proposal backend")
    workspace = Path(workspace_dir)
    if not workspace.is_dir():
        raise WorkspaceMissing(f"workspace {workspace} does not exist")

    with tempfile.TemporaryDirectory(prefix="propsel-pool-") as tmp:
        def run(idx: int) -> PoolEntry:
            model = getattr(backends[idx], "model", "")
            try:
                copy = copy_workspace(workspace, tmp, f"agent-{idx}")
                proposal, transcript = run_proposal_agent(issue, copy, backends[idx], limits)
            except AgentError as exc:
                logger.warning("[%s] proposal agent %d (%s) failed: %s", issue.id, idx, model, exc)
                return PoolEntry(idx, model, None, exc.transcript, exc.tag)
            except Exception as exc:
                logger.warning("[%s] proposal agent %d (%s) crashed: %s", issue.id, idx, model, exc)
                return PoolEntry(idx, model, None, None, type(exc).__name__)
            return PoolEntry(idx, model, proposal, transcript)

        indices = range(len(backends))
        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                entries = list(pool.map(run, indices))
        else:
            entries = [run(i) for i in indices]

    next_id = 1
    for entry in entries:
        if entry.proposal is not None:
            entry.proposal = Proposal(
                next_id, entry.proposal.raw_text, entry.proposal.problem,
                entry.proposal.root_cause, entry.proposal.solution,
                extra={"source_model": entry.model},
            )
            next_id += 1
    return entries


def build_proposal_pool(
    issue: IssueRecord,
    workspace_dir: str | Path,
    backends: Sequence[Backend],
    limits: AgentLimits = AgentLimits(),
    *,
    parallelism: int = 1,
) -> list[Proposal]:
    entries = run_proposal_pool(issue, workspace_dir, backends, limits, parallelism=parallelism)
    pool = [e.proposal for e in entries if e.proposal is not None]
    if not pool:
        raise EmptyPool(f"[{issue.id}] all {len(backends)} proposal agents failed")
    return pool


class WorkspaceSnapshot:
    """Baseline of a workspace kept in a private git directory.

    The workspace's own ``.git`` (if any) is left untouched, so the agent can
    use git normally; the diff is always against the state at snapshot time.
    """

    _IDENT = ["-c", "user.name=propsel", "-c", "user.email=propsel@localhost",
              "-c", "commit.gpgsign=false", "-c", "core.autocrlf=false"]

    def __init__(self, workspace_dir: str | Path):
        self.workspace = Path(workspace_dir).resolve()
        self._gitdir = tempfile.mkdtemp(prefix="propsel-snap-")
        self._git("init", "-q")
        self._git("add", "-A")
        self._git("commit", "-q", "--allow-empty", "--no-verify", "-m", "baseline")

    def _git(self, *args: str) -> str:
        env = dict(os.environ, GIT_DIR=self._gitdir, GIT_WORK_TREE=str(self.workspace))
        env.pop("GIT_INDEX_FILE", None)
        proc = subprocess.run(
            ["git", *self._IDENT, *args],
            cwd=self.workspace, env=env, capture_output=True, check=False,
        )
        if proc.returncode != 0:
            raise PropselError(f"git {' '.join(args)} failed: {proc.stderr.decode(errors='replace')}")
        return proc.stdout.decode("utf-8", errors="replace")

    def diff(self) -> str:
        self._git("add", "-A")
        return self._git("diff", "--cached", "--no-color", "--no-ext-diff", "--no-renames",
                         "--binary", "HEAD")

    def close(self) -> None:
        shutil.rmtree(self._gitdir, ignore_errors=True)

    def __enter__(self) -> WorkspaceSnapshot:
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def _unquote_path(path: str) -> str:
    if path.startswith('"') and path.endswith('"'):
        return path[1:-1].encode("latin-1", "backslashreplace").decode("unicode_escape").encode(
            "latin-1").decode("utf-8", errors="replace")
    return path


def _strip_prefix(path: str) -> str:
    path = _unquote_path(path.split("\t")[0])
    if path[:2] in ("a/", "b/"):
        return path[2:]
    return path


def diff_paths(diff_text: str) -> list[str]:
    """Paths touched by a unified diff, in order of first appearance."""
    paths: list[str] = []
    old: str | None = None
    header_path: str | None = None

    def add(p: str | None) -> None:
        if p and p != "/dev/null" and p not in paths:
            paths.append(p)

    for line in diff_text.splitlines():
        if line.startswith("diff --git "):
            if header_path is not None:
                add(header_path)  # block without ---/+++ (binary or mode-only)
            rest = line[len("diff --git "):]
            header_path = _strip_prefix(rest.rsplit(" b/", 1)[-1]) if " b/" in rest else None
            old = None
        elif line.startswith("--- "):
            old = line[4:]
        elif line.startswith("+++ ") and old is not None:
            new = line[4:]
            add(_strip_prefix(new) if new.split("\t")[0] != "/dev/null" else _strip_prefix(old))
            old = None
            header_path = None
    if header_path is not None:
        add(header_path)
    return paths


def looks_like_unified_diff(diff_text: str) -> bool:
    return bool(re.search(r"^(diff --git |--- )", diff_text, re.MULTILINE))


def run_implementation_agent(
    issue: IssueRecord,
    golden: GoldenProposal,
    workspace_dir: str | Path,
    backend: Backend,
    limits: AgentLimits = AgentLimits(),
    *,
    temperature: float = 0.0,
) -> tuple[PatchArtifact, AgentTranscript]:
    workspace = Path(workspace_dir)
    if not workspace.is_dir():
        raise WorkspaceMissing(f"workspace {workspace} does not exist")
    system = IMPLEMENTATION_SYSTEM.format(
        problem=golden.problem, root_cause=golden.root_cause, solution=golden.solution
    )
    with WorkspaceSnapshot(workspace) as snap:
        _, transcript = run_agent_loop(
            system, _issue_message(issue), workspace, backend, limits, temperature=temperature
        )
        diff_text = snap.diff()
    if not diff_text.strip():
        raise EmptyPatch(f"[{issue.id}] agent submitted without changing any file", transcript)
    return PatchArtifact.from_diff(diff_text), transcript


def transcript_to_dict(transcript: AgentTranscript) -> dict[str, Any]:
    return {
        "terminal_status": transcript.terminal_status,
        "turns": [asdict(t) for t in transcript.turns],
    }
