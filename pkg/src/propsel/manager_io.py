"""Render the manager prompt and parse structured manager responses."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .core import EmptyField, GoldenProposal, ManagerInstance, ManagerOutput, PropselError

PREAMBLE = (
    "You are a senior open-source project maintainer responsible for reviewing multiple "
    "candidate proposals under a GitHub Issue, selecting the best proposal, and providing "
    "a golden proposal that synthesizes the strengths of all proposals. Your response "
    "should be well-structured, comprehensive in analysis, and practically implementable "
    "in engineering."
)

INSTRUCTIONS = (
    "1. First, select the best candidate proposal, and write it as: Best Proposal: #X\n"
    "2. Then, based on the Issue and all candidate proposals, write a Golden Proposal that "
    "synthesizes multiple excellent ideas. The structure must strictly follow this format:\n"
    "## Problem xx\n"
    "## Root Cause xx\n"
    "## Solution xx"
)

FORMAT_REMINDER = (
    "Your previous reply did not follow the required format. Reply again with a line "
    "'Best Proposal: #X' (X is a candidate number) followed by the sections "
    "'## Problem', '## Root Cause' and '## Solution'."
)

SECTION_NAMES = ("Problem", "Root Cause", "Solution")

_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL | re.IGNORECASE)
_SELECTION_RE = re.compile(
    r"best[ \t]+proposal[ \t]*\**[ \t]*:[ \t]*\**[ \t]*#?[ \t]*(\d+)", re.IGNORECASE
)
_HEADING_RES = {
    "Problem": re.compile(r"^[ \t]*##(?!#)[ \t]*problem\b[ \t]*:?", re.IGNORECASE | re.MULTILINE),
    "Root Cause": re.compile(
        r"^[ \t]*##(?!#)[ \t]*root[ \t]*cause\b[ \t]*:?", re.IGNORECASE | re.MULTILINE
    ),
    "Solution": re.compile(
        r"^[ \t]*##(?!#)[ \t]*solution\b[ \t]*:?", re.IGNORECASE | re.MULTILINE
    ),
}
_BLOCK_RE = re.compile(r"\[PROPOSAL (\d+)\].*?\[/PROPOSAL \1\]", re.DOTALL)


class ParseError(PropselError):
    """A manager response could not be parsed.

    ``tag`` is the stable error name written to decision logs.
    """

    tag = "ParseError"


class MissingSelection(ParseError):
    tag = "MissingSelection"


class SelectionOutOfRange(ParseError):
    tag = "SelectionOutOfRange"

    def __init__(self, selected_id: int, n_candidates: int):
        self.selected_id = selected_id
        self.n_candidates = n_candidates
        super().__init__(f"selected proposal #{selected_id} not in 1..{n_candidates}")


class MissingGolden(ParseError):
    tag = "MissingGolden"

    def __init__(self, missing: list[str], *, think: str = "", selected_id: int | None = None,
                 justification: str = ""):
        self.missing = missing
        # partial parse, for callers that tolerate a missing golden proposal
        self.think = think
        self.selected_id = selected_id
        self.justification = justification
        super().__init__(f"golden proposal missing sections: {', '.join(missing)}")


@dataclass(frozen=True)
class PromptText:
    text: str
    n_candidates: int

    def __str__(self) -> str:
        return self.text


def render_manager_prompt(instance: ManagerInstance) -> PromptText:
    issue = instance.issue
    issue_text = f"{issue.title}\n\n{issue.body}" if issue.title else issue.body
    parts = [
        PREAMBLE,
        "Below is a GitHub Issue:",
        f"[ISSUE]\n{issue_text}\n[/ISSUE]",
        "Below are the candidate proposals:",
    ]
    for p in sorted(instance.proposals, key=lambda p: p.proposal_id):
        k = p.proposal_id
        parts.append(f"[PROPOSAL {k}]\n{p.raw_text}\n[/PROPOSAL {k}]")
    parts.append(INSTRUCTIONS)
    return PromptText("\n".join(parts), len(instance.proposals))


def count_proposal_blocks(text: str) -> int:
    return len(_BLOCK_RE.findall(text))


def extract_think(text: str) -> str:
    m = _THINK_RE.search(text)
    return m.group(1).strip() if m else ""


def _find_headings(text: str) -> tuple[dict[str, re.Match[str]], list[str]]:
    """Locate the three headings in order; later headings must follow earlier ones."""
    found: dict[str, re.Match[str]] = {}
    missing = []
    pos = 0
    for name in SECTION_NAMES:
        m = _HEADING_RES[name].search(text, pos)
        if m is None:
            missing.append(name)
            continue
        found[name] = m
        pos = m.end()
    return found, missing


def parse_golden_sections(text: str) -> GoldenProposal:
    found, missing = _find_headings(text)
    if missing:
        raise MissingGolden(missing)
    bounds = [found[name] for name in SECTION_NAMES]
    sections = []
    for i, m in enumerate(bounds):
        end = bounds[i + 1].start() if i + 1 < len(bounds) else len(text)
        sections.append(text[m.end():end].strip())
    empty = [name for name, body in zip(SECTION_NAMES, sections) if not body]
    if empty:
        raise MissingGolden(empty)
    try:
        return GoldenProposal(*sections)
    except EmptyField as exc:  # pragma: no cover - guarded by the check above
        raise MissingGolden(list(SECTION_NAMES)) from exc


def parse_manager_output(text: str, n_candidates: int) -> ManagerOutput:
    if n_candidates < 2:
        raise ValueError(f"n_candidates must be >= 2, got {n_candidates}")
    think_match = _THINK_RE.search(text)
    think = think_match.group(1).strip() if think_match else ""
    # a selection phrase inside the reasoning trace does not count
    body_start = think_match.end() if think_match else 0

    sel = _SELECTION_RE.search(text, body_start)
    if sel is None:
        raise MissingSelection("no 'Best Proposal: #X' line found")
    selected_id = int(sel.group(1))
    if not 1 <= selected_id <= n_candidates:
        raise SelectionOutOfRange(selected_id, n_candidates)

    line_end = text.find("\n", sel.end())
    rest_start = len(text) if line_end == -1 else line_end + 1
    rest = text[rest_start:]
    found, _ = _find_headings(rest)
    first = found.get("Problem")
    justification = (rest[: first.start()] if first else rest).strip()
    try:
        golden = parse_golden_sections(rest)
    except MissingGolden as exc:
        raise MissingGolden(
            exc.missing, think=think, selected_id=selected_id, justification=justification
        ) from None
    return ManagerOutput(
        think=think,
        selected_id=selected_id,
        justification=justification,
        golden=golden,
        raw_text=text,
    )


def format_score(text: str, n_candidates: int) -> int:
    try:
        parse_manager_output(text, n_candidates)
    except (ParseError, ValueError):
        return 0
    return 1


def render_response(
    selected_id: int,
    golden: GoldenProposal,
    *,
    think: str = "",
    justification: str = "",
) -> str:
    """Write a response in the canonical format the parser expects."""
    lines = []
    if think:
        lines.append(f"<think>\n{think}\n</think>")
    lines.append(f"Best Proposal: #{selected_id}")
    if justification:
        lines.append(justification)
    lines += [
        f"## Problem\n{golden.problem}",
        f"## Root Cause\n{golden.root_cause}",
        f"## Solution\n{golden.solution}",
    ]
    return "\n".join(lines) + "\n"
