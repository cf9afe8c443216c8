"""Shared data model: issues, proposals, manager instances and their JSONL codec."""

from __future__ import annotations

import json
from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class PropselError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PropselError):
    def __init__(self, message: str, instance_id: str | None = None):
        self.instance_id = instance_id
        prefix = f"[{instance_id}] " if instance_id else ""
        super().__init__(f"{prefix}{message}")


class TooFewProposals(ValidationError):
    pass


class NonContiguousIds(ValidationError):
    pass


class GroundTruthOutOfRange(ValidationError):
    pass


class EmptyField(ValidationError):
    pass


class DuplicateIssue(ValidationError):
    pass


@dataclass(frozen=True, order=True)
class Money:
    """Whole US dollars."""

    amount: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.amount, bool) or not isinstance(self.amount, int):
            raise TypeError(f"Money amount must be an int, got {type(self.amount).__name__}")
        if self.amount < 0:
            raise ValueError(f"Money amount must be non-negative, got {self.amount}")

    def __add__(self, other: Money) -> Money:
        if not isinstance(other, Money):
            return NotImplemented
        return Money(self.amount + other.amount)

    def __radd__(self, other: object) -> Money:
        # lets sum() start from the int 0
        if other == 0:
            return self
        return NotImplemented

    def __str__(self) -> str:
        return f"${self.amount:,}"


def total(amounts: Iterable[Money]) -> Money:
    return sum(amounts, Money(0))


@dataclass(frozen=True)
class IssueRecord:
    id: str
    repo: str
    issue_number: int
    title: str
    body: str
    price: Money = Money(0)

    @property
    def key(self) -> tuple[str, int]:
        return (self.repo, self.issue_number)


@dataclass(frozen=True)
class Proposal:
    proposal_id: int
    raw_text: str
    problem: str | None = None
    root_cause: str | None = None
    solution: str | None = None
    extra: dict[str, Any] = field(default_factory=dict, hash=False)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = dict(self.extra)
        out["proposal_id"] = self.proposal_id
        out["raw_text"] = self.raw_text
        for name in ("problem", "root_cause", "solution"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Proposal:
        known = {"proposal_id", "raw_text", "problem", "root_cause", "solution"}
        return cls(
            proposal_id=int(data["proposal_id"]),
            raw_text=data["raw_text"],
            problem=data.get("problem"),
            root_cause=data.get("root_cause"),
            solution=data.get("solution"),
            extra={k: v for k, v in data.items() if k not in known},
        )


@dataclass(frozen=True)
class ManagerInstance:
    """One issue with its candidate proposals.

    ``ground_truth_id`` is ``None`` only for synthetic instances assembled on the
    fly (e.g. from a freshly generated proposal pool), where no maintainer
    decision exists.
    """

    issue: IssueRecord
    proposals: tuple[Proposal, ...]
    ground_truth_id: int | None
    extra: dict[str, Any] = field(default_factory=dict, hash=False)

    def __post_init__(self) -> None:
        if not isinstance(self.proposals, tuple):
            object.__setattr__(self, "proposals", tuple(self.proposals))

    @property
    def id(self) -> str:
        return self.issue.id

    @property
    def n_candidates(self) -> int:
        return len(self.proposals)

    @property
    def price(self) -> Money:
        return self.issue.price

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = dict(self.extra)
        out.update(
            id=self.issue.id,
            repo=self.issue.repo,
            issue_number=self.issue.issue_number,
            title=self.issue.title,
            body=self.issue.body,
            price_usd=self.issue.price.amount,
            proposals=[p.to_dict() for p in self.proposals],
            ground_truth_id=self.ground_truth_id,
        )
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ManagerInstance:
        known = {
            "id", "repo", "issue_number", "title", "body",
            "price_usd", "proposals", "ground_truth_id",
        }
        gt = data.get("ground_truth_id")
        return cls(
            issue=issue_from_dict(data),
            proposals=tuple(Proposal.from_dict(p) for p in data.get("proposals", [])),
            ground_truth_id=None if gt is None else int(gt),
            extra={k: v for k, v in data.items() if k not in known},
        )


def issue_from_dict(data: Mapping[str, Any]) -> IssueRecord:
    return IssueRecord(
        id=str(data["id"]),
        repo=data.get("repo", ""),
        issue_number=int(data.get("issue_number", 0)),
        title=data.get("title", ""),
        body=data.get("body", ""),
        price=Money(int(data.get("price_usd", 0))),
    )


def issue_to_dict(issue: IssueRecord) -> dict[str, Any]:
    return {
        "id": issue.id,
        "repo": issue.repo,
        "issue_number": issue.issue_number,
        "title": issue.title,
        "body": issue.body,
        "price_usd": issue.price.amount,
    }


@dataclass(frozen=True)
class GoldenProposal:
    problem: str
    root_cause: str
    solution: str

    def __post_init__(self) -> None:
        for name in ("problem", "root_cause", "solution"):
            if not getattr(self, name).strip():
                raise EmptyField(f"golden proposal section {name!r} is empty")

    def to_dict(self) -> dict[str, str]:
        return {"problem": self.problem, "root_cause": self.root_cause, "solution": self.solution}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> GoldenProposal:
        return cls(data["problem"], data["root_cause"], data["solution"])


@dataclass(frozen=True)
class ManagerOutput:
    think: str
    selected_id: int
    justification: str
    golden: GoldenProposal
    raw_text: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "think": self.think,
            "selected_id": self.selected_id,
            "justification": self.justification,
            "golden": self.golden.to_dict(),
            "raw_text": self.raw_text,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ManagerOutput:
        return cls(
            think=data.get("think", ""),
            selected_id=int(data["selected_id"]),
            justification=data.get("justification", ""),
            golden=GoldenProposal.from_dict(data["golden"]),
            raw_text=data.get("raw_text", ""),
        )


def validate_instance(
    instance: ManagerInstance, *, require_ground_truth: bool = True
) -> ManagerInstance:
    """Return ``instance`` unchanged if every invariant holds, else raise."""
    iid = instance.issue.id
    if not iid:
        raise EmptyField("instance id is empty")
    n = len(instance.proposals)
    if n < 2:
        raise TooFewProposals(f"need at least 2 proposals, got {n}", iid)
    ids = [p.proposal_id for p in instance.proposals]
    if ids != list(range(1, n + 1)):
        raise NonContiguousIds(f"proposal ids must be 1..{n} in order, got {ids}", iid)
    for p in instance.proposals:
        if not p.raw_text.strip():
            raise EmptyField(f"proposal {p.proposal_id} raw_text is empty", iid)
        for name in ("problem", "root_cause", "solution"):
            value = getattr(p, name)
            if value is not None and not value.strip():
                raise EmptyField(f"proposal {p.proposal_id} field {name!r} is empty", iid)
    gt = instance.ground_truth_id
    if gt is None:
        if require_ground_truth:
            raise GroundTruthOutOfRange("ground_truth_id is missing", iid)
    elif not 1 <= gt <= n:
        raise GroundTruthOutOfRange(f"ground_truth_id {gt} not in 1..{n}", iid)
    if instance.issue.issue_number < 1:
        raise ValidationError(
            f"issue_number must be positive, got {instance.issue.issue_number}", iid
        )
    return instance


def validate_dataset(instances: Iterable[ManagerInstance]) -> list[ManagerInstance]:
    """Validate each instance and the dataset-level uniqueness constraints."""
    seen_ids: set[str] = set()
    seen_keys: dict[tuple[str, int], str] = {}
    out = []
    for inst in instances:
        validate_instance(inst)
        if inst.id in seen_ids:
            raise DuplicateIssue("duplicate instance id", inst.id)
        seen_ids.add(inst.id)
        key = inst.issue.key
        if key in seen_keys:
            raise DuplicateIssue(
                f"{key[0]}#{key[1]} already used by {seen_keys[key]}", inst.id
            )
        seen_keys[key] = inst.id
        out.append(inst)
    return out


@dataclass(frozen=True)
class DatasetStats:
    n_issues: int
    n_proposals: int
    total_price: Money
    proposal_count_histogram: dict[int, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_issues": self.n_issues,
            "n_proposals": self.n_proposals,
            "total_price_usd": self.total_price.amount,
            "proposal_count_histogram": {
                str(k): v for k, v in sorted(self.proposal_count_histogram.items())
            },
        }


def dataset_stats(instances: Iterable[ManagerInstance]) -> DatasetStats:
    instances = list(instances)
    hist = Counter(inst.n_candidates for inst in instances)
    return DatasetStats(
        n_issues=len(instances),
        n_proposals=sum(hist[k] * k for k in hist),
        total_price=total(inst.price for inst in instances),
        proposal_count_histogram=dict(sorted(hist.items())),
    )


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return rows


def dumps_jsonl(rows: Iterable[Mapping[str, Any]]) -> str:
    return "".join(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n" for row in rows)


def write_jsonl(path: str | Path, rows: Iterable[Mapping[str, Any]]) -> None:
    Path(path).write_text(dumps_jsonl(rows), encoding="utf-8")


def load_instances(path: str | Path, *, validate: bool = True) -> list[ManagerInstance]:
    instances = [ManagerInstance.from_dict(row) for row in read_jsonl(path)]
    return validate_dataset(instances) if validate else instances


def load_issues(path: str | Path) -> list[IssueRecord]:
    """Read issue records; rows may be full manager instances or bare issues."""
    return [issue_from_dict(row) for row in read_jsonl(path)]


def save_instances(path: str | Path, instances: Iterable[ManagerInstance]) -> None:
    write_jsonl(path, (inst.to_dict() for inst in instances))
