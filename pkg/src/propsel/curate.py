"""Dataset curation: sample sizing, leakage filtering, teacher annotation, length stats, rationale tally."""

from __future__ import annotations

import math
import statistics
from collections import Counter
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any

from .core import ManagerInstance, PropselError, validate_instance
from .engine import ManagerRunConfig
from .llm import Backend, ChatRequest, LLMError
from .manager_io import ParseError, render_manager_prompt, parse_manager_output
from .reward import ReferenceAnnotation

# standard-normal two-sided quantiles, as tabulated for sample-size planning
Z_SCORES = {0.90: Fraction("1.645"), 0.95: Fraction("1.960"), 0.99: Fraction("2.576")}


class CurationError(PropselError):
    pass


class InvalidMargin(CurationError):
    pass


class EmptyDataset(CurationError):
    pass


class TeacherFormatFailure(CurationError):
    tag = "TeacherFormatFailure"


class TeacherDisagreement(CurationError):
    tag = "TeacherDisagreement"


def required_sample_size(population: int, margin: float = 0.05, confidence: float = 0.95) -> int:
    """Finite-population sample size for estimating a proportion (worst case p = 0.5)."""
    if population < 1:
        raise ValueError(f"population must be >= 1, got {population}")
    if not 0 < margin < 1:
        raise InvalidMargin(f"margin must be in (0, 1), got {margin}")
    if confidence not in Z_SCORES:
        raise ValueError(f"confidence must be one of {sorted(Z_SCORES)}, got {confidence}")
    z = Z_SCORES[confidence]
    e = Fraction(str(margin))
    x = z * z * Fraction(1, 4) / (e * e)
    n = x * population / (x + population - 1)
    return math.ceil(n)


@dataclass(frozen=True)
class BenchmarkKeys:
    ids: frozenset[str] = frozenset()
    issues: frozenset[tuple[str, int]] = frozenset()

    @classmethod
    def from_instances(cls, instances: Iterable[ManagerInstance]) -> BenchmarkKeys:
        instances = list(instances)
        return cls(
            ids=frozenset(i.id for i in instances),
            issues=frozenset(i.issue.key for i in instances),
        )


@dataclass(frozen=True)
class LeakageReport:
    removed_ids: tuple[str, ...]
    n_before: int
    n_after: int

    def to_dict(self) -> dict[str, Any]:
        return {"removed_ids": list(self.removed_ids), "n_before": self.n_before, "n_after": self.n_after}


def filter_leakage(
    train: Sequence[ManagerInstance], benchmark_keys: BenchmarkKeys
) -> tuple[list[ManagerInstance], LeakageReport]:
    """Drop training instances that share an id or (repo, issue_number) with the benchmark."""
    kept, removed = [], []
    for inst in train:
        if inst.id in benchmark_keys.ids or inst.issue.key in benchmark_keys.issues:
            removed.append(inst.id)
        else:
            kept.append(inst)
    return kept, LeakageReport(tuple(removed), len(train), len(kept))


@dataclass(frozen=True)
class AnnotatedInstance:
    instance: ManagerInstance
    reference: ReferenceAnnotation
    teacher_model: str

    def __post_init__(self) -> None:
        if self.reference.ground_truth_id != self.instance.ground_truth_id:
            raise ValueError("reference ground truth disagrees with the instance")

    def to_dict(self) -> dict[str, Any]:
        ref = self.reference
        return {
            **self.instance.to_dict(),
            "reference": {
                "think": ref.think,
                "justification": ref.justification,
                "golden": ref.golden.to_dict(),
            },
            "teacher_model": self.teacher_model,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AnnotatedInstance:
        body = {k: v for k, v in data.items() if k not in ("reference", "teacher_model")}
        instance = ManagerInstance.from_dict(body)
        ref = dict(data["reference"], ground_truth_id=instance.ground_truth_id)
        return cls(instance, ReferenceAnnotation.from_dict(ref, instance.id), data["teacher_model"])


def teacher_prompt(instance: ManagerInstance) -> str:
    gt = instance.ground_truth_id
    return (
        render_manager_prompt(instance).text
        + "\n\n"
        f"The maintainers ultimately chose proposal #{gt}. Write your answer as if you were "
        "reaching that decision yourself:\n"
        "- first, inside <think>...</think>, compare the candidates and their trade-offs "
        "against the issue;\n"
        f"- then write 'Best Proposal: #{gt}';\n"
        "- then a concise justification of why it is preferable to the alternatives;\n"
        "- then the golden proposal with the '## Problem', '## Root Cause' and '## Solution' "
        "sections, keeping the strongest ideas from all candidates and dropping incorrect or "
        "risky steps."
    )


def build_sft_target(
    instance: ManagerInstance,
    teacher_backend: Backend,
    config: ManagerRunConfig = ManagerRunConfig(),
) -> AnnotatedInstance:
    """Ask a teacher model for a decision-consistent reasoning trace and golden proposal."""
    validate_instance(instance)
    gt = instance.ground_truth_id
    assert gt is not None
    model = getattr(teacher_backend, "model", "")
    messages = [{"role": "user", "content": teacher_prompt(instance)}]
    last_failure: CurationError | None = None
    for _ in range(config.max_parse_retries + 1):
        request = ChatRequest(model, tuple(messages), config.temperature, config.max_tokens)
        try:
            text = teacher_backend.complete(request).content
        except LLMError as exc:
            raise TeacherFormatFailure(f"[{instance.id}] teacher backend failed: {exc}") from exc
        try:
            output = parse_manager_output(text, instance.n_candidates)
            if not output.think or not output.justification:
                raise ParseError("reasoning trace or justification is empty")
        except ParseError as exc:
            last_failure = TeacherFormatFailure(f"[{instance.id}] {exc}")
            reminder = (
                "Your reply did not follow the required format. Include the <think> trace, "
                f"'Best Proposal: #{gt}', a justification and all three golden sections."
            )
        else:
            if output.selected_id == gt:
                reference = ReferenceAnnotation(
                    instance.id, output.think, output.justification, output.golden, gt
                )
                return AnnotatedInstance(instance, reference, model)
            last_failure = TeacherDisagreement(
                f"[{instance.id}] teacher selected #{output.selected_id}, maintainers chose #{gt}"
            )
            reminder = f"The selected proposal must be #{gt}. Rewrite your answer accordingly."
        messages += [{"role": "assistant", "content": text}, {"role": "user", "content": reminder}]
    assert last_failure is not None
    raise last_failure


def whitespace_count(text: str) -> int:
    return len(text.split())


@dataclass(frozen=True)
class LengthStats:
    n: int
    mean: float
    median: float
    p90: float
    min: float
    max: float

    def to_dict(self) -> dict[str, Any]:
        return {"n": self.n, "mean": self.mean, "median": self.median, "p90": self.p90,
                "min": self.min, "max": self.max}


def length_stats(lengths: Sequence[int]) -> LengthStats:
    if not lengths:
        raise EmptyDataset("no lengths to summarize")
    ordered = sorted(lengths)
    n = len(ordered)
    rank = max(1, math.ceil(Fraction(9, 10) * n))  # nearest rank, 1-based
    return LengthStats(
        n=n,
        mean=statistics.fmean(ordered),
        median=statistics.median(ordered),
        p90=ordered[rank - 1],
        min=ordered[0],
        max=ordered[-1],
    )


def token_length_stats(
    instances: Sequence[ManagerInstance], count_fn: Callable[[str], int] = whitespace_count
) -> LengthStats:
    """Length statistics of the rendered manager prompts."""
    if not instances:
        raise EmptyDataset("no instances")
    return length_stats([count_fn(render_manager_prompt(i).text) for i in instances])


class Theme(str, Enum):
    RISK_AND_SAFETY = "RiskAndSafety"
    FIX_DEPTH = "FixDepth"
    MAINTAINABILITY = "Maintainability"
    OTHERS = "Others"


class Criterion(str, Enum):
    MINIMAL_VERIFIABLE_CHANGE = "MinimalVerifiableChange"
    CONTROLLED_FIX_SCOPE = "ControlledFixScope"
    EDGE_CASE_ROBUSTNESS = "EdgeCaseRobustness"
    TIME_CRITICAL_MITIGATION = "TimeCriticalMitigation"
    ROOT_CAUSE_ELIMINATION = "RootCauseElimination"
    SYSTEMATIC_REMEDIATION = "SystematicRemediation"
    REPO_CONSTRAINT_CONFORMANCE = "RepoConstraintConformance"
    EXTENSIBILITY = "Extensibility"
    PRODUCT_DESIGN_MATCH = "ProductDesignMatch"
    DELIVERY_SPEED_TIE_BREAK = "DeliverySpeedTieBreak"


CRITERION_THEME = {
    Criterion.MINIMAL_VERIFIABLE_CHANGE: Theme.RISK_AND_SAFETY,
    Criterion.CONTROLLED_FIX_SCOPE: Theme.RISK_AND_SAFETY,
    Criterion.EDGE_CASE_ROBUSTNESS: Theme.RISK_AND_SAFETY,
    Criterion.TIME_CRITICAL_MITIGATION: Theme.RISK_AND_SAFETY,
    Criterion.ROOT_CAUSE_ELIMINATION: Theme.FIX_DEPTH,
    Criterion.SYSTEMATIC_REMEDIATION: Theme.FIX_DEPTH,
    Criterion.REPO_CONSTRAINT_CONFORMANCE: Theme.MAINTAINABILITY,
    Criterion.EXTENSIBILITY: Theme.MAINTAINABILITY,
    Criterion.PRODUCT_DESIGN_MATCH: Theme.OTHERS,
    Criterion.DELIVERY_SPEED_TIE_BREAK: Theme.OTHERS,
}

CRITERION_DESCRIPTIONS = {
    Criterion.MINIMAL_VERIFIABLE_CHANGE: "Smallest change that is easy to verify and unlikely to regress",
    Criterion.CONTROLLED_FIX_SCOPE: "Tightly bounded scope that is straightforward to carry out",
    Criterion.EDGE_CASE_ROBUSTNESS: "Handles unusual inputs and corner cases",
    Criterion.TIME_CRITICAL_MITIGATION: "Stops an urgent failure quickly",
    Criterion.ROOT_CAUSE_ELIMINATION: "Removes the underlying defect instead of masking the symptom",
    Criterion.SYSTEMATIC_REMEDIATION: "Fixes the whole class of failure, not only the reported case",
    Criterion.REPO_CONSTRAINT_CONFORMANCE: "Follows the project's existing conventions and constraints",
    Criterion.EXTENSIBILITY: "Leaves room for related future requirements",
    Criterion.PRODUCT_DESIGN_MATCH: "Fits intended product behavior",
    Criterion.DELIVERY_SPEED_TIE_BREAK: "Chosen among equals because it was ready first",
}


@dataclass(frozen=True)
class SelectionRationale:
    theme: Theme
    criterion: Criterion

    def __post_init__(self) -> None:
        if CRITERION_THEME[self.criterion] is not self.theme:
            raise ValueError(f"{self.criterion.value} belongs to {CRITERION_THEME[self.criterion].value}, "
                             f"not {self.theme.value}")

    @classmethod
    def of(cls, criterion: Criterion | str) -> SelectionRationale:
        criterion = Criterion(criterion)
        return cls(CRITERION_THEME[criterion], criterion)


@dataclass(frozen=True)
class RationaleTally:
    by_criterion: dict[Criterion, int] = field(default_factory=dict)
    by_theme: dict[Theme, int] = field(default_factory=dict)
    total: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "by_criterion": {c.value: n for c, n in self.by_criterion.items()},
            "by_theme": {t.value: n for t, n in self.by_theme.items()},
            "total": self.total,
        }


def tally_rationales(tags: Iterable[SelectionRationale]) -> RationaleTally:
    counts = Counter(t.criterion for t in tags)
    by_criterion = {c: counts.get(c, 0) for c in Criterion}
    by_theme = {
        theme: sum(n for c, n in by_criterion.items() if CRITERION_THEME[c] is theme) for theme in Theme
    }
    return RationaleTally(by_criterion, by_theme, sum(by_theme.values()))
