"""Scoring for manager and IC runs, plus bin and solved-set overlap analyses."""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from typing import Any

from .core import IssueRecord, ManagerInstance, Money, PropselError, read_jsonl, total
from .engine import Decision


class ScoringError(PropselError):
    pass


class UnknownInstance(ScoringError):
    pass


class DuplicateDecision(ScoringError):
    pass


class MissingDecision(ScoringError):
    pass


class PriceMismatch(ScoringError):
    pass


class MismatchedInstanceSets(ScoringError):
    pass


def round_half_up(value: Fraction, dp: int) -> Decimal:
    """Exact half-up rounding of a rational to ``dp`` decimal places."""
    if value < 0:
        raise ValueError("only non-negative values are rounded")
    scaled = value * 10**dp
    q = (scaled.numerator * 2 + scaled.denominator) // (2 * scaled.denominator)
    return Decimal(q).scaleb(-dp)


def percent(num: int, den: int) -> Fraction:
    if den <= 0:
        raise ValueError("denominator must be positive")
    return Fraction(100 * num, den)


@dataclass(frozen=True)
class ManagerScore:
    n_match: int
    n_total: int
    dollars_earned: Money
    dollars_total: Money
    n_errors: int = 0

    def __post_init__(self) -> None:
        if self.n_total < 1 or not 0 <= self.n_match <= self.n_total:
            raise ValueError("need 0 <= n_match <= n_total and n_total >= 1")
        if self.dollars_earned > self.dollars_total:
            raise ValueError("dollars_earned exceeds dollars_total")

    @property
    def match_pct(self) -> float:
        return float(self.match_fraction)

    @property
    def match_fraction(self) -> Fraction:
        return percent(self.n_match, self.n_total)

    @property
    def earned_fraction(self) -> Fraction:
        if self.dollars_total.amount == 0:
            return Fraction(0)
        return percent(self.dollars_earned.amount, self.dollars_total.amount)

    @property
    def earned_pct(self) -> float:
        return float(self.earned_fraction)

    def to_dict(self, dp: int = 2) -> dict[str, Any]:
        return {
            "match_pct": str(round_half_up(self.match_fraction, dp)),
            "n_match": self.n_match,
            "n_total": self.n_total,
            "earned_pct": str(round_half_up(self.earned_fraction, dp)),
            "dollars_earned": self.dollars_earned.amount,
            "dollars_total": self.dollars_total.amount,
            "n_errors": self.n_errors,
        }

    def to_text(self, dp: int = 2) -> str:
        rows = [
            ("Match (%)", str(round_half_up(self.match_fraction, dp))),
            ("#Match", f"{self.n_match}/{self.n_total}"),
            ("Earned (%)", str(round_half_up(self.earned_fraction, dp))),
            ("$Earned", f"{self.dollars_earned} / {self.dollars_total}"),
            ("Errors", str(self.n_errors)),
        ]
        return _aligned(rows)


@dataclass(frozen=True)
class ICScore:
    n_pass: int
    n_total: int
    dollars_earned: Money
    dollars_total: Money

    @property
    def pass_fraction(self) -> Fraction:
        return percent(self.n_pass, self.n_total)

    @property
    def pass_pct(self) -> float:
        return float(self.pass_fraction)

    @property
    def earned_fraction(self) -> Fraction:
        if self.dollars_total.amount == 0:
            return Fraction(0)
        return percent(self.dollars_earned.amount, self.dollars_total.amount)

    @property
    def earned_pct(self) -> float:
        return float(self.earned_fraction)

    def to_dict(self, dp: int = 1) -> dict[str, Any]:
        return {
            "pass_pct": str(round_half_up(self.pass_fraction, dp)),
            "n_pass": self.n_pass,
            "n_total": self.n_total,
            "earned_pct": str(round_half_up(self.earned_fraction, dp)),
            "dollars_earned": self.dollars_earned.amount,
            "dollars_total": self.dollars_total.amount,
        }

    def to_text(self, dp: int = 1) -> str:
        rows = [
            ("Pass (%)", str(round_half_up(self.pass_fraction, dp))),
            ("#Pass", f"{self.n_pass}/{self.n_total}"),
            ("Earned (%)", str(round_half_up(self.earned_fraction, dp))),
            ("$Earned", f"{self.dollars_earned} / {self.dollars_total}"),
        ]
        return _aligned(rows)


def _aligned(rows: Sequence[tuple[str, str]]) -> str:
    width = max(len(k) for k, _ in rows)
    return "".join(f"{k.ljust(width)}  {v}\n" for k, v in rows)


def _index_decisions(
    decisions: Iterable[Decision], known: Iterable[str], *, allow_partial: bool
) -> dict[str, Decision]:
    known_ids = set(known)
    by_id: dict[str, Decision] = {}
    for d in decisions:
        if d.instance_id not in known_ids:
            raise UnknownInstance(f"decision for unknown instance {d.instance_id!r}")
        if d.instance_id in by_id:
            raise DuplicateDecision(f"more than one decision for {d.instance_id!r}")
        by_id[d.instance_id] = d
    missing = sorted(known_ids - by_id.keys())
    if missing and not allow_partial:
        preview = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise MissingDecision(f"{len(missing)} instance(s) have no decision: {preview}")
    return by_id


def is_match(decision: Decision | None, instance: ManagerInstance) -> bool:
    return (
        decision is not None
        and decision.output is not None
        and decision.output.selected_id == instance.ground_truth_id
    )


def score_manager_run(
    decisions: Iterable[Decision],
    instances: Sequence[ManagerInstance],
    *,
    allow_partial: bool = False,
) -> ManagerScore:
    if not instances:
        raise ScoringError("no instances to score")
    by_id = _index_decisions(decisions, (i.id for i in instances), allow_partial=allow_partial)
    ordered = sorted(instances, key=lambda i: i.id)
    matched = [i for i in ordered if is_match(by_id.get(i.id), i)]
    n_errors = sum(1 for d in by_id.values() if d.error is not None)
    return ManagerScore(
        n_match=len(matched),
        n_total=len(ordered),
        dollars_earned=total(i.price for i in matched),
        dollars_total=total(i.price for i in ordered),
        n_errors=n_errors,
    )


@dataclass(frozen=True)
class Verdict:
    instance_id: str
    passed: bool
    price: Money = Money(0)

    def to_dict(self) -> dict[str, Any]:
        return {"instance_id": self.instance_id, "passed": self.passed, "price_usd": self.price.amount}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Verdict:
        passed = data.get("passed")
        if not isinstance(passed, bool):
            raise ScoringError(f"verdict for {data.get('instance_id')!r} has no boolean 'passed'")
        return cls(str(data["instance_id"]), passed, Money(int(data.get("price_usd", 0))))


def load_verdicts(path: str) -> list[Verdict]:
    return [Verdict.from_dict(row) for row in read_jsonl(path)]


def score_ic_run(
    verdicts: Iterable[Verdict],
    instances: Sequence[IssueRecord],
    *,
    allow_partial: bool = False,
    check_prices: bool = True,
) -> ICScore:
    if not instances:
        raise ScoringError("no instances to score")
    prices = {i.id: i.price for i in instances}
    by_id: dict[str, Verdict] = {}
    for v in verdicts:
        if v.instance_id not in prices:
            raise UnknownInstance(f"verdict for unknown instance {v.instance_id!r}")
        if v.instance_id in by_id:
            raise DuplicateDecision(f"more than one verdict for {v.instance_id!r}")
        if check_prices and v.price.amount and v.price != prices[v.instance_id]:
            raise PriceMismatch(
                f"{v.instance_id}: verdict price {v.price} != instance price {prices[v.instance_id]}"
            )
        by_id[v.instance_id] = v
    missing = prices.keys() - by_id.keys()
    if missing and not allow_partial:
        raise MissingDecision(f"{len(missing)} instance(s) have no verdict")
    passed = sorted(i for i, v in by_id.items() if v.passed)
    return ICScore(
        n_pass=len(passed),
        n_total=len(prices),
        dollars_earned=total(prices[i] for i in passed),
        dollars_total=total(prices.values()),
    )


@dataclass(frozen=True)
class BinRow:
    bin_label: str
    n_correct: int
    n_total: int

    @property
    def pct(self) -> Fraction | None:
        return percent(self.n_correct, self.n_total) if self.n_total else None

    def to_dict(self, dp: int = 2) -> dict[str, Any]:
        pct = self.pct
        return {
            "bin_label": self.bin_label,
            "n_correct": self.n_correct,
            "n_total": self.n_total,
            "pct": None if pct is None else str(round_half_up(pct, dp)),
        }


@dataclass(frozen=True)
class BinReport:
    rows: tuple[BinRow, ...]

    def __getitem__(self, label: str) -> BinRow:
        for row in self.rows:
            if row.bin_label == label:
                return row
        raise KeyError(label)

    @property
    def n_total(self) -> int:
        return sum(r.n_total for r in self.rows)

    def to_dict(self, dp: int = 2) -> list[dict[str, Any]]:
        return [r.to_dict(dp) for r in self.rows]

    def to_text(self, dp: int = 2) -> str:
        lines = [("bin", "correct/total", "pct")]
        for r in self.rows:
            pct = r.pct
            lines.append((r.bin_label, f"{r.n_correct}/{r.n_total}",
                          "-" if pct is None else str(round_half_up(pct, dp))))
        widths = [max(len(line[i]) for line in lines) for i in range(3)]
        return "".join(
            "  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() + "\n"
            for line in lines
        )

    def to_csv(self, dp: int = 2) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bin_label", "n_correct", "n_total", "pct"])
        for r in self.rows:
            d = r.to_dict(dp)
            writer.writerow([d["bin_label"], d["n_correct"], d["n_total"], d["pct"] or ""])
        return buf.getvalue()


COUNT_BINS = ("2", "3", "4", "5", "6+")
REWARD_BINS = (("$0-500", 0, 500), ("$500-1K", 500, 1000), ("$1K-2K", 1000, 2000), ("$2K+", 2000, None))


def count_bin(n: int) -> str:
    if n < 2:
        raise ValueError(f"instances have at least 2 proposals, got {n}")
    return "6+" if n >= 6 else str(n)


def reward_bin(price: Money) -> str:
    for label, lo, hi in REWARD_BINS:
        if price.amount >= lo and (hi is None or price.amount < hi):
            return label
    raise AssertionError("unreachable: bins cover [0, inf)")  # pragma: no cover


def _bin(
    decisions: Iterable[Decision],
    instances: Sequence[ManagerInstance],
    labels: Sequence[str],
    key: Callable[[ManagerInstance], str],
    allow_partial: bool,
) -> BinReport:
    by_id = _index_decisions(decisions, (i.id for i in instances), allow_partial=allow_partial)
    correct = dict.fromkeys(labels, 0)
    counts = dict.fromkeys(labels, 0)
    for inst in sorted(instances, key=lambda i: i.id):
        label = key(inst)
        counts[label] += 1
        correct[label] += is_match(by_id.get(inst.id), inst)
    return BinReport(tuple(BinRow(lab, correct[lab], counts[lab]) for lab in labels))


def bin_by_proposal_count(
    decisions: Iterable[Decision], instances: Sequence[ManagerInstance], *, allow_partial: bool = False
) -> BinReport:
    return _bin(decisions, instances, COUNT_BINS, lambda i: count_bin(i.n_candidates), allow_partial)


def bin_by_reward(
    decisions: Iterable[Decision], instances: Sequence[ManagerInstance], *, allow_partial: bool = False
) -> BinReport:
    labels = [label for label, _, _ in REWARD_BINS]
    return _bin(decisions, instances, labels, lambda i: reward_bin(i.price), allow_partial)


@dataclass(frozen=True)
class OverlapReport:
    a_only: frozenset[str]
    b_only: frozenset[str]
    shared: frozenset[str]

    @property
    def a_only_fraction(self) -> Fraction | None:
        n_a = len(self.a_only) + len(self.shared)
        return Fraction(len(self.a_only), n_a) if n_a else None

    def counts(self) -> dict[str, int]:
        return {"a_only": len(self.a_only), "b_only": len(self.b_only), "shared": len(self.shared)}

    def to_dict(self) -> dict[str, Any]:
        frac = self.a_only_fraction
        return {
            **self.counts(),
            "a_only_fraction": None if frac is None else str(round_half_up(frac, 4)),
            "a_only_ids": sorted(self.a_only),
            "b_only_ids": sorted(self.b_only),
            "shared_ids": sorted(self.shared),
        }

    def to_text(self) -> str:
        frac = self.a_only_fraction
        rows = [(k, str(v)) for k, v in self.counts().items()]
        rows.append(("a_only_fraction", "-" if frac is None else str(round_half_up(frac, 4))))
        return _aligned(rows)


def overlap_analysis(set_a: Iterable[str], set_b: Iterable[str]) -> OverlapReport:
    a, b = frozenset(set_a), frozenset(set_b)
    return OverlapReport(a_only=a - b, b_only=b - a, shared=a & b)


def passed_ids(verdicts: Iterable[Verdict]) -> frozenset[str]:
    return frozenset(v.instance_id for v in verdicts if v.passed)


def selector_overlap(run_a: Sequence[Verdict], run_b: Sequence[Verdict]) -> OverlapReport:
    ids_a = {v.instance_id for v in run_a}
    ids_b = {v.instance_id for v in run_b}
    if ids_a != ids_b or len(ids_a) != len(run_a) or len(ids_b) != len(run_b):
        raise MismatchedInstanceSets(
            f"runs cover different instances ({len(ids_a ^ ids_b)} differ)"
        )
    return overlap_analysis(passed_ids(run_a), passed_ids(run_b))


@dataclass
class FixtureVerifier:
    """Fills verdict skeletons from a fixed set of instance ids known to pass.

    Stands in for the real end-to-end test environments in tests and demos.
    """

    passing: frozenset[str] = field(default_factory=frozenset)

    def verify(self, skeletons: Iterable[Mapping[str, Any]]) -> list[Verdict]:
        return [
            Verdict(str(s["instance_id"]), s["instance_id"] in self.passing,
                    Money(int(s.get("price_usd", 0))))
            for s in skeletons
        ]


def dumps_report(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
