from __future__ import annotations

import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import make_instance, manager_fixture
from propsel.core import (
    DuplicateIssue,
    EmptyField,
    GoldenProposal,
    GroundTruthOutOfRange,
    ManagerInstance,
    ManagerOutput,
    Money,
    NonContiguousIds,
    Proposal,
    TooFewProposals,
    dataset_stats,
    load_instances,
    save_instances,
    total,
    validate_dataset,
    validate_instance,
)


def test_minimal_valid_instance():
    inst = make_instance(n=2, gt=2)
    assert validate_instance(inst) is inst


def test_one_proposal_rejected():
    with pytest.raises(TooFewProposals, match="inst-1"):
        validate_instance(make_instance(n=1, gt=1))


def test_ground_truth_out_of_range():
    with pytest.raises(GroundTruthOutOfRange):
        validate_instance(make_instance(n=3, gt=5))


def test_non_contiguous_ids():
    inst = make_instance(n=3)
    shuffled = ManagerInstance(inst.issue, (inst.proposals[0], inst.proposals[2], inst.proposals[1]), 1)
    with pytest.raises(NonContiguousIds):
        validate_instance(shuffled)


def test_empty_raw_text_and_structured_field():
    inst = make_instance()
    blank = ManagerInstance(inst.issue, (Proposal(1, "  "), inst.proposals[1]), 1)
    with pytest.raises(EmptyField):
        validate_instance(blank)
    blank_field = ManagerInstance(inst.issue, (Proposal(1, "text", problem=""), inst.proposals[1]), 1)
    with pytest.raises(EmptyField):
        validate_instance(blank_field)


def test_missing_ground_truth_allowed_only_when_requested():
    inst = make_instance(gt=None)
    with pytest.raises(GroundTruthOutOfRange):
        validate_instance(inst)
    assert validate_instance(inst, require_ground_truth=False) is inst


def test_dataset_rejects_duplicate_repo_issue():
    a = make_instance("a", number=7)
    b = make_instance("b", number=7)
    with pytest.raises(DuplicateIssue, match="org/app#7"):
        validate_dataset([a, b])


def test_money():
    assert Money(250) + Money(500) == Money(750)
    assert str(Money(264500)) == "$264,500"
    with pytest.raises(ValueError):
        Money(-1)
    with pytest.raises(TypeError):
        Money(2.5)  # type: ignore[arg-type]


@given(st.lists(st.integers(min_value=0, max_value=10**15), max_size=200))
def test_money_sum_is_exact(amounts):
    assert total(Money(a) for a in amounts).amount == sum(amounts)


def test_dataset_stats_examples():
    empty = dataset_stats([])
    assert (empty.n_issues, empty.n_proposals, empty.total_price, empty.proposal_count_histogram) == (0, 0, Money(0), {})
    s = dataset_stats([make_instance("a", n=2, price=250, number=1), make_instance("b", n=3, price=500, number=2)])
    assert (s.n_issues, s.n_proposals, s.total_price, s.proposal_count_histogram) == (2, 5, Money(750), {2: 1, 3: 1})


def test_dataset_stats_on_benchmark_sized_fixture():
    fx = manager_fixture()
    s = dataset_stats(fx.instances)
    assert s.n_issues == 265
    assert s.total_price == Money(264_500)


def test_dataset_stats_order_invariant():
    fx = manager_fixture()
    shuffled = fx.instances[:]
    random.Random(3).shuffle(shuffled)
    assert dataset_stats(shuffled) == dataset_stats(fx.instances)


def test_jsonl_round_trip_preserves_unknown_keys(tmp_path):
    row = make_instance(n=3, gt=2).to_dict()
    row["source"] = "scrape-2025"
    row["proposals"][0]["author"] = "contributor-a"
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(row) + "\n")
    [inst] = load_instances(path)
    assert inst.extra == {"source": "scrape-2025"}
    assert inst.proposals[0].extra == {"author": "contributor-a"}
    out = tmp_path / "out.jsonl"
    save_instances(out, [inst])
    assert json.loads(out.read_text()) == row


_text = st.text(min_size=1, max_size=40).filter(lambda s: s.strip())


@given(
    n=st.integers(min_value=2, max_value=6),
    price=st.integers(min_value=0, max_value=10**7),
    texts=st.lists(_text, min_size=6, max_size=6),
    data=st.data(),
)
def test_instance_encode_decode_round_trip(n, price, texts, data):
    gt = data.draw(st.integers(min_value=1, max_value=n))
    inst = make_instance(n=n, gt=gt, price=price)
    proposals = tuple(Proposal(k, texts[k - 1], problem=texts[-1] if k == 1 else None) for k in range(1, n + 1))
    inst = ManagerInstance(inst.issue, proposals, gt, extra={"note": texts[0]})
    assert ManagerInstance.from_dict(json.loads(json.dumps(inst.to_dict()))) == inst


@given(st.lists(_text, min_size=5, max_size=5), st.integers(min_value=1, max_value=9))
def test_output_round_trip(texts, sid):
    out = ManagerOutput(texts[0], sid, texts[1], GoldenProposal(*texts[2:5]), "raw")
    assert ManagerOutput.from_dict(json.loads(json.dumps(out.to_dict()))) == out
