from __future__ import annotations

import json
import math
import random
import string
import threading
import urllib.error
import urllib.request

import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import GOLDEN, JUST, THINK, good_response
from propsel.core import GoldenProposal, ManagerOutput
from propsel.reward import (
    DEFAULT_WEIGHTS,
    ReferenceAnnotation,
    RewardWeights,
    combine,
    composite_reward,
    golden_similarity,
    lcs_length,
    make_server,
    selection_reward,
    text_similarity,
    tokenize,
)


def reference(gt: int = 1, golden: GoldenProposal = GOLDEN) -> ReferenceAnnotation:
    return ReferenceAnnotation("inst-1", THINK, JUST, golden, gt)


def dp_lcs(a, b):
    """Quadratic table LCS used as the oracle for the bit-parallel version."""
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


@pytest.mark.parametrize("sel, gt, want", [(2, 2, 1), (1, 2, 0), (7, 7, 1)])
def test_selection_reward(sel, gt, want):
    assert selection_reward(sel, gt) == want


def test_similarity_examples():
    assert text_similarity("fix the crash", "fix the crash") == 1.0
    assert text_similarity("alpha beta", "gamma delta") == 0.0
    assert abs(text_similarity("fix the crash", "fix crash now") - 2 / 3) <= 1e-9


def test_similarity_empty_cases():
    assert text_similarity("", "") == 1.0
    assert text_similarity("...", "  ") == 1.0
    assert text_similarity("", "words") == 0.0
    assert text_similarity("words", "") == 0.0


def test_tokenize_normalizes():
    assert tokenize("Fix, the CRASH!  now.") == ["fix", "the", "crash", "now"]
    assert text_similarity("Fix the crash.", "fix THE crash") == 1.0


def test_lcs_matches_dp_oracle():
    rng = random.Random(5)
    vocab = list("abcdefg")
    for _ in range(2000):
        a = [rng.choice(vocab) for _ in range(rng.randint(0, 30))]
        b = [rng.choice(vocab) for _ in range(rng.randint(0, 30))]
        assert lcs_length(a, b) == dp_lcs(a, b)


def _random_text(rng: random.Random) -> str:
    words = ["fix", "the", "crash", "null", "list", "Chat", "view", "guard", "a", "b", "."]
    return " ".join(rng.choice(words) for _ in range(rng.randint(0, 12)))


def test_similarity_symmetric_and_bounded_on_random_pairs():
    rng = random.Random(17)
    for _ in range(10_000):
        a, b = _random_text(rng), _random_text(rng)
        s = text_similarity(a, b)
        assert 0.0 <= s <= 1.0
        assert s == text_similarity(b, a)


@given(st.text(max_size=80), st.text(max_size=80))
def test_similarity_properties(a, b):
    s = text_similarity(a, b)
    assert 0.0 <= s <= 1.0
    assert s == text_similarity(b, a)
    assert text_similarity(a, a) == 1.0


@given(st.text(alphabet=string.ascii_letters + " ", max_size=60))
def test_similarity_one_on_normalization_equivalent_text(a):
    noisy = "  " + a.upper().replace(" ", " , ") + "!"
    assert text_similarity(a, noisy) == 1.0


def test_golden_similarity_is_section_mean():
    other = GoldenProposal(GOLDEN.problem, "unrelated words entirely", GOLDEN.solution)
    expected = (1.0 + text_similarity("unrelated words entirely", GOLDEN.root_cause) + 1.0) / 3
    assert golden_similarity(other, GOLDEN) == expected


def test_tabulated_examples():
    out = ManagerOutput(THINK, 1, JUST, GOLDEN, "")
    assert composite_reward(out, reference()).r == 1.0

    blank = GoldenProposal("zz", "zz", "zz")
    wrong = ManagerOutput("qq", 2, "qq", blank, "")
    assert composite_reward(wrong, reference()).r == 0.0

    half = lambda c, r: 0.5  # noqa: E731
    assert abs(composite_reward(out, reference(), scorer=half).r - 0.7) <= 1e-12


def test_raw_text_scoring_and_format_failure():
    rb = composite_reward(good_response(1), reference(), n_candidates=3)
    assert rb.format_ok == 1 and rb.r == 1.0
    bad = composite_reward("I like proposal one.", reference(), n_candidates=3)
    assert bad.format_ok == 0 and bad.r == 0.0 and bad.r_sel == 0
    with pytest.raises(ValueError):
        composite_reward("text", reference())


def test_instance_id_must_match_reference():
    out = ManagerOutput(THINK, 1, JUST, GOLDEN, "")
    with pytest.raises(ValueError):
        composite_reward(out, reference(), instance_id="other")


def test_weights_validation():
    with pytest.raises(ValueError):
        RewardWeights(0.5, 0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        RewardWeights(1.2, -0.2, 0.0, 0.0)
    assert RewardWeights.normalized(4, 2, 2, 2) == DEFAULT_WEIGHTS


def test_combine_matches_weighted_sum_on_random_draws():
    rng = random.Random(23)
    for _ in range(10_000):
        w = RewardWeights.normalized(*(rng.random() + 1e-6 for _ in range(4)))
        r_sel = rng.randint(0, 1)
        parts = [rng.random() for _ in range(3)]
        expected = w.w_sel * r_sel + w.w_think * parts[0] + w.w_justi * parts[1] + w.w_gold * parts[2]
        assert abs(combine(w, r_sel, *parts) - expected) <= 1e-12


def test_rescaled_weights_give_same_reward():
    rng = random.Random(29)
    for _ in range(500):
        raw = [rng.random() + 0.01 for _ in range(4)]
        scale = rng.uniform(0.1, 100)
        a = RewardWeights.normalized(*raw)
        b = RewardWeights.normalized(*(x * scale for x in raw))
        comps = (rng.randint(0, 1), rng.random(), rng.random(), rng.random())
        assert abs(combine(a, *comps) - combine(b, *comps)) <= 1e-12


def test_monotone_in_each_component():
    rng = random.Random(31)
    for _ in range(1000):
        comps = [rng.randint(0, 1), rng.random(), rng.random(), rng.random()]
        base = combine(DEFAULT_WEIGHTS, *comps)
        for k in range(1, 4):
            bumped = comps[:]
            bumped[k] = min(1.0, bumped[k] + rng.random())
            assert combine(DEFAULT_WEIGHTS, *bumped) >= base - 1e-15


def test_wrong_id_bounded_by_one_minus_selection_weight():
    rng = random.Random(37)
    for _ in range(1000):
        w = RewardWeights.normalized(*(rng.random() + 1e-3 for _ in range(4)))
        r = combine(w, 0, rng.random(), rng.random(), rng.random())
        assert r <= 1 - w.w_sel + 1e-12


def _payload(text: str, gt: int = 1) -> dict:
    return {"raw_text": text, "n_candidates": 3, "reference": reference(gt).to_dict()}


@pytest.fixture
def server():
    srv = make_server(port=0)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()
    srv.server_close()


def _post(url: str, body) -> tuple[int, object]:
    req = urllib.request.Request(url, data=json.dumps(body).encode(), headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_service_score(server):
    status, body = _post(server + "/score", _payload(good_response(1)))
    assert status == 200
    assert body["r"] == 1.0 and body["format_ok"] == 1
    status, body = _post(server + "/score", _payload(good_response(2)))
    assert math.isclose(body["r"], 0.6)


def test_service_batch_and_errors(server):
    status, body = _post(server + "/score_batch", [_payload(good_response(1)), _payload("nope")])
    assert status == 200 and [b["r"] for b in body] == [1.0, 0.0]
    status, body = _post(server + "/score_batch", {"items": [_payload(good_response(1))]})
    assert status == 200 and len(body) == 1
    assert _post(server + "/score", {"raw_text": "x"})[0] == 400
    assert _post(server + "/nowhere", {})[0] == 404
