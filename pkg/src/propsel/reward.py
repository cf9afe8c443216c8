"""Composite reward for manager outputs: exact selection indicator plus text similarity."""

from __future__ import annotations

import json
import logging
import math
import unicodedata
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any

from .core import GoldenProposal, ManagerOutput, PropselError
from .manager_io import ParseError, parse_manager_output

logger = logging.getLogger(__name__)

Scorer = Callable[[str, str], float]


@dataclass(frozen=True)
class RewardWeights:
    w_sel: float = 0.4
    w_think: float = 0.2
    w_justi: float = 0.2
    w_gold: float = 0.2

    def __post_init__(self) -> None:
        values = astuple_weights(self)
        if any(w < 0 or not math.isfinite(w) for w in values):
            raise ValueError(f"weights must be finite and non-negative, got {values}")
        if abs(math.fsum(values) - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {math.fsum(values)!r}")

    @classmethod
    def normalized(cls, w_sel: float, w_think: float, w_justi: float, w_gold: float) -> RewardWeights:
        s = math.fsum((w_sel, w_think, w_justi, w_gold))
        if s <= 0:
            raise ValueError("weights must have a positive sum")
        return cls(w_sel / s, w_think / s, w_justi / s, w_gold / s)


def astuple_weights(w: RewardWeights) -> tuple[float, float, float, float]:
    return (w.w_sel, w.w_think, w.w_justi, w.w_gold)


DEFAULT_WEIGHTS = RewardWeights()


@dataclass(frozen=True)
class ReferenceAnnotation:
    instance_id: str
    think: str
    justification: str
    golden: GoldenProposal
    ground_truth_id: int

    def __post_init__(self) -> None:
        if self.ground_truth_id < 1:
            raise ValueError("ground_truth_id must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "think": self.think,
            "justification": self.justification,
            "golden": self.golden.to_dict(),
            "ground_truth_id": self.ground_truth_id,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], instance_id: str = "") -> ReferenceAnnotation:
        return cls(
            instance_id=data.get("instance_id", instance_id),
            think=data.get("think", ""),
            justification=data.get("justification", ""),
            golden=GoldenProposal.from_dict(data["golden"]),
            ground_truth_id=int(data["ground_truth_id"]),
        )


@dataclass(frozen=True)
class RewardBreakdown:
    r: float
    r_sel: int
    r_think: float
    r_justi: float
    r_gold: float
    format_ok: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def selection_reward(selected_id: int, ground_truth_id: int) -> int:
    return int(selected_id == ground_truth_id)


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    kept = [
        ch for ch in text.lower() if not unicodedata.category(ch).startswith("P")
    ]
    return "".join(kept).split()


def lcs_length(a: list[str], b: list[str]) -> int:
    """Length of the longest common subsequence of two token lists.

    Bit-parallel formulation: one machine-word-style update per token of ``b``
    over an ``len(a)``-bit integer, so long traces stay cheap in pure Python.
    """
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return 0
    masks: dict[str, int] = {}
    for i, tok in enumerate(a):
        masks[tok] = masks.get(tok, 0) | (1 << i)
    full = (1 << len(a)) - 1
    v = full
    for tok in b:
        m = masks.get(tok)
        if m is None:
            continue
        u = v & m
        v = ((v + u) | (v - u)) & full
    return len(a) - v.bit_count()


def text_similarity(candidate: str, reference: str) -> float:
    """Token-level LCS F1 in [0, 1]."""
    c, r = tokenize(candidate), tokenize(reference)
    if not c and not r:
        return 1.0
    if not c or not r:
        return 0.0
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    # F1 = 2PR/(P+R) with P = L/|c|, R = L/|r| simplifies to 2L/(|c|+|r|)
    return 2.0 * lcs / (len(c) + len(r))


def golden_similarity(candidate: GoldenProposal, reference: GoldenProposal, scorer: Scorer = text_similarity) -> float:
    scores = [
        scorer(candidate.problem, reference.problem),
        scorer(candidate.root_cause, reference.root_cause),
        scorer(candidate.solution, reference.solution),
    ]
    return math.fsum(scores) / 3.0


def combine(weights: RewardWeights, r_sel: float, r_think: float, r_justi: float, r_gold: float) -> float:
    return (
        weights.w_sel * r_sel
        + weights.w_think * r_think
        + weights.w_justi * r_justi
        + weights.w_gold * r_gold
    )


ZERO_REWARD = RewardBreakdown(0.0, 0, 0.0, 0.0, 0.0, 0)


def composite_reward(
    output: ManagerOutput | str,
    reference: ReferenceAnnotation,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    *,
    n_candidates: int | None = None,
    scorer: Scorer = text_similarity,
    instance_id: str | None = None,
) -> RewardBreakdown:
    """Score one response. Raw text that does not parse earns zero."""
    if instance_id is not None and reference.instance_id and instance_id != reference.instance_id:
        raise ValueError(f"reference is for {reference.instance_id!r}, not {instance_id!r}")
    if isinstance(output, str):
        if n_candidates is None:
            raise ValueError("n_candidates is required when scoring raw text")
        try:
            output = parse_manager_output(output, n_candidates)
        except (ParseError, ValueError):
            return ZERO_REWARD
    r_sel = selection_reward(output.selected_id, reference.ground_truth_id)
    r_think = scorer(output.think, reference.think)
    r_justi = scorer(output.justification, reference.justification)
    r_gold = golden_similarity(output.golden, reference.golden, scorer)
    return RewardBreakdown(
        r=combine(weights, r_sel, r_think, r_justi, r_gold),
        r_sel=r_sel,
        r_think=r_think,
        r_justi=r_justi,
        r_gold=r_gold,
        format_ok=1,
    )


class BadScoreRequest(PropselError):
    pass


def score_request(payload: Mapping[str, Any]) -> dict[str, Any]:
    """Handle one scoring-service request body."""
    try:
        raw_text = payload["raw_text"]
        n = int(payload["n_candidates"])
        reference = ReferenceAnnotation.from_dict(payload["reference"])
        weights = RewardWeights(**payload["weights"]) if payload.get("weights") else DEFAULT_WEIGHTS
    except (KeyError, TypeError, ValueError) as exc:
        raise BadScoreRequest(f"invalid request: {exc}") from exc
    if not isinstance(raw_text, str):
        raise BadScoreRequest("raw_text must be a string")
    return composite_reward(raw_text, reference, weights, n_candidates=n).to_dict()


class _ScoreHandler(BaseHTTPRequestHandler):
    server_version = "propsel-reward/1"

    def log_message(self, fmt: str, *args: Any) -> None:
        logger.debug("%s - %s", self.address_string(), fmt % args)

    def _send(self, status: int, body: Any) -> None:
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self) -> None:  # noqa: N802
        length = int(self.headers.get("Content-Length") or 0)
        try:
            payload = json.loads(self.rfile.read(length) or b"null")
        except json.JSONDecodeError:
            self._send(400, {"error": "body is not valid JSON"})
            return
        try:
            if self.path == "/score":
                if not isinstance(payload, dict):
                    raise BadScoreRequest("expected a JSON object")
                self._send(200, score_request(payload))
            elif self.path == "/score_batch":
                items = payload.get("items") if isinstance(payload, dict) else payload
                if not isinstance(items, list):
                    raise BadScoreRequest("expected a JSON array or {\"items\": [...]}")
                self._send(200, [score_request(item) for item in items])
            else:
                self._send(404, {"error": f"unknown path {self.path}"})
        except BadScoreRequest as exc:
            self._send(400, {"error": str(exc)})


def make_server(host: str = "127.0.0.1", port: int = 8000) -> ThreadingHTTPServer:
    """Create (but do not start) the scoring HTTP server; port 0 picks a free port."""
    return ThreadingHTTPServer((host, port), _ScoreHandler)


def serve(host: str = "127.0.0.1", port: int = 8000) -> None:
    server = make_server(host, port)
    logger.info("reward service listening on http://%s:%d", *server.server_address[:2])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
