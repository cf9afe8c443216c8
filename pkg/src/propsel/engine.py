"""The technical manager: turn an instance into a validated selection decision."""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any

from .core import GoldenProposal, ManagerInstance, ManagerOutput, dumps_jsonl
from .llm import Backend, ChatRequest, LLMError
from .manager_io import FORMAT_REMINDER, ParseError, extract_think, parse_manager_output, render_manager_prompt

logger = logging.getLogger(__name__)

Clock = Callable[[], float]

ERROR_TAGS = ("MissingSelection", "SelectionOutOfRange", "MissingGolden", "BackendFailure")


@dataclass(frozen=True)
class ManagerRunConfig:
    temperature: float = 0.0
    max_parse_retries: int = 2
    max_tokens: int = 4096

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_parse_retries < 0:
            raise ValueError("max_parse_retries must be >= 0")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Decision:
    instance_id: str
    output: ManagerOutput | None = None
    error: str | None = None
    latency_ms: int = 0
    attempts: int = 1
    model: str = ""
    raw_text: str = ""
    prompt_tokens: int = 0

    def __post_init__(self) -> None:
        if (self.output is None) == (self.error is None):
            raise ValueError("exactly one of output/error must be set")
        if self.attempts < 1 or self.latency_ms < 0:
            raise ValueError("attempts must be >= 1 and latency_ms >= 0")

    @property
    def selected_id(self) -> int | None:
        return self.output.selected_id if self.output else None

    def to_log_dict(self) -> dict[str, Any]:
        out = self.output
        return {
            "instance_id": self.instance_id,
            "selected_id": out.selected_id if out else None,
            "justification": out.justification if out else None,
            "golden": out.golden.to_dict() if out else None,
            "error": self.error,
            "raw_text": out.raw_text if out else self.raw_text,
            "latency_ms": self.latency_ms,
            "attempts": self.attempts,
            "model": self.model,
        }

    @classmethod
    def from_log_dict(cls, data: Mapping[str, Any]) -> Decision:
        raw = data.get("raw_text") or ""
        output = None
        if data.get("error") is None:
            output = ManagerOutput(
                think=extract_think(raw),
                selected_id=int(data["selected_id"]),
                justification=data.get("justification") or "",
                golden=GoldenProposal.from_dict(data["golden"]),
                raw_text=raw,
            )
        return cls(
            instance_id=str(data["instance_id"]),
            output=output,
            error=data.get("error"),
            latency_ms=int(data.get("latency_ms", 0)),
            attempts=int(data.get("attempts", 1)),
            model=data.get("model", ""),
            raw_text=raw,
        )


def decide(
    instance: ManagerInstance,
    backend: Backend,
    config: ManagerRunConfig = ManagerRunConfig(),
    *,
    clock: Clock = time.perf_counter,
) -> Decision:
    """Ask ``backend`` to select and synthesize, re-asking on malformed replies.

    Never raises for backend or parse failures; those come back as an error
    ``Decision``.
    """
    prompt = render_manager_prompt(instance)
    messages: list[dict[str, str]] = [{"role": "user", "content": prompt.text}]
    model = getattr(backend, "model", "")
    start = clock()
    attempts = 0
    last_error = "BackendFailure"
    last_text = ""
    prompt_tokens = 0

    def elapsed() -> int:
        return max(0, round((clock() - start) * 1000))

    for _ in range(config.max_parse_retries + 1):
        attempts += 1
        request = ChatRequest(model, tuple(messages), config.temperature, config.max_tokens)
        try:
            response = backend.complete(request)
        except LLMError as exc:
            logger.warning("[%s] backend failure: %s", instance.id, exc)
            return Decision(instance.id, error="BackendFailure", latency_ms=elapsed(),
                            attempts=attempts, model=model, raw_text=last_text)
        prompt_tokens = prompt_tokens or response.prompt_tokens
        last_text = response.content
        try:
            output = parse_manager_output(response.content, prompt.n_candidates)
        except ParseError as exc:
            last_error = exc.tag
            logger.info("[%s] attempt %d unparseable: %s", instance.id, attempts, exc)
            messages += [
                {"role": "assistant", "content": response.content},
                {"role": "user", "content": FORMAT_REMINDER},
            ]
            continue
        return Decision(instance.id, output=output, latency_ms=elapsed(), attempts=attempts,
                        model=model, raw_text=response.content, prompt_tokens=prompt_tokens)
    return Decision(instance.id, error=last_error, latency_ms=elapsed(), attempts=attempts,
                    model=model, raw_text=last_text, prompt_tokens=prompt_tokens)


def decide_batch(
    instances: Sequence[ManagerInstance],
    backend: Backend,
    config: ManagerRunConfig = ManagerRunConfig(),
    parallelism: int = 1,
    *,
    clock: Clock = time.perf_counter,
) -> list[Decision]:
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    def run(inst: ManagerInstance) -> Decision:
        try:
            return decide(inst, backend, config, clock=clock)
        except Exception:  # isolate unexpected failures per instance
            logger.exception("[%s] decide crashed", inst.id)
            return Decision(inst.id, error="BackendFailure", model=getattr(backend, "model", ""))

    if parallelism == 1 or len(instances) <= 1:
        return [run(inst) for inst in instances]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        # map() yields in input order regardless of completion order
        return list(pool.map(run, instances))


def dumps_decision_log(decisions: Iterable[Decision]) -> str:
    return dumps_jsonl(d.to_log_dict() for d in decisions)
