"""Judge client interface and the offline mock.

A judge call carries a stage name, a text payload and the index of the sampled
output path. It returns one sampled verdict ("pass" / "fail") or, for the
rewriting stage, one rewritten response.
"""
from __future__ import annotations

import enum
import json
import re
import threading
from dataclasses import dataclass, field
from typing import Callable, Protocol

from ..errors import JudgeTransportError
from .grammar import ParallelGroup, Serial, StructuredResponse, has_tag, parse_tagged, serialize

PASS = "pass"
FAIL = "fail"


class Stage(enum.Enum):
    REWRITING = "rewriting"
    INDEPENDENCE = "independence"
    INTEGRITY_ANSWER = "integrity_answer"


@dataclass(frozen=True)
class JudgeRequest:
    stage: Stage
    payload: str
    sample_index: int

    def to_json(self) -> dict:
        return {"stage": self.stage.value, "payload": self.payload, "sample_index": self.sample_index}


class JudgeClient(Protocol):
    def call(self, request: JudgeRequest) -> str: ...


def group_payload(group: ParallelGroup) -> str:
    return json.dumps({"titles": list(group.titles), "branches": list(group.branches)},
                      ensure_ascii=False, sort_keys=True)


def answer_payload(prompt: str, response: str) -> str:
    return json.dumps({"prompt": prompt, "response": response}, ensure_ascii=False, sort_keys=True)


def rewrite_payload(prompt: str, response: str) -> str:
    return answer_payload(prompt, response)


# list items: "- x", "* x", "1. x", "1) x"
_ITEM = re.compile(r"^[ \t]*(?:[-*]|\d+[.)])[ \t]+(\S.*)$")


def _itemize(text: str, max_runs: int | None) -> list:
    """Turn runs of >= 2 list lines into parallel groups."""
    lines = text.splitlines(keepends=True)
    out: list = []
    buf: list[str] = []
    runs = 0
    i = 0
    while i < len(lines):
        j = i
        items = []
        while j < len(lines) and (m := _ITEM.match(lines[j].rstrip("\n"))):
            items.append(m.group(1).strip())
            j += 1
        if len(items) >= 2 and (max_runs is None or runs < max_runs) and not any(map(has_tag, items)):
            titles, bodies = [], []
            for k, item in enumerate(items, 1):
                head, sep, rest = item.partition(": ")
                if sep and head and rest and len(head) <= 40:
                    titles.append(head)
                    bodies.append(rest)
                else:
                    titles.append(f"Point {k}")
                    bodies.append(item)
            if len(set(titles)) == len(titles):
                if buf:
                    out.append(Serial("".join(buf)))
                    buf = []
                out.append(ParallelGroup(tuple(titles), tuple(f"{t}: {b}" for t, b in zip(titles, bodies))))
                # keep the line break that ended the run
                if lines[j - 1].endswith("\n"):
                    buf.append("\n")
                runs += 1
                i = j
                continue
        buf.extend(lines[i:max(j, i + 1)])
        i = max(j, i + 1)
    if buf:
        out.append(Serial("".join(buf)))
    return out


def mock_rewrite(response: str, candidate: int) -> str:
    """Rule-based itemization.

    Candidate 0 itemizes every list run, candidate 1 only the first one, any
    other candidate leaves the text as is. Existing groups are kept.
    """
    resp = parse_tagged(response)
    limit = {0: None, 1: 1}.get(candidate % 3, 0)
    segments: list = []
    for seg in resp.segments:
        if isinstance(seg, Serial) and limit != 0:
            segments.extend(_itemize(seg.text, limit))
        else:
            segments.append(seg)
    return serialize(StructuredResponse(segments))


def _mentions(text: str, title: str) -> bool:
    return re.search(r"(?<!\w)" + re.escape(title) + r"(?!\w)", text) is not None


def mock_independent(group: ParallelGroup) -> bool:
    """Fails on duplicate bodies or a branch that names a sibling's title."""
    bodies = [group.body(i).strip().lower() for i in range(len(group.branches))]
    if len(set(bodies)) < len(bodies):
        return False
    for i in range(len(group.branches)):
        body = group.body(i)
        if any(_mentions(body, t) for j, t in enumerate(group.titles) if j != i):
            return False
    return True


@dataclass
class MockJudge:
    """Deterministic judge: each verdict depends only on (stage, payload, sample_index).

    ``fail_stages`` forces every vote of those stages to fail; ``override``
    may return a verdict for a request (None keeps the rule-based one).
    ``transport_failures`` makes the first N calls raise JudgeTransportError.
    """

    fail_stages: frozenset = frozenset()
    override: Callable[[JudgeRequest], str | None] | None = None
    transport_failures: int = 0
    calls: int = field(default=0, init=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False, compare=False)

    def call(self, request: JudgeRequest) -> str:
        with self._lock:
            self.calls += 1
            if self.transport_failures > 0:
                self.transport_failures -= 1
                raise JudgeTransportError("mock transport failure")
        if self.override is not None:
            forced = self.override(request)
            if forced is not None:
                return forced
        data = json.loads(request.payload)
        if request.stage is Stage.REWRITING:
            return mock_rewrite(data["response"], request.sample_index)
        if request.stage in self.fail_stages:
            return FAIL
        if request.stage is Stage.INDEPENDENCE:
            group = ParallelGroup(tuple(data["titles"]), tuple(data["branches"]))
            return PASS if mock_independent(group) else FAIL
        return PASS if data["response"].strip() else FAIL
