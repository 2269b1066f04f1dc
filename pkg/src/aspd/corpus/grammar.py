"""Tagged response format: parsing and canonical serialization.

Grammar::

    response := (serial_text | group)*
    group    := title+ "<Para>" branch{n} "</Para>"      n == number of titles
    title    := "<Title>" text "</Title>"
    branch   := "<Branch>" text "</Branch>"

No text may appear between the titles of a group, between the last title and
``<Para>``, or between branches.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..errors import ResponseError, TaggedSyntaxError
from ..vocab import (
    BRANCH_CLOSE, BRANCH_OPEN, PARA_CLOSE, PARA_OPEN, TAGS, TITLE_CLOSE, TITLE_OPEN,
)

_TAG_RE = re.compile("|".join(re.escape(t) for t in TAGS))


@dataclass(frozen=True)
class Serial:
    text: str


@dataclass(frozen=True)
class ParallelGroup:
    titles: tuple[str, ...]
    branches: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "titles", tuple(self.titles))
        object.__setattr__(self, "branches", tuple(self.branches))

    def prefix(self, i: int) -> str:
        return f"{self.titles[i]}: "

    def body(self, i: int) -> str:
        """Branch text with its ``"Title: "`` prefix removed (when present)."""
        text, prefix = self.branches[i], self.prefix(i)
        return text[len(prefix):] if text.startswith(prefix) else text


@dataclass
class StructuredResponse:
    segments: list = field(default_factory=list)
    source_id: str | None = None

    @property
    def groups(self) -> list[ParallelGroup]:
        return [s for s in self.segments if isinstance(s, ParallelGroup)]

    @property
    def group_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.segments) if isinstance(s, ParallelGroup)]

    def __eq__(self, other):
        if not isinstance(other, StructuredResponse):
            return NotImplemented
        return self.segments == other.segments


def has_tag(text: str) -> bool:
    return _TAG_RE.search(text) is not None


def parse_tagged(text: str, source_id: str | None = None) -> StructuredResponse:
    segments: list = []
    pieces = []  # (offset, tag or None, text)
    last = 0
    for m in _TAG_RE.finditer(text):
        if m.start() > last:
            pieces.append((last, None, text[last:m.start()]))
        pieces.append((m.start(), m.group(), m.group()))
        last = m.end()
    if last < len(text):
        pieces.append((last, None, text[last:]))
    end = len(text)

    i = 0

    def expect(tag: str, what: str | None = None):
        nonlocal i
        if i >= len(pieces):
            raise TaggedSyntaxError("unexpected end of input", end, what or tag)
        off, got, _ = pieces[i]
        if got != tag:
            found = got or "text"
            raise TaggedSyntaxError(f"unexpected {found}", off, what or tag)
        i += 1

    def text_until(close: str) -> str:
        nonlocal i
        body = ""
        if i < len(pieces) and pieces[i][1] is None:
            body = pieces[i][2]
            i += 1
        expect(close)
        return body

    while i < len(pieces):
        off, tag, chunk = pieces[i]
        if tag is None:
            segments.append(Serial(chunk))
            i += 1
            continue
        if tag != TITLE_OPEN:
            raise TaggedSyntaxError(f"unexpected {tag}", off, "text or <Title>")
        titles = []
        while i < len(pieces) and pieces[i][1] == TITLE_OPEN:
            i += 1
            titles.append(text_until(TITLE_CLOSE))
        expect(PARA_OPEN, "<Title> or <Para>")
        branches = []
        while True:
            if i < len(pieces) and pieces[i][1] == PARA_CLOSE:
                if len(branches) != len(titles):
                    raise TaggedSyntaxError(
                        f"{len(branches)} branches for {len(titles)} titles", pieces[i][0],
                        "<Branch>")
                i += 1
                break
            if len(branches) == len(titles):
                expect(PARA_CLOSE)
            expect(BRANCH_OPEN)
            branches.append(text_until(BRANCH_CLOSE))
        segments.append(ParallelGroup(tuple(titles), tuple(branches)))
    return StructuredResponse(segments, source_id)


def check_structure(resp: StructuredResponse) -> None:
    for k, seg in enumerate(resp.segments):
        if isinstance(seg, Serial):
            if has_tag(seg.text):
                raise ResponseError(f"segment {k}: serial text contains a tag")
        elif isinstance(seg, ParallelGroup):
            if not seg.titles or len(seg.titles) != len(seg.branches):
                raise ResponseError(
                    f"segment {k}: {len(seg.titles)} titles vs {len(seg.branches)} branches")
            if any(has_tag(t) for t in seg.titles + seg.branches):
                raise ResponseError(f"segment {k}: tag inside title or branch text")
        else:
            raise ResponseError(f"segment {k}: unknown segment type {type(seg).__name__}")


def serialize(resp: StructuredResponse) -> str:
    check_structure(resp)
    return render(resp)


def render(resp: StructuredResponse) -> str:
    """Tagged text without validation (tags inside text are emitted verbatim)."""
    out = []
    for seg in resp.segments:
        if isinstance(seg, Serial):
            out.append(seg.text)
        else:
            out.extend(f"{TITLE_OPEN}{t}{TITLE_CLOSE}" for t in seg.titles)
            out.append(PARA_OPEN)
            out.extend(f"{BRANCH_OPEN}{b}{BRANCH_CLOSE}" for b in seg.branches)
            out.append(PARA_CLOSE)
    return "".join(out)
