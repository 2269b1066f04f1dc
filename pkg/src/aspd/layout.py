"""Block-structured sequence layout with shared position IDs.

A layout is an ordered list of blocks. A serial block holds one main-branch
token; a parallel block holds one token per advancing branch of the current
stage. Block index gives causal order; position IDs are shared across
branches at the same step of a stage, so they cannot order tokens by
themselves.

Positions are 1-based:

* serial token in block k:  ``1 + sum(|B_j| for j < k)``
* branch token:             ``stage_start + branch_offset``

where ``stage_start`` is one past the position of the last token before the
stage and ``branch_offset`` counts earlier tokens of the same branch in that
stage.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import BranchStateError, LayoutError, ModeError

SERIAL = "serial"
PARALLEL = "parallel"


class Mode(enum.Enum):
    SERIAL = "serial"
    PARALLEL = "parallel"


@dataclass(frozen=True)
class TokenMeta:
    token_id: int
    branch: int  # 0 = main branch
    stage: int  # 0 = serial
    block_index: int  # 1-based causal order of the containing block
    position_id: int
    branch_offset: int
    seq: int  # 0-based index in the flattened sequence

    @property
    def is_main(self) -> bool:
        return self.branch == 0


@dataclass
class Block:
    kind: str
    stage: int
    members: list[TokenMeta]

    @property
    def index(self) -> int:
        return self.members[0].block_index

    def __len__(self):
        return len(self.members)


@dataclass
class StageInfo:
    stage: int
    start_position: int
    branch_count: int
    branch_lengths: list[int]
    closed: set[int] = field(default_factory=set)
    first_seq: int = 0  # flattened index of the stage's first token

    @property
    def open(self) -> bool:
        return len(self.closed) < self.branch_count

    def active(self, branch: int) -> bool:
        return 1 <= branch <= self.branch_count and branch not in self.closed


class SequenceLayout:
    """Growing record of serial and parallel blocks.

    Single writer: one decode session mutates a layout at a time.
    """

    def __init__(self):
        self.blocks: list[Block] = []
        self.stages: list[StageInfo] = []
        self.tokens: list[TokenMeta] = []
        self.mode = Mode.SERIAL

    def __len__(self):
        return len(self.tokens)

    @property
    def flattened_len(self) -> int:
        return len(self.tokens)

    @property
    def current_stage(self) -> StageInfo | None:
        if self.mode is Mode.PARALLEL:
            return self.stages[-1]
        return None

    def token_ids(self) -> list[int]:
        return [t.token_id for t in self.tokens]

    def position_ids(self) -> list[int]:
        return [t.position_id for t in self.tokens]

    def _last_position(self) -> int:
        return self.tokens[-1].position_id if self.tokens else 0

    def append_serial(self, token_id: int) -> TokenMeta:
        if self.mode is not Mode.SERIAL:
            raise ModeError("append_serial called while a parallel stage is open")
        meta = TokenMeta(
            token_id=int(token_id), branch=0, stage=0,
            block_index=len(self.blocks) + 1,
            position_id=1 + len(self.tokens),
            branch_offset=0, seq=len(self.tokens),
        )
        self.blocks.append(Block(SERIAL, 0, [meta]))
        self.tokens.append(meta)
        return meta

    def open_stage(self, branch_count: int) -> StageInfo:
        if self.mode is not Mode.SERIAL:
            raise ModeError("parallel stages do not nest")
        if branch_count < 1:
            raise LayoutError(f"branch_count must be >= 1, got {branch_count}")
        info = StageInfo(
            stage=len(self.stages) + 1,
            start_position=self._last_position() + 1,
            branch_count=branch_count,
            branch_lengths=[0] * branch_count,
            first_seq=len(self.tokens),
        )
        self.stages.append(info)
        self.mode = Mode.PARALLEL
        return info

    def append_parallel_step(self, tokens: Mapping[int, int]) -> list[TokenMeta]:
        """Append one parallel block; ``tokens`` maps branch (1-based) -> token id."""
        stage = self.current_stage
        if stage is None:
            raise ModeError("append_parallel_step requires an open parallel stage")
        if not tokens:
            raise LayoutError("a parallel block needs at least one token")
        for b in tokens:
            if not stage.active(b):
                raise BranchStateError(f"branch {b} is not active in stage {stage.stage}")
        block_index = len(self.blocks) + 1
        metas = []
        for b in sorted(tokens):
            offset = stage.branch_lengths[b - 1]
            meta = TokenMeta(
                token_id=int(tokens[b]), branch=b, stage=stage.stage,
                block_index=block_index,
                position_id=stage.start_position + offset,
                branch_offset=offset, seq=len(self.tokens),
            )
            stage.branch_lengths[b - 1] += 1
            self.tokens.append(meta)
            metas.append(meta)
        self.blocks.append(Block(PARALLEL, stage.stage, metas))
        return metas

    def close_branch(self, branch: int) -> bool:
        """Mark a branch finished. Returns True while other branches remain open."""
        stage = self.current_stage
        if stage is None:
            raise ModeError("no parallel stage is open")
        if not stage.active(branch):
            raise BranchStateError(f"branch {branch} already closed or unknown")
        stage.closed.add(branch)
        if not stage.open:
            self.mode = Mode.SERIAL
        return stage.open

    # -- serialization -------------------------------------------------

    def to_json(self) -> dict:
        out: dict = {"blocks": [
            {"kind": b.kind, "stage": b.stage,
             "tokens": [{"id": m.token_id, "branch": m.branch, "pos": m.position_id}
                        for m in b.members]}
            for b in self.blocks
        ]}
        if self.stages:
            out["stages"] = [info.branch_count for info in self.stages]
        stage = self.current_stage
        if stage is not None:
            out["open_branches"] = [b for b in range(1, stage.branch_count + 1)
                                    if stage.active(b)]
        return out

    @classmethod
    def from_json(cls, data: Mapping) -> "SequenceLayout":
        """Rebuild by replaying the operations; recorded positions must match."""
        blocks = data["blocks"]
        layout = cls()
        shapes = [_shape(b) for b in blocks]
        _check_shapes(shapes)
        open_stage = shapes[-1][1] if shapes and "open_branches" in data else None
        for k, raw in enumerate(blocks):
            kind, stage, branches = shapes[k]
            ids = [t["id"] for t in raw["tokens"]]
            if kind == SERIAL:
                metas = [layout.append_serial(ids[0])]
            else:
                if layout.mode is Mode.SERIAL:
                    counts = data.get("stages")
                    layout.open_stage(counts[stage - 1] if counts else _stage_branch_count(shapes, k))
                metas = layout.append_parallel_step(dict(zip(branches, ids)))
                last_block = k + 1 == len(shapes)
                keep_open = set(data.get("open_branches", ())) if stage == open_stage else set()
                later = {b for _, s, bs in shapes[k + 1:] if s == stage for b in bs}
                stage_ends = last_block or shapes[k + 1][:2] != (PARALLEL, stage)
                info = layout.current_stage
                for b in range(1, info.branch_count + 1):
                    if not info.active(b) or b in keep_open or b in later:
                        continue
                    if b in branches or stage_ends:
                        layout.close_branch(b)
            for m, t in zip(metas, raw["tokens"]):
                if "pos" in t and t["pos"] != m.position_id:
                    raise LayoutError(
                        f"block {k + 1}: recorded position {t['pos']} != {m.position_id}")
        return layout


def _stage_branch_count(shapes, k: int) -> int:
    stage = shapes[k][1]
    branches = {b for kind, s, bs in shapes[k:] if kind == PARALLEL and s == stage for b in bs}
    return max(branches)


def _shape(block) -> tuple[str, int, list[int]]:
    if isinstance(block, Block):
        return block.kind, block.stage, [m.branch for m in block.members]
    if isinstance(block, Mapping):
        return block["kind"], int(block.get("stage", 0)), [int(t["branch"]) for t in block["tokens"]]
    kind, stage, branches = block
    return kind, int(stage), [int(b) for b in branches]


def _check_shapes(shapes: Sequence[tuple[str, int, list[int]]]) -> None:
    seen_stages: set[int] = set()
    prev_stage = 0
    for k, (kind, stage, branches) in enumerate(shapes, start=1):
        if not branches:
            raise LayoutError(f"block {k} is empty")
        if len(set(branches)) != len(branches):
            raise LayoutError(f"block {k} repeats a branch")
        if kind == SERIAL:
            if branches != [0] or stage != 0:
                raise LayoutError(f"serial block {k} must hold exactly one main-branch token")
            prev_stage = 0
        elif kind == PARALLEL:
            if stage < 1 or min(branches) < 1:
                raise LayoutError(f"parallel block {k} needs stage >= 1 and branches >= 1")
            if stage != prev_stage:
                if stage in seen_stages:
                    raise LayoutError(f"stage {stage} resumes after it ended (block {k})")
                seen_stages.add(stage)
            prev_stage = stage
        else:
            raise LayoutError(f"block {k} has unknown kind {kind!r}")


def recompute_positions(blocks: Iterable) -> list[int]:
    """Batch position assignment over a block list, flattened order.

    Pure function of block kinds, stages and branch membership; it ignores any
    position already stored on the members, so it can serve as an oracle for
    the incremental path.
    """
    shapes = [_shape(b) for b in blocks]
    _check_shapes(shapes)
    positions: list[int] = []
    total = 0
    stage_start = 0
    current = 0
    counts: dict[int, int] = {}
    for kind, stage, branches in shapes:
        if kind == SERIAL:
            positions.append(1 + total)
            current = 0
        else:
            if stage != current:
                stage_start = (positions[-1] if positions else 0) + 1
                current = stage
                counts = {}
            for b in sorted(branches):
                positions.append(stage_start + counts.get(b, 0))
                counts[b] = counts.get(b, 0) + 1
        total += len(branches)
    return positions


def build_layout(blocks: Iterable) -> SequenceLayout:
    """Construct a layout from (kind, stage, {branch: token}) style descriptions.

    Each item is either ``("serial", token_id)`` or ``("parallel", {branch: token_id})``.
    A parallel item following a serial one opens a new stage sized by the
    largest branch index seen in that run; ``("close",)`` ends a stage early.
    """
    items = list(blocks)
    layout = SequenceLayout()
    for k, item in enumerate(items):
        if item[0] == SERIAL:
            if layout.mode is Mode.PARALLEL:
                _close_all(layout)
            layout.append_serial(item[1])
        elif item[0] == PARALLEL:
            if layout.mode is Mode.SERIAL:
                run = []
                for nxt in items[k:]:
                    if nxt[0] != PARALLEL:
                        break
                    run.append(nxt)
                layout.open_stage(max(b for _, step in run for b in step))
            layout.append_parallel_step(item[1])
        elif item[0] == "close":
            if layout.mode is Mode.PARALLEL:
                _close_all(layout)
        else:
            raise LayoutError(f"unknown item {item!r}")
    return layout


def _close_all(layout: SequenceLayout) -> None:
    stage = layout.current_stage
    for b in range(1, stage.branch_count + 1):
        if stage.active(b):
            layout.close_branch(b)
