"""Teacher-forced training layouts.

At training time each branch is laid out contiguously (branch 1 complete,
then branch 2, ...) while positions and visibility are those of the lockstep
decode that would have produced it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..layout import Mode, SequenceLayout
from ..mask import AttentionMask, VisibilityMode, _bool_to_ranges, build_full_mask
from ..vocab import BRANCH_CLOSE, BRANCH_OPEN, PARA_CLOSE, PARA_OPEN, TITLE_CLOSE, TITLE_OPEN, ByteTokenizer
from .grammar import ParallelGroup, StructuredResponse, check_structure


@dataclass
class TrainingExample:
    token_ids: list[int]
    position_ids: list[int]
    mask: AttentionMask  # rows and columns in training order
    loss_mask: list[int]
    layout: SequenceLayout  # the induced lockstep layout
    order: list[int]  # training index -> flattened layout index

    def __post_init__(self):
        n = len(self.token_ids)
        if not (len(self.position_ids) == len(self.loss_mask) == len(self.order) == n
                and self.mask.shape == (n, n)):
            raise ValueError("training example fields disagree in length")

    def to_json(self) -> dict:
        return {"tokens": self.token_ids, "positions": self.position_ids,
                "visible": [[list(r) for r in row] for row in self.mask.to_ranges()],
                "loss": self.loss_mask}


def layout_from_response(resp: StructuredResponse, tokenizer: ByteTokenizer | None = None,
                         prompt: str = "", eos: bool = True) -> tuple[SequenceLayout, list[int]]:
    """Lockstep layout a decode of ``resp`` would produce, with per-token loss flags."""
    check_structure(resp)
    tok = tokenizer or ByteTokenizer()
    layout = SequenceLayout()
    loss: list[int] = []

    def serial(ids, train=1):
        for t in ids:
            layout.append_serial(t)
            loss.append(train)

    serial(tok.encode(prompt), 0)
    for seg in resp.segments:
        if isinstance(seg, ParallelGroup):
            serial(tok.encode("".join(TITLE_OPEN + t + TITLE_CLOSE for t in seg.titles) + PARA_OPEN))
            streams = [tok.encode(BRANCH_OPEN + b + BRANCH_CLOSE) for b in seg.branches]
            stage = layout.open_stage(len(streams))
            step = 0
            while layout.mode is Mode.PARALLEL:
                block = {b: s[step] for b, s in enumerate(streams, 1) if stage.active(b)}
                layout.append_parallel_step(block)
                loss.extend([1] * len(block))
                for b in block:
                    if step == len(streams[b - 1]) - 1:
                        layout.close_branch(b)
                step += 1
            serial(tok.encode(PARA_CLOSE))
        else:
            serial(tok.encode(seg.text))
    if eos:
        serial([tok.eos_id])
    return layout, loss


def branch_contiguous_order(layout: SequenceLayout) -> list[int]:
    """Permutation putting every stage's branches one after another."""
    order: list[int] = []
    pending: dict[tuple[int, int], list[int]] = {}
    for t in layout.tokens:
        if t.is_main:
            if pending:
                for b in sorted(pending):
                    order.extend(pending[b])
                pending.clear()
            order.append(t.seq)
        else:
            pending.setdefault((t.stage, t.branch), []).append(t.seq)
    for b in sorted(pending):
        order.extend(pending[b])
    return order


def teacher_forced(layout: SequenceLayout, loss: list[int] | None = None,
                   mode: VisibilityMode = VisibilityMode.INDEPENDENT) -> TrainingExample:
    order = branch_contiguous_order(layout)
    ids, pos = layout.token_ids(), layout.position_ids()
    full = build_full_mask(layout, mode, "dense").to_dense()
    perm = np.asarray(order)
    dense = full[np.ix_(perm, perm)]
    n = len(order)
    mask = AttentionMask(n, n, ranges=[_bool_to_ranges(r) for r in dense])
    flags = loss if loss is not None else [1] * n
    return TrainingExample([ids[i] for i in order], [pos[i] for i in order], mask,
                           [flags[i] for i in order], layout, order)


def emit_training_layout(resp: StructuredResponse, tokenizer: ByteTokenizer | None = None,
                         prompt: str = "", eos: bool = True,
                         mode: VisibilityMode = VisibilityMode.INDEPENDENT) -> TrainingExample:
    layout, loss = layout_from_response(resp, tokenizer, prompt, eos)
    return teacher_forced(layout, loss, mode)
