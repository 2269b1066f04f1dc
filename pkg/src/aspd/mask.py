"""Branch-aware attention visibility and masks.

A query token may attend to a key token when the key is at or before the
query in flattened (causal) order, unless both sit in the same parallel stage
on different branches. The ``SHARED`` variant drops the branch rule and keeps
only causality, so sibling branches see each other's earlier tokens.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import MaskError
from .layout import SequenceLayout, TokenMeta

# Used instead of -inf so that masked logits never produce NaNs; at float32 the
# softmax weight of a masked entry underflows to exactly 0.
NEG_INF = np.float32(-1e30)
DENSE_LIMIT = 4096


class VisibilityMode(enum.Enum):
    INDEPENDENT = "independent"
    SHARED = "shared"


def visible(a: TokenMeta, b: TokenMeta, mode: VisibilityMode = VisibilityMode.INDEPENDENT) -> bool:
    """Can query token ``a`` attend to key token ``b``?"""
    if (b.block_index, b.branch) > (a.block_index, a.branch):
        return False
    if mode is VisibilityMode.SHARED or a.is_main:
        return True
    if a.stage != b.stage:
        return True
    return a.branch == b.branch


@dataclass
class AttentionMask:
    """Visibility for rows ``query_offset .. query_offset + query_len`` over keys ``0 .. key_len``.

    Stored either densely (bool matrix) or as per-row half-open ``[start, end)``
    ranges of visible keys. Both forms convert to each other losslessly.
    """

    query_len: int
    key_len: int
    query_offset: int = 0
    dense: np.ndarray | None = None
    ranges: list[list[tuple[int, int]]] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.query_len, self.key_len

    def row(self, i: int) -> np.ndarray:
        if self.dense is not None:
            return self.dense[i]
        out = np.zeros(self.key_len, dtype=bool)
        for s, e in self.ranges[i]:
            out[s:e] = True
        return out

    def visible_indices(self, i: int) -> np.ndarray:
        if self.dense is not None:
            return np.flatnonzero(self.dense[i])
        if not self.ranges[i]:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(s, e) for s, e in self.ranges[i]])

    def to_dense(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        return np.stack([self.row(i) for i in range(self.query_len)]) if self.query_len else \
            np.zeros((0, self.key_len), dtype=bool)

    def to_ranges(self) -> list[list[tuple[int, int]]]:
        if self.ranges is not None:
            return self.ranges
        return [_bool_to_ranges(r) for r in self.dense]

    def additive(self) -> np.ndarray:
        """Additive float32 form: 0 where visible, a large negative value elsewhere."""
        return np.where(self.to_dense(), np.float32(0.0), NEG_INF).astype(np.float32)

    def to_bitstrings(self) -> str:
        return "\n".join("".join("1" if v else "0" for v in row) for row in self.to_dense())

    @classmethod
    def from_bitstrings(cls, text: str, query_offset: int = 0) -> "AttentionMask":
        rows = [line for line in text.splitlines() if line]
        dense = np.array([[c == "1" for c in line] for line in rows], dtype=bool)
        if dense.ndim != 2:
            raise MaskError("bit-string rows have unequal lengths")
        return cls(dense.shape[0], dense.shape[1], query_offset, dense=dense)

    def __eq__(self, other):
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return (self.shape == other.shape and self.query_offset == other.query_offset
                and np.array_equal(self.to_dense(), other.to_dense()))


def _bool_to_ranges(row: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate([[False], row, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return [(int(s), int(e)) for s, e in zip(edges[::2], edges[1::2])]


def _arrays(layout: SequenceLayout):
    stage = np.fromiter((t.stage for t in layout.tokens), dtype=np.int64, count=len(layout))
    branch = np.fromiter((t.branch for t in layout.tokens), dtype=np.int64, count=len(layout))
    return stage, branch


def _dense_rows(layout: SequenceLayout, start: int, mode: VisibilityMode) -> np.ndarray:
    n = len(layout)
    q = np.arange(start, n)[:, None]
    k = np.arange(n)[None, :]
    vis = k <= q
    if mode is VisibilityMode.INDEPENDENT:
        stage, branch = _arrays(layout)
        sq, bq = stage[start:, None], branch[start:, None]
        vis &= ~((sq == stage[None, :]) & (sq > 0) & (bq != branch[None, :]))
    return vis


def _range_rows(layout: SequenceLayout, start: int, mode: VisibilityMode):
    rows = []
    own: dict[tuple[int, int], list[int]] = {}
    for t in layout.tokens:
        if t.branch:
            own.setdefault((t.stage, t.branch), []).append(t.seq)
    for t in layout.tokens[start:]:
        if mode is VisibilityMode.SHARED or t.is_main:
            rows.append([(0, t.seq + 1)])
            continue
        first = layout.stages[t.stage - 1].first_seq
        spans = [(0, first)] if first else []
        for s in own[(t.stage, t.branch)]:
            if s > t.seq:
                break
            if spans and spans[-1][1] == s:
                spans[-1] = (spans[-1][0], s + 1)
            else:
                spans.append((s, s + 1))
        rows.append(spans)
    return rows


def mask_rows(layout: SequenceLayout, start: int,
              mode: VisibilityMode = VisibilityMode.INDEPENDENT,
              representation: str = "auto") -> AttentionMask:
    """Rows for flattened tokens ``start ..`` over every key in the layout."""
    n = len(layout)
    if not 0 <= start <= n:
        raise MaskError(f"row start {start} outside layout of length {n}")
    if representation == "auto":
        representation = "dense" if n < DENSE_LIMIT else "ranges"
    if representation == "dense":
        return AttentionMask(n - start, n, start, dense=_dense_rows(layout, start, mode))
    if representation == "ranges":
        return AttentionMask(n - start, n, start, ranges=_range_rows(layout, start, mode))
    raise MaskError(f"unknown representation {representation!r}")


def build_full_mask(layout: SequenceLayout,
                    mode: VisibilityMode = VisibilityMode.INDEPENDENT,
                    representation: str = "auto") -> AttentionMask:
    if len(layout) == 0:
        raise MaskError("cannot build a mask for an empty layout")
    return mask_rows(layout, 0, mode, representation)


def mask_row_for_new_tokens(layout: SequenceLayout, new: Sequence[TokenMeta],
                            mode: VisibilityMode = VisibilityMode.INDEPENDENT,
                            representation: str = "auto") -> AttentionMask:
    """Mask rows for the members of the layout's final block."""
    if not layout.blocks or list(new) != layout.blocks[-1].members:
        raise MaskError("new tokens must be exactly the layout's final block")
    return mask_rows(layout, new[0].seq, mode, representation)
