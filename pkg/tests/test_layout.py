import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from aspd.errors import BranchStateError, LayoutError, ModeError
from aspd.layout import (
    PARALLEL, SERIAL, Mode, SequenceLayout, build_layout, recompute_positions,
)

from helpers import WORKED_EXAMPLE, WORKED_POSITIONS, random_layout


def test_serial_positions_follow_flattened_count():
    layout = SequenceLayout()
    assert layout.append_serial(7).position_id == 1
    assert layout.append_serial(8).position_id == 2


def test_worked_example_incremental():
    layout = build_layout(WORKED_EXAMPLE)
    assert layout.position_ids() == WORKED_POSITIONS
    assert layout.stages[0].start_position == 3
    assert layout.stages[1].start_position == 11
    assert [len(b) for b in layout.blocks] == [1, 1, 3, 3, 1, 1, 2]


def test_worked_example_batch():
    blocks = [(SERIAL, 0, [0]), (SERIAL, 0, [0]), (PARALLEL, 1, [1, 2, 3]),
              (PARALLEL, 1, [1, 2, 3]), (SERIAL, 0, [0]), (SERIAL, 0, [0]),
              (PARALLEL, 2, [1, 2])]
    assert recompute_positions(blocks) == WORKED_POSITIONS


def test_x4_after_blocks_1_1_3_3_1():
    layout = build_layout(WORKED_EXAMPLE[:5])
    assert layout.append_serial(4).position_id == 10


def test_open_stage_positions():
    layout = SequenceLayout()
    assert layout.open_stage(1).start_position == 1
    layout = build_layout(WORKED_EXAMPLE[:2])
    info = layout.open_stage(3)
    assert info.start_position == 3
    assert layout.mode is Mode.PARALLEL
    metas = layout.append_parallel_step({1: 5, 2: 6, 3: 7})
    assert [m.position_id for m in metas] == [3, 3, 3]
    metas = layout.append_parallel_step({1: 5, 2: 6, 3: 7})
    assert [m.position_id for m in metas] == [4, 4, 4]
    assert [m.branch_offset for m in metas] == [1, 1, 1]


def test_ragged_stage():
    layout = SequenceLayout()
    layout.append_serial(0)
    start = layout.open_stage(2).start_position
    layout.append_parallel_step({1: 1, 2: 1})
    layout.append_parallel_step({1: 1, 2: 1})
    assert layout.close_branch(1) is True
    (meta,) = layout.append_parallel_step({2: 9})
    assert meta.branch == 2 and meta.position_id == start + 2
    with pytest.raises(BranchStateError):
        layout.append_parallel_step({1: 3})
    assert layout.close_branch(2) is False
    assert layout.mode is Mode.SERIAL
    assert layout.append_serial(3).position_id == 1 + 6


def test_close_errors():
    layout = SequenceLayout()
    with pytest.raises(ModeError):
        layout.close_branch(1)
    layout.open_stage(2)
    layout.close_branch(1)
    with pytest.raises(BranchStateError):
        layout.close_branch(1)
    with pytest.raises(ModeError):
        layout.append_serial(1)
    with pytest.raises(ModeError):
        layout.open_stage(2)


def test_invalid_arguments():
    with pytest.raises(LayoutError):
        SequenceLayout().open_stage(0)
    with pytest.raises(ModeError):
        SequenceLayout().append_parallel_step({1: 1})
    with pytest.raises(LayoutError):
        recompute_positions([(PARALLEL, 1, [])])
    with pytest.raises(LayoutError):
        recompute_positions([(PARALLEL, 1, [1, 1])])
    with pytest.raises(LayoutError):
        recompute_positions([(SERIAL, 0, [0, 0])])
    with pytest.raises(LayoutError):
        recompute_positions([(PARALLEL, 1, [1]), (SERIAL, 0, [0]), (PARALLEL, 1, [1])])


def test_all_serial_batch():
    assert recompute_positions([(SERIAL, 0, [0])] * 5) == [1, 2, 3, 4, 5]


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), skip=st.sampled_from([0.0, 0.3]))
def test_incremental_matches_batch(seed, skip):
    layout = random_layout(random.Random(seed), 64, skip_prob=skip)
    assert layout.position_ids() == recompute_positions(layout.blocks)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_layout_invariants(seed):
    layout = random_layout(random.Random(seed), 64)
    assert layout.flattened_len == sum(len(b) for b in layout.blocks)
    assert [b.index for b in layout.blocks] == list(range(1, len(layout.blocks) + 1))
    for t in layout.tokens:
        assert (t.stage == 0) == (t.branch == 0)
        if t.stage == 0:
            assert t.branch_offset == 0
            assert t.position_id == 1 + t.seq
    for block in layout.blocks:
        if block.kind == SERIAL:
            assert len(block) == 1
        else:
            assert len({m.position_id for m in block.members}) == 1
            assert len({m.branch for m in block.members}) == len(block)
    # per-branch positions strictly increase by one within a stage
    last: dict = {}
    for t in layout.tokens:
        if t.branch:
            key = (t.stage, t.branch)
            if key in last:
                assert t.position_id == last[key] + 1
            last[key] = t.position_id
    # first serial token after a stage sits beyond every position inside it
    for info in layout.stages:
        inside = [t.position_id for t in layout.tokens if t.stage == info.stage]
        after = [t for t in layout.tokens[info.first_seq:] if t.stage == 0]
        if after:
            assert after[0].position_id > max(inside)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), skip=st.sampled_from([0.0, 0.3]))
def test_json_round_trip(seed, skip):
    layout = random_layout(random.Random(seed), 64, skip_prob=skip)
    data = json.loads(json.dumps(layout.to_json()))
    rebuilt = SequenceLayout.from_json(data)
    assert rebuilt.tokens == layout.tokens
    assert rebuilt.mode == layout.mode
    assert rebuilt.to_json() == layout.to_json()


def test_from_json_rejects_wrong_positions():
    data = build_layout(WORKED_EXAMPLE).to_json()
    data["blocks"][4]["tokens"][0]["pos"] = 5
    with pytest.raises(LayoutError):
        SequenceLayout.from_json(data)
