"""Random workload generators shared by the test modules."""
import random

import numpy as np

from aspd.layout import Mode, SequenceLayout
from aspd.vocab import SpecialTokens, eos_for_vocab

# Supplementary worked example: X1 X2 {A B C} {A B C} X3 X4 {D E}
WORKED_EXAMPLE = [
    ("serial", 1), ("serial", 2),
    ("parallel", {1: 10, 2: 20, 3: 30}), ("parallel", {1: 11, 2: 21, 3: 31}),
    ("serial", 3), ("serial", 4),
    ("parallel", {1: 40, 2: 50}),
]
WORKED_POSITIONS = [1, 2, 3, 3, 3, 4, 4, 4, 9, 10, 11, 11]
WORKED_NAMES = ["X1", "X2", "A1", "B1", "C1", "A2", "B2", "C2", "X3", "X4", "D1", "E1"]


def random_layout(rng: random.Random, max_tokens: int = 64, skip_prob: float = 0.0,
                  vocab: int = 256, close_at_end: bool = False) -> SequenceLayout:
    """Random serial/parallel layout of at most ``max_tokens`` tokens.

    Stages get 1-4 branches with ragged lengths; with ``skip_prob`` > 0 an open
    branch may sit out a step.
    """
    target = rng.randint(1, max_tokens)
    layout = SequenceLayout()
    while len(layout) < target:
        room = target - len(layout)
        if room < 2 or rng.random() < 0.45:
            layout.append_serial(rng.randrange(vocab))
            continue
        n = rng.randint(1, min(4, room))
        layout.open_stage(n)
        lengths = {b: rng.randint(1, 6) for b in range(1, n + 1)}
        while layout.mode is Mode.PARALLEL:
            stage = layout.current_stage
            active = [b for b in range(1, n + 1) if stage.active(b)]
            if len(layout) + len(active) > max_tokens:
                if close_at_end or rng.random() < 0.5:
                    for b in active:
                        layout.close_branch(b)
                return layout
            step = [b for b in active if rng.random() >= skip_prob] or active[:1]
            layout.append_parallel_step({b: rng.randrange(vocab) for b in step})
            for b in step:
                if stage.branch_lengths[b - 1] >= lengths[b]:
                    layout.close_branch(b)
    return layout


_LETTERS = "abcdefghijklmnopqrstuvwxyz "


def _word(rng: random.Random, lo: int, hi: int) -> str:
    return "".join(rng.choice(_LETTERS) for _ in range(rng.randint(lo, hi)))


def random_response(rng: random.Random, max_groups: int = 2, max_branches: int = 4,
                    equal_titles: bool = True, max_body: int = 12) -> str:
    """Random well-formed tagged response.

    With ``equal_titles`` the titles of one group share a length, so every
    branch starts sampling its body on the same step.
    """
    out = [_word(rng, 0, 6)]
    for _ in range(rng.randint(0, max_groups)):
        n = rng.randint(1, max_branches)
        width = rng.randint(1, 4)
        titles = [f"T{k}" + "x" * (width if equal_titles else rng.randint(0, 4)) for k in range(n)]
        out += [f"<Title>{t}</Title>" for t in titles]
        out.append("<Para>")
        out += [f"<Branch>{t}: {_word(rng, 0, max_body)}</Branch>" for t in titles]
        out.append("</Para>")
        out.append(_word(rng, 0, 6))
    return "".join(out)


class NoisyPolicy:
    """Random logits with the special tokens boosted; stresses the decode protocol."""

    def __init__(self, vocab_size: int = 263, boost: float = 3.0, seed: int = 0):
        self.vocab_size = vocab_size
        self.specials = SpecialTokens.for_vocab(vocab_size)
        self.eos_id = eos_for_vocab(vocab_size)
        self.boost = boost
        self.rng = np.random.default_rng(seed)

    def open_session(self, layout, cfg):
        return self

    def forward(self, layout, start):
        rows = self.rng.normal(size=(len(layout) - start, self.vocab_size)).astype(np.float32)
        rows[:, list(self.specials.ids)] += self.boost
        rows[:, self.eos_id] += self.boost - 2.0
        return rows
