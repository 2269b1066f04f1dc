"""Next-token sources the engine can drive.

A policy opens one session per decode. The session's ``forward(layout, start)``
returns a logits row for every layout token from flattened index ``start`` to
the end; the engine samples a branch's next token from the row of that
branch's latest token.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .layout import SequenceLayout
from .mask import mask_rows
from .model import KvCache, Model, forward_incremental, scheme_positions
from .vocab import ByteTokenizer, SpecialTokens, eos_for_vocab

SCRIPT_LOGIT = 30.0


class ScriptedPolicy:
    """Replays fixed token streams, ignoring positions and masks.

    ``main`` is the whole main-branch stream, prompt included; ``branches[s][b]``
    is the full token stream of branch ``b + 1`` in stage ``s + 1``, from its
    ``<Branch>`` token through ``</Branch>``. Once a stream runs out the policy
    asks for EOS (main) or ``</Branch>`` (branches).
    """

    def __init__(self, main: Sequence[int], branches: Sequence[Sequence[Sequence[int]]] = (),
                 vocab_size: int = ByteTokenizer.default_vocab_size, prompt_len: int = 0):
        self.main = list(main)
        self.branches = [[list(b) for b in stage] for stage in branches]
        self.vocab_size = vocab_size
        self.specials = SpecialTokens.for_vocab(vocab_size)
        self.eos_id = eos_for_vocab(vocab_size)
        self.prompt_len = prompt_len

    @property
    def prompt(self) -> list[int]:
        return self.main[:self.prompt_len]

    @classmethod
    def from_response(cls, response, prompt: str = "", tokenizer: ByteTokenizer | None = None,
                      eos: bool = True) -> "ScriptedPolicy":
        """Script that reproduces a tagged response (text or StructuredResponse)."""
        from .corpus.grammar import ParallelGroup, parse_tagged
        from .vocab import BRANCH_CLOSE, BRANCH_OPEN, PARA_CLOSE, PARA_OPEN, TITLE_CLOSE, TITLE_OPEN

        tok = tokenizer or ByteTokenizer()
        resp = parse_tagged(response) if isinstance(response, str) else response
        main = tok.encode(prompt)
        prompt_len = len(main)
        stages = []
        for seg in resp.segments:
            if isinstance(seg, ParallelGroup):
                for title in seg.titles:
                    main += tok.encode(TITLE_OPEN + title + TITLE_CLOSE)
                main += tok.encode(PARA_OPEN)
                stages.append([tok.encode(BRANCH_OPEN + b + BRANCH_CLOSE) for b in seg.branches])
                main += tok.encode(PARA_CLOSE)
            else:
                main += tok.encode(seg.text)
        if eos:
            main.append(tok.eos_id)
        return cls(main, stages, tok.vocab_size, prompt_len)

    def open_session(self, layout: SequenceLayout, cfg) -> "_ScriptSession":
        return _ScriptSession(self)


class _ScriptSession:
    def __init__(self, policy: ScriptedPolicy):
        self.policy = policy
        self._upto = 0
        self._main_seen = 0

    def forward(self, layout: SequenceLayout, start: int) -> np.ndarray:
        p = self.policy
        if start != self._upto:
            self._main_seen = sum(1 for t in layout.tokens[:start] if t.is_main)
        rows = np.zeros((len(layout) - start, p.vocab_size), dtype=np.float32)
        for r, t in enumerate(layout.tokens[start:]):
            if t.is_main:
                self._main_seen += 1
                nxt = p.main[self._main_seen] if self._main_seen < len(p.main) else p.eos_id
            else:
                stage = p.branches[t.stage - 1] if t.stage <= len(p.branches) else []
                stream = stage[t.branch - 1] if t.branch <= len(stage) else []
                k = t.branch_offset + 1
                nxt = stream[k] if k < len(stream) else p.specials.branch_close
            rows[r, nxt] = SCRIPT_LOGIT
        self._upto = len(layout)
        return rows


class ModelPolicy:
    """Drives the toy model with a KV cache that mirrors the layout.

    With ``guide`` set, the model still runs every forward (so cache and
    timing are real) but the returned logits come from the guide script; this
    produces structured traces from an untrained model. ``record`` keeps the
    model's own logits per forward in ``session.trace`` as
    ``(first row, logits, positions of the whole cached prefix)``.
    """

    def __init__(self, model: Model, guide: ScriptedPolicy | None = None, record: bool = False):
        self.model = model
        self.guide = guide
        self.record = record
        self.vocab_size = model.vocab_size
        self.specials = model.specials
        self.eos_id = model.eos_id

    def open_session(self, layout: SequenceLayout, cfg) -> "_ModelSession":
        return _ModelSession(self, layout, cfg)


class _ModelSession:
    def __init__(self, policy: ModelPolicy, layout: SequenceLayout, cfg):
        self.model = policy.model
        self.cache = KvCache(policy.model, layout)
        self.visibility = cfg.visibility
        self.scheme = cfg.positions
        self.record = policy.record
        self.guide = policy.guide.open_session(layout, cfg) if policy.guide else None
        self.trace: list[tuple[int, np.ndarray, np.ndarray]] = []
        self.recomputed = 0

    def forward(self, layout: SequenceLayout, start: int) -> np.ndarray:
        cache = self.cache
        if self.scheme.variant == "same-seq":
            positions = None
        else:
            positions = scheme_positions(layout, self.scheme)
            cached = cache.len
            drift = np.flatnonzero(cache.positions[:cached] != positions[:cached])
            if drift.size:
                # renumbered tokens (same-rearrange) must be re-prefilled
                cache.truncate(int(drift[0]))
                self.recomputed += cached - int(drift[0])
        begin = cache.len
        new = layout.tokens[begin:]
        pos = [t.position_id for t in new] if positions is None else positions[begin:]
        logits = forward_incremental(self.model, cache, [t.token_id for t in new], pos,
                                     mask_rows(layout, begin, self.visibility))
        if self.record:
            self.trace.append((begin, logits, cache.positions[:cache.len].copy()))
        if self.guide is not None:
            return self.guide.forward(layout, start)
        return logits[start - begin:]
