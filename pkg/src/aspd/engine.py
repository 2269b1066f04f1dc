"""Hybrid serial/parallel decoding engine.

Serial mode samples one main-branch token per step. Titles are sampled as
``<Title> ... </Title>`` runs; a ``<Para>`` after a run opens a parallel stage
with one branch per title. Every branch first receives the forced prefix
``<Branch>`` + title + ``": "``, then all open branches sample one token per
step from a single shared forward. A branch ends on ``</Branch>`` (or EOS, or
its token budget); once all have ended the engine appends ``</Para>`` on the
main branch and returns to serial mode.

Forwards are lazy: tokens are appended to the layout first and forwarded only
when some branch needs fresh logits, so forced tokens are prefilled in as few
forwards as possible.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .corpus.grammar import ParallelGroup, Serial, StructuredResponse, render
from .errors import ConfigError, ModeError
from .layout import PARALLEL, Mode, SequenceLayout
from .mask import VisibilityMode
from .model import SAME_SEQ, PositionScheme
from .sampling import SamplerConfig, sample
from .vocab import ByteTokenizer

MAIN = "main"
BRANCHES = "branches"


@dataclass(frozen=True)
class EngineConfig:
    max_total_tokens: int = 4096
    max_branch_tokens: int = 512
    max_titles: int = 16
    visibility: VisibilityMode = VisibilityMode.INDEPENDENT
    positions: PositionScheme = SAME_SEQ
    forbid_nested_para: bool = True
    separator: tuple[int, ...] = (58, 32)  # ": " under the byte tokenizer

    def __post_init__(self):
        for name in ("max_total_tokens", "max_branch_tokens", "max_titles"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class DecodeResult:
    transcript: StructuredResponse
    layout: SequenceLayout = field(compare=False)
    prompt_len: int
    step_count: int  # every forward pass
    parallel_step_count: int  # forwards of sampled parallel blocks
    prefill_step_count: int  # forwards ending in a forced block
    sampled_step_count: int  # sampling rounds
    sampled_token_count: int  # tokens drawn from logits
    serial_tokens: int
    parallel_tokens: int
    truncated: bool
    protocol_errors: int
    recomputed_tokens: int
    visibility: str
    positions: str
    wall_times: dict = field(default_factory=dict, compare=False)
    trace: list = field(default_factory=list, compare=False, repr=False)

    @property
    def text(self) -> str:
        return render(self.transcript)

    @property
    def tokens(self) -> list[int]:
        return self.layout.token_ids()[self.prompt_len:]

    @property
    def token_counts(self) -> dict:
        return {"serial": self.serial_tokens, "parallel": self.parallel_tokens}

    def to_json(self, timing: bool = False) -> dict:
        out = {
            "transcript": self.text,
            "prompt_len": self.prompt_len,
            "tokens": self.tokens,
            "layout": self.layout.to_json(),
            "counters": {
                "step_count": self.step_count,
                "parallel_step_count": self.parallel_step_count,
                "prefill_step_count": self.prefill_step_count,
                "sampled_step_count": self.sampled_step_count,
                "sampled_token_count": self.sampled_token_count,
                "serial_tokens": self.serial_tokens,
                "parallel_tokens": self.parallel_tokens,
                "recomputed_tokens": self.recomputed_tokens,
            },
            "truncated": self.truncated,
            "protocol_errors": self.protocol_errors,
            "visibility": self.visibility,
            "positions": self.positions,
        }
        if timing:
            out["wall_times"] = dict(self.wall_times)
        return out


class DecodeSession:
    """State of one decode: layout, policy session, RNG and counters."""

    def __init__(self, policy, engine_cfg: EngineConfig = EngineConfig(),
                 sampler_cfg: SamplerConfig = SamplerConfig(), tokenizer=None):
        if policy.vocab_size < ByteTokenizer.default_vocab_size:
            raise ConfigError("engine transcripts need a byte-tokenizer compatible vocabulary")
        self.cfg = engine_cfg
        self.sampler = sampler_cfg
        self.tokenizer = tokenizer or ByteTokenizer(policy.vocab_size)
        self.specials = policy.specials
        self.eos_id = policy.eos_id
        self.vocab_size = policy.vocab_size
        self.layout = SequenceLayout()
        self.policy_session = policy.open_session(self.layout, engine_cfg)
        import numpy as np
        self.rng = np.random.default_rng(sampler_cfg.seed)

        self.flushed = 0
        self.logits: dict[tuple[int, int], object] = {}
        self.block_sampled: list[bool] = []
        self.step_count = 0
        self.parallel_steps = 0
        self.prefill_steps = 0
        self.sampled_steps = 0
        self.sampled_tokens = 0
        self.protocol_errors = 0
        self.truncated = False
        self.parallel_time = 0.0

        self.in_title = False
        self.after_title = False
        self.cur_title: list[int] = []
        self.titles: list[list[int]] = []

    # -- forwards --------------------------------------------------------

    def flush(self) -> None:
        """Forward every token appended since the last forward."""
        start = self.flushed
        if start == len(self.layout):
            return
        rows = self.policy_session.forward(self.layout, start)
        for meta, row in zip(self.layout.tokens[start:], rows):
            self.logits[(meta.stage, meta.branch)] = row
        self.flushed = len(self.layout)
        self.step_count += 1
        if not self.block_sampled[-1]:
            self.prefill_steps += 1
        elif self.layout.blocks[-1].kind == PARALLEL:
            self.parallel_steps += 1

    def force_tokens(self, tokens, placement=MAIN) -> None:
        """Append tokens without sampling; they are forwarded lazily.

        ``placement`` is ``MAIN``, a branch index (one block per token), or
        ``BRANCHES`` with ``tokens`` a mapping branch -> list, forced in lockstep.
        """
        if placement == MAIN:
            for t in tokens:
                self.layout.append_serial(t)
                self.block_sampled.append(False)
            return
        if self.layout.mode is not Mode.PARALLEL:
            raise ModeError("branch placement needs an open parallel stage")
        if placement == BRANCHES:
            streams: Mapping[int, Sequence[int]] = tokens
            for step in range(max((len(v) for v in streams.values()), default=0)):
                block = {b: v[step] for b, v in streams.items() if step < len(v)}
                self.layout.append_parallel_step(block)
                self.block_sampled.append(False)
            return
        for t in tokens:
            self.layout.append_parallel_step({int(placement): t})
            self.block_sampled.append(False)

    # -- sampling --------------------------------------------------------

    def _main_forbidden(self) -> set[int]:
        s = self.specials
        banned = {s.branch_open, s.branch_close, s.para_close}
        if self.in_title:
            banned |= {s.title_open, s.para_open, self.eos_id}
            if not self.cur_title:
                banned.add(s.title_close)
        elif self.after_title:
            # a title run continues with another title or opens the stage
            banned = set(range(self.vocab_size)) - {s.title_open, s.para_open}
            if len(self.titles) >= self.cfg.max_titles:
                banned.add(s.title_open)
        else:
            banned.add(s.title_close)
        return banned

    def _branch_forbidden(self) -> set[int]:
        s = self.specials
        banned = {s.branch_open, s.para_close}
        if self.cfg.forbid_nested_para:
            banned |= {s.para_open, s.title_open, s.title_close}
        return banned

    def sample_serial(self) -> int | None:
        """Sample one main-branch token; ``None`` when the budget leaves no legal token."""
        self.flush()
        row = self.logits[(0, 0)]
        banned = self._main_forbidden()
        # a stage needs room for <Para>, an open and close per branch, and </Para>
        if len(self.layout) + 2 * len(self.titles) + 2 > self.cfg.max_total_tokens:
            banned.add(self.specials.para_open)
        if len(banned) >= self.vocab_size:
            return None
        tok = sample(row, self.sampler, banned, self.rng)
        if tok == self.specials.para_open and not self.titles:
            # <Para> without a title run: reject and redraw with <Para> masked
            self.protocol_errors += 1
            banned.add(tok)
            if len(banned) >= self.vocab_size:
                return None
            tok = sample(row, self.sampler, banned, self.rng)
        self.sampled_steps += 1
        self.sampled_tokens += 1
        self.layout.append_serial(tok)
        self.block_sampled.append(True)

        s = self.specials
        if tok == s.title_open:
            self.in_title, self.after_title, self.cur_title = True, False, []
        elif tok == s.title_close:
            self.titles.append(self.cur_title)
            self.in_title, self.after_title = False, True
        elif self.in_title:
            self.cur_title.append(tok)
        elif tok != s.para_open:
            self.titles, self.after_title = [], False
        return tok

    def run_stage(self) -> None:
        s, cfg = self.specials, self.cfg
        titles, self.titles, self.after_title = self.titles, [], False
        n = len(titles)
        stage = self.layout.open_stage(n)
        prefixes = {b: [s.branch_open, *titles[b - 1], *cfg.separator] for b in range(1, n + 1)}
        body = dict.fromkeys(prefixes, 0)
        banned = self._branch_forbidden()
        started = time.perf_counter()
        step = 0
        while self.layout.mode is Mode.PARALLEL:
            active = [b for b in prefixes if stage.active(b)]
            if len(self.layout) + 2 * len(active) + 1 > cfg.max_total_tokens:
                # close now so the closes and </Para> stay within budget
                self.truncated = True
                self.layout.append_parallel_step({b: s.branch_close for b in active})
                self.block_sampled.append(False)
                for b in active:
                    self.layout.close_branch(b)
                break
            samplers = [b for b in active
                        if step >= len(prefixes[b]) and body[b] < cfg.max_branch_tokens]
            if samplers:
                self.flush()
                self.sampled_steps += 1
            tokens = {}
            for b in active:
                if step < len(prefixes[b]):
                    tokens[b] = prefixes[b][step]
                elif b in samplers:
                    tok = sample(self.logits[(stage.stage, b)], self.sampler, banned, self.rng)
                    self.sampled_tokens += 1
                    if tok == self.eos_id:
                        tok = s.branch_close
                    if tok != s.branch_close:
                        body[b] += 1
                    tokens[b] = tok
                else:
                    tokens[b] = s.branch_close  # token budget exhausted
                    self.truncated = True
            self.layout.append_parallel_step(tokens)
            self.block_sampled.append(bool(samplers))
            for b, tok in tokens.items():
                if tok == s.branch_close:
                    self.layout.close_branch(b)
            step += 1
        self.parallel_time += time.perf_counter() - started
        self.force_tokens([s.para_close])

    # -- driver ----------------------------------------------------------

    def run(self, prompt_tokens: Sequence[int]) -> DecodeResult:
        if len(prompt_tokens) == 0:
            raise ValueError("prompt must not be empty")
        started = time.perf_counter()
        self.force_tokens(prompt_tokens)
        prompt_len = len(prompt_tokens)
        while True:
            if len(self.layout) >= self.cfg.max_total_tokens:
                self.truncated = True
                break
            tok = self.sample_serial()
            if tok is None:
                self.truncated = True
                break
            if tok == self.eos_id:
                break
            if tok == self.specials.para_open:
                self.run_stage()
        total = time.perf_counter() - started
        return self._result(prompt_len, total)

    def _result(self, prompt_len: int, total: float) -> DecodeResult:
        response = self.layout.tokens[prompt_len:]
        eos = self.eos_id
        serial = sum(1 for t in response if t.is_main and t.token_id != eos)
        parallel = sum(1 for t in response if not t.is_main)
        return DecodeResult(
            transcript=transcript_from_layout(self.layout, prompt_len, self.tokenizer),
            layout=self.layout,
            prompt_len=prompt_len,
            step_count=self.step_count,
            parallel_step_count=self.parallel_steps,
            prefill_step_count=self.prefill_steps,
            sampled_step_count=self.sampled_steps,
            sampled_token_count=self.sampled_tokens,
            serial_tokens=serial,
            parallel_tokens=parallel,
            truncated=self.truncated,
            protocol_errors=self.protocol_errors,
            recomputed_tokens=getattr(self.policy_session, "recomputed", 0),
            visibility=self.cfg.visibility.value,
            positions=str(self.cfg.positions),
            wall_times={"total": total, "parallel": self.parallel_time,
                        "serial": total - self.parallel_time},
            trace=list(getattr(self.policy_session, "trace", [])),
        )


def decode(policy, prompt_tokens: Sequence[int], engine_cfg: EngineConfig = EngineConfig(),
           sampler_cfg: SamplerConfig = SamplerConfig(), tokenizer=None) -> DecodeResult:
    return DecodeSession(policy, engine_cfg, sampler_cfg, tokenizer).run(prompt_tokens)


def transcript_from_layout(layout: SequenceLayout, prompt_len: int,
                           tokenizer: ByteTokenizer) -> StructuredResponse:
    """Rebuild the tagged response from a decoded layout (prompt excluded).

    Titles left without a ``<Para>`` (only possible on truncation) are kept as
    plain serial text.
    """
    s = tokenizer.specials
    branches: dict[tuple[int, int], list[int]] = {}
    for t in layout.tokens:
        if not t.is_main:
            branches.setdefault((t.stage, t.branch), []).append(t.token_id)

    segments: list = []
    buf: list[int] = []
    titles: list[list[int]] = []
    cur: list[int] | None = None
    stage = 0

    def flush_text():
        if buf:
            segments.append(Serial(tokenizer.decode(buf)))
            buf.clear()

    for t in layout.tokens[prompt_len:]:
        if not t.is_main:
            continue
        tok = t.token_id
        if tok == s.title_open:
            cur = []
        elif tok == s.title_close and cur is not None:
            titles.append(cur)
            cur = None
        elif cur is not None:
            cur.append(tok)
        elif tok == s.para_open:
            stage += 1
            flush_text()
            bodies = []
            for b in range(1, layout.stages[stage - 1].branch_count + 1):
                toks = branches.get((stage, b), [])
                if toks and toks[0] == s.branch_open:
                    toks = toks[1:]
                if toks and toks[-1] == s.branch_close:
                    toks = toks[:-1]
                bodies.append(tokenizer.decode(toks))
            segments.append(ParallelGroup(tuple(tokenizer.decode(x) for x in titles), tuple(bodies)))
            titles = []
        elif tok in (s.para_close, tokenizer.eos_id):
            continue
        else:
            buf.extend(tok for x in titles for tok in [*x, 10])
            titles = []
            buf.append(tok)
    for x in titles + ([cur] if cur else []):
        buf.extend([*x, 10])
    flush_text()
    return StructuredResponse(segments)
