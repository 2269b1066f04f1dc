"""Parallelism and throughput metrics.

DP is the share of response tokens that sit inside branches (``<Branch>``,
the ``"Title: "`` prefix, the body and ``</Branch>``); titles and the
``<Para>`` pair count as main-branch tokens. ABN is the mean branch count per
stage. PPD is the share of samples with at least one stage.

Per-sample ratios are kept as exact fractions so corpus aggregation is
associative and the merged result does not depend on the order of samples.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

from .corpus.grammar import StructuredResponse, serialize
from .layout import SequenceLayout
from .vocab import ByteTokenizer


@dataclass(frozen=True)
class SampleMetrics:
    total_tokens: int
    parallel_tokens: int
    stage_branch_counts: tuple[int, ...] = ()
    stage_parallel_tokens: tuple[int, ...] = ()
    source_id: str | None = None

    @property
    def dp(self) -> float:
        return float(self.dp_exact)

    @property
    def dp_exact(self) -> Fraction:
        return Fraction(self.parallel_tokens, self.total_tokens) if self.total_tokens else Fraction(0)

    @property
    def is_parallel(self) -> bool:
        return bool(self.stage_branch_counts)

    @property
    def abn_exact(self) -> Fraction | None:
        if not self.stage_branch_counts:
            return None
        return Fraction(sum(self.stage_branch_counts), len(self.stage_branch_counts))

    @property
    def abn(self) -> float | None:
        x = self.abn_exact
        return None if x is None else float(x)

    @property
    def abn_weighted_exact(self) -> Fraction | None:
        """Branch count per stage weighted by the stage's parallel tokens."""
        w = sum(self.stage_parallel_tokens)
        if not w:
            return None
        return Fraction(sum(n * t for n, t in zip(self.stage_branch_counts, self.stage_parallel_tokens)), w)

    @property
    def abn_weighted(self) -> float | None:
        x = self.abn_weighted_exact
        return None if x is None else float(x)

    def to_json(self, weighted: bool = False) -> dict:
        out = {"id": self.source_id, "total_tokens": self.total_tokens,
               "parallel_tokens": self.parallel_tokens, "dp": self.dp,
               "stage_branch_counts": list(self.stage_branch_counts), "abn": self.abn,
               "is_parallel": self.is_parallel}
        if weighted:
            out["abn_weighted"] = self.abn_weighted
        return out


def sample_metrics(resp: StructuredResponse, tokenizer: ByteTokenizer | None = None) -> SampleMetrics:
    tok = tokenizer or ByteTokenizer()
    total = len(tok.encode(serialize(resp)))
    counts, per_stage = [], []
    for g in resp.groups:
        counts.append(len(g.branches))
        per_stage.append(sum(len(tok.encode(b)) + 2 for b in g.branches))  # + branch tags
    return SampleMetrics(total, sum(per_stage), tuple(counts), tuple(per_stage), resp.source_id)


def layout_metrics(layout: SequenceLayout, prompt_len: int = 0,
                   eos_id: int | None = None) -> SampleMetrics:
    """Same quantities read off a decoded layout (prompt and EOS excluded)."""
    response = [t for t in layout.tokens[prompt_len:] if t.token_id != eos_id or not t.is_main]
    per_stage: dict[int, int] = {}
    for t in response:
        if not t.is_main:
            per_stage[t.stage] = per_stage.get(t.stage, 0) + 1
    stages = [s for s in layout.stages if s.first_seq >= prompt_len]
    return SampleMetrics(len(response), sum(per_stage.values()),
                         tuple(s.branch_count for s in stages),
                         tuple(per_stage.get(s.stage, 0) for s in stages))


@dataclass(frozen=True)
class CorpusMetrics:
    samples: int
    parallel_samples: int
    ppd: float
    mean_dp: float | None
    mean_abn: float | None
    mean_abn_weighted: float | None = None

    def to_json(self, weighted: bool = False) -> dict:
        out = {"samples": self.samples, "parallel_samples": self.parallel_samples,
               "ppd": self.ppd, "mean_dp": self.mean_dp, "mean_abn": self.mean_abn}
        if weighted:
            out["mean_abn_weighted"] = self.mean_abn_weighted
        return out


@dataclass(frozen=True)
class CorpusAccumulator:
    samples: int = 0
    parallel: int = 0
    dp_sum: Fraction = Fraction(0)
    abn_sum: Fraction = Fraction(0)
    abn_w_sum: Fraction = Fraction(0)
    abn_w_n: int = 0

    @classmethod
    def of(cls, m: SampleMetrics) -> "CorpusAccumulator":
        if not m.is_parallel:
            return cls(samples=1)
        w = m.abn_weighted_exact
        return cls(1, 1, m.dp_exact, m.abn_exact, w or Fraction(0), int(w is not None))

    def merge(self, other: "CorpusAccumulator") -> "CorpusAccumulator":
        return CorpusAccumulator(self.samples + other.samples, self.parallel + other.parallel,
                                 self.dp_sum + other.dp_sum, self.abn_sum + other.abn_sum,
                                 self.abn_w_sum + other.abn_w_sum, self.abn_w_n + other.abn_w_n)

    def result(self) -> CorpusMetrics:
        if not self.samples:
            raise ValueError("no samples")
        p = self.parallel
        return CorpusMetrics(
            self.samples, p, p / self.samples,
            float(self.dp_sum / p) if p else None,
            float(self.abn_sum / p) if p else None,
            float(self.abn_w_sum / self.abn_w_n) if self.abn_w_n else None,
        )


def corpus_metrics(items: Sequence[SampleMetrics]) -> CorpusMetrics:
    if not items:
        raise ValueError("corpus_metrics needs at least one sample")
    acc = CorpusAccumulator()
    for m in items:
        acc = acc.merge(CorpusAccumulator.of(m))
    return acc.result()


# -- throughput -------------------------------------------------------------

@dataclass(frozen=True)
class ThroughputMetrics:
    step_speedup: float | None
    baseline_steps: int
    sampled_steps: int
    tps: float | None = field(default=None, compare=False)
    p_tps: float | None = field(default=None, compare=False)

    def to_json(self, timing: bool = True) -> dict:
        out = {"step_speedup": self.step_speedup, "baseline_steps": self.baseline_steps,
               "sampled_steps": self.sampled_steps}
        if timing:
            out.update(tps=self.tps, p_tps=self.p_tps)
        return out


def _rate(n: int, seconds: float | None) -> float | None:
    return n / seconds if seconds and seconds > 0 else None


def throughput(result, baseline_steps: int | None = None) -> ThroughputMetrics:
    """Step speedup against a serial decode of the same tokens, plus wall-clock rates.

    ``baseline_steps`` defaults to the number of sampled tokens, i.e. the steps
    a purely serial decode of the same output would take.
    """
    base = result.sampled_token_count if baseline_steps is None else baseline_steps
    steps = result.sampled_step_count
    walls = result.wall_times or {}
    return ThroughputMetrics(
        base / steps if steps else None, base, steps,
        _rate(result.serial_tokens + result.parallel_tokens, walls.get("total")),
        _rate(result.parallel_tokens, walls.get("parallel")) if result.parallel_tokens else None,
    )


def step_law(serial: int, stages: Iterable[Sequence[int]]) -> tuple[int, int]:
    """(serial-baseline steps, hybrid steps) for ``serial`` sampled main tokens
    and per-stage branch body lengths; each branch also samples its close."""
    stages = [list(s) for s in stages]
    base = serial + sum(sum(L + 1 for L in s) for s in stages)
    hybrid = serial + sum(max(s) + 1 for s in stages)
    return base, hybrid


def step_law_speedup(serial: int, stages: Iterable[Sequence[int]]) -> float:
    base, hybrid = step_law(serial, stages)
    return base / hybrid


# -- report formatting --------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    if isinstance(v, (list, tuple)):
        return ",".join(map(str, v))
    return str(v)


def format_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    """Aligned plain-text columns."""
    if not rows:
        return ""
    cols = list(columns or rows[0].keys())
    cells = [[_cell(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
    lines += ["  ".join(x.ljust(w) for x, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines) + "\n"


def format_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return ""
    cols = list(columns or rows[0].keys())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r.get(c) is None else _cell(r.get(c)) if isinstance(r.get(c), (list, tuple))
                    else r.get(c) for c in cols])
    return buf.getvalue()
