"""Curation pipeline: rewrite, judge independence, check integrity, select."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from .. import metrics
from ..errors import AspdError, ConfigError, JudgeTransportError
from .grammar import ParallelGroup, Serial, StructuredResponse, has_tag, parse_tagged, serialize
from .judge import (
    PASS, JudgeClient, JudgeRequest, Stage, answer_payload, group_payload, rewrite_payload,
)


@dataclass(frozen=True)
class Pass:
    def to_json(self):
        return {"verdict": "pass"}


@dataclass(frozen=True)
class StructuralFail:
    reason: str

    def to_json(self):
        return {"verdict": "structural_fail", "reason": self.reason}


@dataclass(frozen=True)
class JudgeFail:
    stage: Stage
    votes: tuple[bool, ...]

    def to_json(self):
        return {"verdict": "judge_fail", "stage": self.stage.value, "votes": list(self.votes)}


PARALLEL_VERDICT = "parallel"
SERIAL_VERDICT = "serial"


@dataclass
class ValidationReport:
    groups: list
    source_id: str | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> list[int]:
        return [i for i, v in enumerate(self.groups) if isinstance(v, Pass)]

    @property
    def failed(self) -> list[int]:
        return [i for i, v in enumerate(self.groups) if not isinstance(v, Pass)]

    @property
    def verdict(self) -> str:
        return PARALLEL_VERDICT if self.passed else SERIAL_VERDICT

    def combine(self, other: "ValidationReport") -> "ValidationReport":
        """Per group, keep the first failure of the two reports."""
        if len(other.groups) != len(self.groups):
            raise ValueError("reports cover different group counts")
        merged = [a if not isinstance(a, Pass) else b for a, b in zip(self.groups, other.groups)]
        return ValidationReport(merged, self.source_id, self.notes + other.notes)

    def to_json(self) -> dict:
        return {"id": self.source_id, "verdict": self.verdict,
                "groups": [g.to_json() for g in self.groups], "notes": list(self.notes)}


def validate_integrity(resp: StructuredResponse) -> ValidationReport:
    verdicts = []
    notes = []
    for k, g in enumerate(resp.groups):
        if len(g.titles) != len(g.branches):
            verdicts.append(StructuralFail("branch count mismatch"))
        elif any(not t.strip() for t in g.titles):
            verdicts.append(StructuralFail("empty title"))
        elif any(has_tag(x) for x in g.titles + g.branches):
            verdicts.append(StructuralFail("special token in branch"))
        elif any(not b.startswith(g.prefix(i)) for i, b in enumerate(g.branches)):
            verdicts.append(StructuralFail("prefix mismatch"))
        elif any(not g.body(i).strip() for i in range(len(g.branches))):
            verdicts.append(StructuralFail("empty branch"))
        else:
            verdicts.append(Pass())
            if len(g.branches) == 1:
                notes.append(f"group {k}: single branch")
    return ValidationReport(verdicts, resp.source_id, notes)


def collect_votes(client: JudgeClient, stage: Stage, payload: str, samples: int,
                  retries: int = 2) -> tuple[bool, ...] | None:
    """``samples`` sampled verdicts, or None if the transport keeps failing."""
    for _ in range(retries + 1):
        try:
            return tuple(client.call(JudgeRequest(stage, payload, i)) == PASS for i in range(samples))
        except JudgeTransportError:
            continue
    return None


def _decide(votes: tuple[bool, ...] | None, stage: Stage, threshold: int):
    if votes is None:
        return JudgeFail(stage, ())
    return Pass() if sum(votes) >= threshold else JudgeFail(stage, votes)


def judged_stage(resp: StructuredResponse, stage: Stage, client: JudgeClient, samples: int = 3,
                 threshold: int | None = None, retries: int = 2) -> ValidationReport:
    """Judge every group; a group passes only when ``threshold`` (default: all) votes pass."""
    if samples < 1:
        raise ConfigError("samples must be >= 1")
    need = samples if threshold is None else threshold
    verdicts = [_decide(collect_votes(client, stage, group_payload(g), samples, retries), stage, need)
                for g in resp.groups]
    return ValidationReport(verdicts, resp.source_id)


def degenerate(resp: StructuredResponse, group_index: int) -> StructuredResponse:
    """Replace one group by its branch bodies joined with newlines."""
    idx = resp.group_indices
    if not 0 <= group_index < len(idx):
        raise IndexError(f"group {group_index} out of range ({len(idx)} groups)")
    seg = resp.segments[idx[group_index]]
    text = "\n".join(seg.body(i) for i in range(len(seg.branches)))
    segments = list(resp.segments)
    segments[idx[group_index]] = Serial(text)
    return StructuredResponse(segments, resp.source_id)


def degenerate_many(resp: StructuredResponse, group_indices: Sequence[int]) -> StructuredResponse:
    # right to left so earlier group ordinals stay valid
    for k in sorted(set(group_indices), reverse=True):
        resp = degenerate(resp, k)
    return resp


def serial_twin(resp: StructuredResponse) -> str:
    """Plain text with every group degenerated."""
    return serialize(degenerate_many(resp, range(len(resp.groups))))


def _rank_key(item):
    i, m = item
    return (-m.dp, -(m.abn or 0.0), i)


def select_preferred(candidates: Sequence[StructuredResponse], tokenizer=None) -> StructuredResponse:
    if not candidates:
        raise ValueError("no candidates to select from")
    scored = [(i, metrics.sample_metrics(c, tokenizer)) for i, c in enumerate(candidates)]
    return candidates[min(scored, key=_rank_key)[0]]


@dataclass(frozen=True)
class PipelineConfig:
    candidates: int = 3
    votes: int = 3
    threshold: int | None = None  # None = unanimity
    retries: int = 2
    workers: int = 4

    def __post_init__(self):
        if self.candidates < 1 or self.votes < 1 or self.workers < 1 or self.retries < 0:
            raise ConfigError("candidates, votes and workers must be >= 1, retries >= 0")
        if self.threshold is not None and not 1 <= self.threshold <= self.votes:
            raise ConfigError("threshold must lie in [1, votes]")


@dataclass(frozen=True)
class Sample:
    id: str
    prompt: str
    response: str
    answer: str | None = None


@dataclass
class CuratedSample:
    sample: Sample
    response: StructuredResponse
    report: ValidationReport
    verdict: str
    dp: float
    abn: float | None
    groups: int

    @property
    def twin(self) -> str:
        return serial_twin(self.response)

    def to_json(self) -> dict:
        return {"id": self.sample.id, "prompt": self.sample.prompt,
                "response": serialize(self.response), "answer": self.sample.answer,
                "verdict": self.verdict, "dp": self.dp, "abn": self.abn, "groups": self.groups}

    def twin_json(self) -> dict:
        return {"id": self.sample.id, "prompt": self.sample.prompt, "response": self.twin,
                "answer": self.sample.answer}


@dataclass
class PipelineReport:
    """Order-independent summary; ``merge`` is associative and commutative."""

    samples: int = 0
    failed: dict = field(default_factory=dict)  # id -> error message
    verdicts: dict = field(default_factory=dict)  # "parallel"/"serial" -> count
    group_verdicts: dict = field(default_factory=dict)  # pass/structural_fail/judge_fail -> count
    corpus: metrics.CorpusAccumulator = field(default_factory=lambda: metrics.CorpusAccumulator())

    def merge(self, other: "PipelineReport") -> "PipelineReport":
        def add(a, b):
            return {k: a.get(k, 0) + b.get(k, 0) for k in sorted(set(a) | set(b))}
        return PipelineReport(self.samples + other.samples, {**self.failed, **other.failed},
                              add(self.verdicts, other.verdicts),
                              add(self.group_verdicts, other.group_verdicts),
                              self.corpus.merge(other.corpus))

    def to_json(self) -> dict:
        return {"samples": self.samples, "failed": dict(sorted(self.failed.items())),
                "verdicts": dict(sorted(self.verdicts.items())),
                "group_verdicts": dict(sorted(self.group_verdicts.items())),
                "metrics": self.corpus.result().to_json() if self.corpus.samples else None}


def _answer_check(sample: Sample, resp: StructuredResponse, client: JudgeClient,
                  cfg: PipelineConfig) -> bool:
    twin = serial_twin(resp)
    if sample.answer is not None:
        return sample.answer in twin
    votes = collect_votes(client, Stage.INTEGRITY_ANSWER, answer_payload(sample.prompt, twin),
                          cfg.votes, cfg.retries)
    need = cfg.votes if cfg.threshold is None else cfg.threshold
    return votes is not None and sum(votes) >= need


def curate_candidate(sample: Sample, resp: StructuredResponse, client: JudgeClient,
                     cfg: PipelineConfig) -> tuple[StructuredResponse, ValidationReport]:
    """Independence then integrity + answer checks; failing groups degenerate."""
    indep = judged_stage(resp, Stage.INDEPENDENCE, client, cfg.votes, cfg.threshold, cfg.retries)
    report = indep.combine(validate_integrity(resp))
    if resp.groups and not _answer_check(sample, resp, client, cfg):
        report = report.combine(ValidationReport(
            [JudgeFail(Stage.INTEGRITY_ANSWER, ())] * len(resp.groups), resp.source_id,
            ["answer check failed"]))
    return degenerate_many(resp, report.failed), report


def curate_sample(sample: Sample, client: JudgeClient, cfg: PipelineConfig = PipelineConfig(),
                  tokenizer=None) -> CuratedSample:
    parse_tagged(sample.response, sample.id)  # malformed input fails the sample early
    payload = rewrite_payload(sample.prompt, sample.response)
    curated = []
    for i in range(cfg.candidates):
        for _ in range(cfg.retries + 1):
            try:
                text = client.call(JudgeRequest(Stage.REWRITING, payload, i))
                break
            except JudgeTransportError:
                continue
        else:
            continue
        try:
            cand = parse_tagged(text, sample.id)
        except AspdError:
            continue
        curated.append(curate_candidate(sample, cand, client, cfg))
    if not curated:
        curated.append(curate_candidate(sample, parse_tagged(sample.response, sample.id), client, cfg))
    best = select_preferred([c[0] for c in curated], tokenizer)
    report = next(r for c, r in curated if c is best)
    m = metrics.sample_metrics(best, tokenizer)
    return CuratedSample(sample, best, report, report.verdict if best.groups else SERIAL_VERDICT,
                         m.dp, m.abn, len(best.groups))


def _one(sample: Sample, client, cfg, tokenizer):
    rep = PipelineReport(samples=1)
    try:
        out = curate_sample(sample, client, cfg, tokenizer)
    except AspdError as exc:
        rep.failed[sample.id] = str(exc)
        return None, rep
    rep.verdicts[out.verdict] = 1
    for v in out.report.groups:
        key = v.to_json()["verdict"]
        rep.group_verdicts[key] = rep.group_verdicts.get(key, 0) + 1
    rep.corpus = metrics.CorpusAccumulator.of(metrics.sample_metrics(out.response, tokenizer))
    return out, rep


def run_pipeline(samples: Sequence[Sample], client: JudgeClient,
                 cfg: PipelineConfig = PipelineConfig(), tokenizer=None):
    """Curate every sample; failures go to the report, never abort the batch.

    Returns (curated samples in input order, report).
    """
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        results = list(pool.map(lambda s: _one(s, client, cfg, tokenizer), samples))
    report = PipelineReport()
    for _, rep in results:
        report = report.merge(rep)
    return [out for out, _ in results if out is not None], report
