"""Acceptance gate: one test per criterion, each printed as a PASS/FAIL line."""
import json
import random
from fractions import Fraction
from pathlib import Path

import numpy as np

from aspd.cli import main as cli_main
from aspd.corpus import (
    FAIL, MockJudge, Pass, PipelineConfig, Stage, emit_training_layout, judged_stage,
    layout_from_response, parse_tagged, run_pipeline, serialize,
)
from aspd.corpus.io import dumps, read_samples
from aspd.engine import EngineConfig, decode
from aspd.layout import SequenceLayout, build_layout, recompute_positions
from aspd.mask import VisibilityMode, build_full_mask, mask_rows, visible
from aspd.metrics import layout_metrics, throughput
from aspd.model import (
    ModelConfig, PositionScheme, forward_full, forward_incremental, init_model, KvCache,
)
from aspd.policy import ModelPolicy, ScriptedPolicy
from aspd.sampling import GREEDY, SamplerConfig
from aspd.vocab import ByteTokenizer

from conftest import criterion
from helpers import WORKED_EXAMPLE, WORKED_NAMES, WORKED_POSITIONS, random_layout, random_response

FIX = Path(__file__).parent / "fixtures"
TOK = ByteTokenizer()
RTOL, ATOL = 1e-5, 1e-6


def test_worked_example_exactness():
    with criterion("worked example positions and mask", budget=1.0):
        layout = build_layout(WORKED_EXAMPLE)
        assert recompute_positions(layout.blocks) == WORKED_POSITIONS
        assert layout.position_ids() == WORKED_POSITIONS
        dense = build_full_mask(layout).to_dense()
        name = dict(enumerate(WORKED_NAMES))
        for q, tq in enumerate(layout.tokens):
            for k, tk in enumerate(layout.tokens):
                sibling = tq.stage and tq.stage == tk.stage and tq.branch != tk.branch
                assert dense[q, k] == (k <= q and not sibling), (name[q], name[k])
        idx = {n: i for i, n in name.items()}
        assert not dense[idx["B1"], idx["A1"]] and not dense[idx["C2"], idx["B1"]]
        assert dense[idx["D1"], idx["A2"]] and dense[idx["X3"], idx["C2"]]


def test_mask_oracle_equivalence():
    with criterion("mask oracle on 500 random layouts", budget=30.0):
        rng = random.Random(0)
        for _ in range(500):
            layout = random_layout(rng, max_tokens=64, skip_prob=0.2)
            toks = layout.tokens
            for mode in VisibilityMode:
                brute = np.array([[visible(a, b, mode) for b in toks] for a in toks], dtype=bool)
                for rep in ("dense", "ranges"):
                    full = build_full_mask(layout, mode, rep).to_dense()
                    assert np.array_equal(full, brute)
                    for block in layout.blocks:
                        start = block.members[0].seq
                        rows = mask_rows(layout, start, mode, rep).to_dense()
                        assert np.array_equal(rows, full[start:])


def _random_model(rng: random.Random):
    return init_model(ModelConfig(layers=rng.randint(1, 4), heads=2, head_dim=8, hidden_dim=16,
                                  ffn_dim=32, seed=rng.randrange(1000)))


def test_cache_consistency():
    schemes = ["same-seq", "same-max", "same-rearrange", "fixed-interval:32"]
    with criterion("cache consistency on 100 engine traces", budget=120.0):
        rng = random.Random(1)
        for i in range(100):
            model = _random_model(rng)
            text = random_response(rng, max_groups=2, max_branches=4, equal_titles=False)
            script = ScriptedPolicy.from_response(text, prompt="prompt")
            cfg = EngineConfig(max_total_tokens=256, visibility=rng.choice(list(VisibilityMode)),
                               positions=PositionScheme.parse(schemes[i % 4]))
            res = decode(ModelPolicy(model, guide=script, record=True), script.prompt, cfg)
            assert len(res.layout) <= 256
            ids = res.layout.token_ids()
            full_mask = build_full_mask(res.layout, cfg.visibility).to_dense()
            refs: list[tuple[np.ndarray, np.ndarray]] = []
            for begin, logits, pos in sorted(res.trace, key=lambda e: -len(e[2])):
                end = len(pos)
                ref = next((r for p, r in refs if np.array_equal(p[:end], pos)), None)
                if ref is None:
                    ref = forward_full(model, ids[:end], pos, full_mask[:end, :end])
                    refs.append((pos, ref))
                np.testing.assert_allclose(logits, ref[begin:end], rtol=RTOL, atol=ATOL)


def test_branch_equivalence():
    with criterion("branch equivalence with standalone serial decode"):
        rng = random.Random(2)
        for _ in range(50):
            model = _random_model(rng)
            prefix = [rng.randrange(256) for _ in range(rng.randint(1, 24))]
            n = rng.randint(2, 4)
            bodies = [[rng.randrange(256) for _ in range(rng.randint(1, 12))] for _ in range(n)]
            layout = SequenceLayout()
            cache = KvCache(model, layout)
            for t in prefix:
                layout.append_serial(t)
            forward_incremental(model, cache, prefix, layout.position_ids(), mask_rows(layout, 0))
            stage = layout.open_stage(n)
            got = {b: [] for b in range(1, n + 1)}
            step = 0
            while stage.open:
                block = {b: bodies[b - 1][step] for b in range(1, n + 1) if stage.active(b)}
                start = len(layout)
                layout.append_parallel_step(block)
                new = layout.tokens[start:]
                out = forward_incremental(model, cache, [t.token_id for t in new],
                                          [t.position_id for t in new], mask_rows(layout, start))
                for t, row in zip(new, out):
                    got[t.branch].append(row)
                for b in block:
                    if step == len(bodies[b - 1]) - 1:
                        layout.close_branch(b)
                step += 1
            for b in range(1, n + 1):
                seq = prefix + bodies[b - 1]
                causal = np.tril(np.ones((len(seq), len(seq)), dtype=bool))
                ref = forward_full(model, seq, list(range(1, len(seq) + 1)), causal)
                np.testing.assert_allclose(np.stack(got[b]), ref[len(prefix):], rtol=RTOL, atol=ATOL)


def test_step_count_law():
    with criterion("step-count law on 200 scripted workloads"):
        rng = random.Random(3)
        for _ in range(200):
            text = random_response(rng, max_groups=3, max_branches=5, equal_titles=True, max_body=20)
            script = ScriptedPolicy.from_response(text, prompt="q")
            res = decode(script, script.prompt)
            assert res.text == text
            resp = parse_tagged(text)
            # sampled main tokens: everything after the prompt except the forced </Para>
            s = len(script.main) - script.prompt_len - len(resp.groups)
            lengths = [[len(TOK.encode(g.body(i))) for i in range(len(g.branches))] for g in resp.groups]
            steps = s + sum(max(L) + 1 for L in lengths)
            base = s + sum(L + 1 for ls in lengths for L in ls)
            assert res.sampled_step_count == steps
            assert Fraction(res.sampled_token_count, res.sampled_step_count) == Fraction(base, steps)
            assert throughput(res).step_speedup == base / steps


def test_degenerate_serial_identity():
    with criterion("degenerate serial identity"):
        rng = random.Random(4)
        for _ in range(10):
            model = _random_model(rng)
            text = "".join(rng.choice("abcdefgh ") for _ in range(rng.randint(1, 40)))
            script = ScriptedPolicy.from_response(text, prompt="go")
            res = decode(ModelPolicy(model, guide=script, record=True), script.prompt,
                         sampler_cfg=SamplerConfig(mode=GREEDY))
            ids = res.layout.token_ids()
            assert ids == script.main and res.parallel_step_count == 0
            assert res.layout.position_ids() == list(range(1, len(ids) + 1))
            # plain causal decode: whole prefix, causal mask, positions 1..n
            for begin, logits, _ in res.trace:
                end = begin + len(logits)
                causal = np.tril(np.ones((end, end), dtype=bool))
                ref = forward_full(model, ids[:end], list(range(1, end + 1)), causal)
                np.testing.assert_allclose(logits, ref[begin:end], rtol=RTOL, atol=ATOL)
            assert layout_metrics(res.layout, res.prompt_len, script.eos_id).dp == 0
            assert throughput(res).step_speedup == 1.0


def _random_tagged(rng: random.Random) -> str:
    alphabet = "ab <>/:é\n\tTitleParaBranch"
    word = lambda: "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 10)))
    out = []
    for _ in range(rng.randint(0, 5)):
        if rng.random() < 0.5:
            out.append(word())
        else:
            n = rng.randint(1, 4)
            out += [f"<Title>{word()}</Title>" for _ in range(n)] + ["<Para>"]
            out += [f"<Branch>{word()}</Branch>" for _ in range(n)] + ["</Para>"]
    return "".join(out)


def test_corpus_round_trip_and_pipeline():
    with criterion("corpus round trip, golden pipeline, unanimity"):
        rng = random.Random(5)
        checked = 0
        while checked < 1000:
            text = _random_tagged(rng)
            try:
                resp = parse_tagged(text)
            except Exception:
                continue  # a random word spelled a tag; not a well-formed string
            assert serialize(resp) == text
            assert parse_tagged(serialize(resp)) == resp
            checked += 1

        samples, _ = read_samples(FIX / "golden_input.jsonl")
        for workers in (1, 4):
            out, _ = run_pipeline(samples, MockJudge(), PipelineConfig(workers=workers))
            assert "".join(dumps(o.to_json()) + "\n" for o in out) == \
                (FIX / "golden_curated.jsonl").read_text(encoding="utf-8")
            assert "".join(dumps(o.twin_json()) + "\n" for o in out) == \
                (FIX / "golden_twins.jsonl").read_text(encoding="utf-8")

        good = parse_tagged("<Title>A</Title><Title>B</Title><Para><Branch>A: apples</Branch>"
                            "<Branch>B: pears</Branch></Para>")
        assert judged_stage(good, Stage.INDEPENDENCE, MockJudge()).groups == [Pass()]
        for flip in range(3):
            judge = MockJudge(override=lambda r, f=flip: FAIL if r.sample_index == f else None)
            assert judged_stage(good, Stage.INDEPENDENCE, judge).groups != [Pass()]
            # the same single flip inside the pipeline turns the golden g01 serial
            flip_judge = MockJudge(override=lambda r, f=flip: FAIL if (
                r.stage is Stage.INDEPENDENCE and r.sample_index == f) else None)
            out, _ = run_pipeline(samples[:1], flip_judge, PipelineConfig(workers=1))
            assert out[0].verdict == "serial"


def test_training_layout_cross_check():
    with criterion("training layout cross-check on 100 responses"):
        rng = random.Random(6)
        for _ in range(100):
            resp = parse_tagged(random_response(rng, max_groups=3, equal_titles=False))
            ex = emit_training_layout(resp, prompt="p")
            layout, _ = layout_from_response(resp, prompt="p")
            # independent re-derivation from the induced block list
            shapes = [(b.kind, b.stage, [t.branch for t in b.members]) for b in layout.blocks]
            positions = recompute_positions(shapes)
            assert ex.position_ids == [positions[i] for i in ex.order]
            assert sorted(ex.order) == list(range(len(layout)))
            full = build_full_mask(layout).to_dense()
            assert np.array_equal(ex.mask.to_dense(), full[np.ix_(ex.order, ex.order)])


def test_bench_sanity(capsys):
    with criterion("bench step speedup within 10% of k at L=512"):
        assert cli_main(["bench", "--branches", "2,3,4", "--lengths", "8,64,512", "--no-timing",
                         "--json"]) == 0
        rows = json.loads(capsys.readouterr().out)["rows"]
        for k in (2, 3, 4):
            sp = [r["step_speedup"] for r in rows if r["k"] == k]
            assert sp == sorted(sp), sp
            assert abs(sp[-1] - k) <= 0.1 * k, (k, sp[-1])
        cell = next(r for r in rows if r["k"] == 3 and r["L"] == 64)
        assert 2.5 <= cell["step_speedup"] <= 3.0
