import json
import random

import numpy as np
import pytest

from aspd.corpus import parse_tagged
from aspd.engine import BRANCHES, DecodeSession, EngineConfig, decode
from aspd.errors import ModeError
from aspd.layout import PARALLEL, Mode
from aspd.mask import VisibilityMode
from aspd.model import ModelConfig, PositionScheme, init_model
from aspd.policy import ModelPolicy, ScriptedPolicy
from aspd.sampling import GREEDY, SamplerConfig
from aspd.vocab import TAGS, ByteTokenizer

from helpers import NoisyPolicy, random_response

TOK = ByteTokenizer()
S = TOK.specials
THREE = ("ab<Title>T1</Title><Title>T2</Title><Title>T3</Title><Para>"
         "<Branch>T1: abcde</Branch><Branch>T2: abc</Branch><Branch>T3: abcd</Branch></Para>cd")


def expected_rounds(policy: ScriptedPolicy, text: str) -> int:
    """Sampling rounds for a response whose group titles have equal lengths."""
    resp = parse_tagged(text)
    serial = len(policy.main) - policy.prompt_len - len(resp.groups)  # </Para> is forced
    stages = 0
    for g in resp.groups:
        stages += max(len(TOK.encode(g.body(i))) for i in range(len(g.branches))) + 1
    return serial + stages


@pytest.fixture(scope="module")
def small_model():
    return init_model(ModelConfig(layers=2, heads=2, head_dim=8, hidden_dim=16, ffn_dim=32, seed=5))


def test_three_branch_counts():
    p = ScriptedPolicy.from_response(THREE, prompt="Q?")
    res = decode(p, p.prompt)
    assert res.text == THREE
    assert res.parallel_step_count == 5
    assert res.sampled_step_count == expected_rounds(p, THREE) == 18 + 6
    assert res.step_count >= res.parallel_step_count + res.prefill_step_count
    assert not res.truncated and res.protocol_errors == 0
    # bodies 5/3/4 sampled plus one close each
    g = res.transcript.groups[0]
    assert [g.body(i) for i in range(3)] == ["abcde", "abc", "abcd"]


def test_step_law_random_workloads():
    rng = random.Random(0)
    for _ in range(60):
        text = random_response(rng)
        p = ScriptedPolicy.from_response(text, prompt="q")
        res = decode(p, p.prompt)
        assert res.text == text
        assert res.sampled_step_count == expected_rounds(p, text)


def test_ragged_titles_start_early():
    text = "<Title>A</Title><Title>Bbbb</Title><Para><Branch>A: xy</Branch><Branch>Bbbb: z</Branch></Para>"
    p = ScriptedPolicy.from_response(text, prompt="q")
    res = decode(p, p.prompt)
    assert res.text == text
    # branch 1 finishes its body while branch 2 is still in its prefix
    assert res.sampled_step_count < expected_rounds(p, text) + 3


def test_no_para_is_serial():
    p = ScriptedPolicy.from_response("just text", prompt="q")
    res = decode(p, p.prompt)
    assert res.text == "just text"
    assert res.parallel_step_count == 0 and res.parallel_tokens == 0
    assert res.sampled_step_count == len("just text") + 1


def test_two_consecutive_stages():
    text = ("<Title>a</Title><Title>b</Title><Para><Branch>a: 1</Branch><Branch>b: 22</Branch></Para>"
            "<Title>c</Title><Para><Branch>c: 333</Branch></Para>")
    p = ScriptedPolicy.from_response(text, prompt="q")
    res = decode(p, p.prompt)
    assert res.text == text
    assert [s.branch_count for s in res.layout.stages] == [2, 1]
    assert res.sampled_step_count == expected_rounds(p, text)


def test_para_without_titles_is_rejected():
    # the script asks for <Para> straight away; the engine redraws with it masked
    p = ScriptedPolicy(TOK.encode("q") + [S.para_open, TOK.eos_id], prompt_len=1)
    res = decode(p, p.prompt, sampler_cfg=SamplerConfig(mode=GREEDY))
    assert res.protocol_errors >= 1
    assert S.para_open not in res.tokens


def test_force_prefix_lockstep():
    p = ScriptedPolicy.from_response(THREE, prompt="Q?")
    sess = DecodeSession(p)
    sess.force_tokens(TOK.encode("Q?"))
    with pytest.raises(ModeError):
        sess.force_tokens({1: [1]}, BRANCHES)
    sess.layout.open_stage(3)
    sess.force_tokens({b: [S.branch_open, 65 + b, 58] for b in (1, 2, 3)}, BRANCHES)
    blocks = sess.layout.blocks[-3:]
    assert all(b.kind == PARALLEL and len(b) == 3 for b in blocks)
    sess.flush()
    assert sess.step_count == 1 and sess.prefill_steps == 1


def test_determinism_same_seed(small_model):
    runs = [decode(ModelPolicy(small_model), TOK.encode("hi"), EngineConfig(max_total_tokens=40),
                   SamplerConfig(seed=11)) for _ in range(2)]
    assert json.dumps(runs[0].to_json()) == json.dumps(runs[1].to_json())
    other = decode(ModelPolicy(small_model), TOK.encode("hi"), EngineConfig(max_total_tokens=40),
                   SamplerConfig(seed=12))
    assert other.tokens != runs[0].tokens


def _check_sound(res, cfg: EngineConfig):
    layout = res.layout
    assert layout.mode is Mode.SERIAL
    assert len(layout) <= cfg.max_total_tokens
    main = [t.token_id for t in layout.tokens[res.prompt_len:] if t.is_main]
    opens = main.count(S.para_open)
    assert opens == main.count(S.para_close) == len(layout.stages)
    for st in layout.stages:
        assert not st.open
    nested = {S.para_open, S.title_open, S.title_close, S.branch_open}
    for t in layout.tokens:
        if not t.is_main:
            stream_pos = t.branch_offset
            if stream_pos == 0:
                assert t.token_id == S.branch_open
            elif cfg.forbid_nested_para:
                assert t.token_id not in nested
    for g in res.transcript.groups:
        assert len(g.titles) == len(g.branches) > 0


def test_protocol_soundness_noisy():
    for seed in range(1000):
        cfg = EngineConfig(max_total_tokens=96, max_branch_tokens=12, max_titles=4)
        res = decode(NoisyPolicy(seed=seed), TOK.encode("go"), cfg, SamplerConfig(seed=seed, temperature=1.0))
        _check_sound(res, cfg)
        if not res.truncated:
            assert not any(tag in g_text for g in res.transcript.groups
                           for g_text in g.branches for tag in TAGS)


def test_protocol_soundness_model(small_model):
    for seed in range(10):
        cfg = EngineConfig(max_total_tokens=64, max_branch_tokens=8)
        res = decode(ModelPolicy(small_model), TOK.encode("go"), cfg, SamplerConfig(seed=seed))
        _check_sound(res, cfg)


def test_branch_budget_truncates():
    text = "<Title>a</Title><Para><Branch>a: " + "x" * 30 + "</Branch></Para>"
    p = ScriptedPolicy.from_response(text, prompt="q")
    res = decode(p, p.prompt, EngineConfig(max_branch_tokens=10))
    assert res.truncated
    assert res.transcript.groups[0].body(0) == "x" * 10


def test_total_budget_truncates():
    p = ScriptedPolicy.from_response(THREE, prompt="Q?")
    res = decode(p, p.prompt, EngineConfig(max_total_tokens=20))
    assert res.truncated
    assert len(res.layout) <= 20


def test_guided_model_matches_script(small_model):
    p = ScriptedPolicy.from_response(THREE, prompt="Q?")
    for vis in VisibilityMode:
        for scheme in ["same-seq", "same-max", "same-rearrange", "fixed-interval:16"]:
            cfg = EngineConfig(visibility=vis, positions=PositionScheme.parse(scheme))
            res = decode(ModelPolicy(small_model, guide=p), p.prompt, cfg)
            assert res.text == THREE
            if scheme == "same-rearrange":
                assert res.recomputed_tokens > 0


def test_result_json_excludes_timing_by_default():
    p = ScriptedPolicy.from_response(THREE, prompt="Q?")
    res = decode(p, p.prompt)
    assert "wall_times" not in res.to_json()
    assert set(res.to_json(timing=True)["wall_times"]) == {"total", "parallel", "serial"}
    assert res.token_counts == {"serial": res.serial_tokens, "parallel": res.parallel_tokens}


def test_eos_in_branch_closes_it():
    p = ScriptedPolicy(TOK.encode("q") + [S.title_open, 97, S.title_close, S.para_open, TOK.eos_id],
                       [[[S.branch_open, 97, 58, 32, 98, TOK.eos_id]]], prompt_len=1)
    res = decode(p, p.prompt)
    assert res.transcript.groups[0].branches == ("a: b",)
    assert not res.truncated


def test_empty_prompt_rejected():
    with pytest.raises(ValueError):
        decode(ScriptedPolicy([1]), [])
