"""Command-line entry point.

Output is JSON on stdout unless ``--pretty`` or ``--csv`` is given. Exit
codes: 0 success, 1 data failures, 2 usage or configuration errors. The seed
falls back to the ``ASPD_SEED`` environment variable, then to 0.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import metrics
from .corpus import (
    MockJudge, PipelineConfig, Stage, emit_training_layout, parse_tagged, run_pipeline,
    validate_integrity,
)
from .corpus.io import dumps, read_samples, write_jsonl
from .engine import EngineConfig, decode
from .errors import AspdError, ConfigError, SamplingError
from .mask import VisibilityMode
from .model import ModelConfig, PositionScheme, init_model, load_weights, save_weights
from .policy import ModelPolicy, ScriptedPolicy
from .sampling import GREEDY, STOCHASTIC, SamplerConfig
from .vocab import ByteTokenizer


class UsageError(Exception):
    pass


def _emit(obj, pretty: bool = False, out=None) -> None:
    # ASCII escapes keep undecodable bytes (lone surrogates) printable
    out = out or sys.stdout
    out.write(json.dumps(obj, indent=2 if pretty else None,
                         separators=None if pretty else (",", ":")) + "\n")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("ASPD_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"ASPD_SEED must be an integer, got {env!r}")


# -- decode -----------------------------------------------------------------

def load_script(path) -> tuple[ScriptedPolicy, list[int]]:
    """Script file: {"prompt": str, "response": tagged str} or raw token streams
    {"main": [...], "branches": [[[...]]], "prompt_len": n}."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read script {path}: {exc}")
    if "response" in data:
        policy = ScriptedPolicy.from_response(data["response"], prompt=data.get("prompt", ""))
    else:
        policy = ScriptedPolicy(data["main"], data.get("branches", ()),
                                prompt_len=data.get("prompt_len", 0))
    return policy, policy.prompt


def _engine_cfg(args) -> EngineConfig:
    try:
        scheme = PositionScheme.parse(args.positions)
    except ValueError as exc:
        raise UsageError(f"bad --positions {args.positions!r}: {exc}")
    return EngineConfig(
        max_total_tokens=args.max_total_tokens, max_branch_tokens=args.max_branch_tokens,
        max_titles=args.max_titles, visibility=VisibilityMode(args.visibility),
        positions=scheme, forbid_nested_para=not args.allow_nested)


def _sampler_cfg(args, seed: int) -> SamplerConfig:
    try:
        return SamplerConfig(temperature=args.temperature, top_k=args.top_k, top_p=args.top_p,
                             seed=seed, mode=GREEDY if args.greedy else STOCHASTIC)
    except SamplingError as exc:
        raise UsageError(str(exc))


def _load_model(path):
    try:
        return load_weights(path)
    except (OSError, ValueError, AspdError) as exc:
        raise UsageError(f"cannot load weights {path}: {exc}")


def cmd_decode(args) -> int:
    seed = _seed(args)
    if not args.weights and not args.scripted:
        raise UsageError("decode needs --weights or --scripted")
    script, prompt = load_script(args.scripted) if args.scripted else (None, [])
    if args.weights:
        model = _load_model(args.weights)
        policy = ModelPolicy(model, guide=script)
    else:
        policy = script
    if args.prompt is not None:
        prompt = ByteTokenizer(policy.vocab_size).encode(args.prompt)
    if not prompt:
        raise UsageError("empty prompt: pass --prompt or a script with a prompt")
    result = decode(policy, prompt, _engine_cfg(args), _sampler_cfg(args, seed))
    out = result.to_json(timing=args.timing)
    out["seed"] = seed
    if args.report:
        out["report"] = metrics.throughput(result).to_json(timing=args.timing)
        m = metrics.layout_metrics(result.layout, result.prompt_len, policy.eos_id)
        out["report"].update(dp=m.dp, abn=m.abn)
    _emit(out, args.pretty)
    return 0


# -- corpus -----------------------------------------------------------------

def _read(path):
    if not Path(path).exists():
        raise UsageError(f"no such file: {path}")
    return read_samples(path)


def _line_errors(errors):
    return [{"line": n, "error": e} for n, e in errors]


def cmd_validate(args) -> int:
    samples, errors = _read(args.input)
    rows, bad = [], len(errors)
    for s in samples:
        try:
            rows.append(validate_integrity(parse_tagged(s.response, s.id)).to_json())
        except AspdError as exc:
            rows.append({"id": s.id, "error": str(exc)})
            bad += 1
    _emit({"reports": rows, "line_errors": _line_errors(errors)}, args.pretty)
    return 1 if bad else 0


def cmd_curate(args) -> int:
    samples, errors = _read(args.input)
    if args.judge != "mock":
        raise UsageError(f"unknown judge {args.judge!r}")
    judge = MockJudge(fail_stages=frozenset(Stage(s) for s in args.fail_stage))
    cfg = PipelineConfig(candidates=args.candidates, votes=args.votes, threshold=args.threshold,
                         workers=args.workers)
    curated, report = run_pipeline(samples, judge, cfg)
    write_jsonl(args.out, (c.to_json() for c in curated))
    twins = args.twins or str(Path(args.out).with_suffix("")) + ".serial.jsonl"
    write_jsonl(twins, (c.twin_json() for c in curated))
    rep = report.to_json()
    rep["line_errors"] = _line_errors(errors)
    _emit(rep, args.pretty)
    return 1 if errors or report.failed else 0


SAMPLE_COLUMNS = ["id", "total_tokens", "parallel_tokens", "dp", "abn", "stage_branch_counts",
                  "is_parallel"]


def cmd_stats(args) -> int:
    samples, errors = _read(args.input)
    per, bad = [], len(errors)
    for s in samples:
        try:
            per.append(metrics.sample_metrics(parse_tagged(s.response, s.id)))
        except AspdError:
            bad += 1
    rows = [m.to_json(args.weighted) for m in per]
    cols = SAMPLE_COLUMNS + (["abn_weighted"] if args.weighted else [])
    if args.csv:
        sys.stdout.write(metrics.format_csv(rows, cols))
    else:
        corpus = metrics.corpus_metrics(per).to_json(args.weighted) if per else None
        if args.pretty:
            sys.stdout.write(metrics.format_table(rows, cols))
            if corpus:
                sys.stdout.write("\n" + metrics.format_table([corpus]))
        else:
            _emit({"samples": rows, "corpus": corpus, "line_errors": _line_errors(errors)})
    return 1 if bad else 0


def cmd_emit_training(args) -> int:
    samples, errors = _read(args.input)
    out, bad = [], len(errors)
    for s in samples:
        try:
            ex = emit_training_layout(parse_tagged(s.response, s.id),
                                      prompt=s.prompt if args.with_prompt else "")
            out.append(ex.to_json())
        except AspdError as exc:
            print(f"{s.id}: {exc}", file=sys.stderr)
            bad += 1
    write_jsonl(args.out, out)
    _emit({"written": len(out), "failed": bad}, args.pretty)
    return 1 if bad else 0


# -- bench ------------------------------------------------------------------

def bench_response(k: int, length: int, serial: int) -> str:
    """Serial text, then one group of ``k`` one-letter titles with bodies of ``length`` bytes."""
    body = ("abcdefghijklmnopqrstuvwxyz" * (length // 26 + 1))[:length]
    text = ("serial text " * (serial // 12 + 1))[:serial]
    if k == 0:
        return text
    titles = [chr(65 + i) for i in range(k)]
    return (text + "".join(f"<Title>{t}</Title>" for t in titles) + "<Para>"
            + "".join(f"<Branch>{t}: {body}</Branch>" for t in titles) + "</Para>")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}")


def cmd_bench(args) -> int:
    seed = _seed(args)
    ks, lengths, serials = _ints(args.branches), _ints(args.lengths), _ints(args.serial)
    if not ks or not lengths or not serials:
        raise UsageError("empty grid")
    if any(k < 0 or k > 26 for k in ks) or any(L < 1 for L in lengths) or any(s < 0 for s in serials):
        raise UsageError("branches must lie in [0, 26], lengths >= 1, serial >= 0")
    if args.weights:
        model = _load_model(args.weights)
    else:
        model = init_model(ModelConfig(seed=seed))
    sampler = SamplerConfig(seed=seed, mode=GREEDY)
    rows = []
    for k in ks:
        for L in lengths:
            for s in serials:
                text = bench_response(k, L, s)
                script = ScriptedPolicy.from_response(text, prompt="bench")
                limit = len(script.main) + k * (L + 8) + 16
                cfg = EngineConfig(max_total_tokens=limit, max_branch_tokens=L + 1, max_titles=max(k, 1))
                policy = ModelPolicy(model, guide=script) if not args.scripted_only else script
                res = decode(policy, script.prompt, cfg, sampler)
                tp = metrics.throughput(res)
                lm = metrics.layout_metrics(res.layout, res.prompt_len, script.eos_id)
                row = {"k": k, "L": L, "serial": s, "dp": lm.dp, "abn": lm.abn,
                       "sampled_tokens": res.sampled_token_count,
                       "sampled_steps": res.sampled_step_count, "step_speedup": tp.step_speedup}
                if args.timing:
                    row.update(tps=tp.tps, p_tps=tp.p_tps)
                rows.append(row)
    if args.json:
        _emit({"seed": seed, "rows": rows}, args.pretty)
    elif args.pretty:
        sys.stdout.write(metrics.format_table(rows))
    else:
        sys.stdout.write(metrics.format_csv(rows))
    return 0


# -- init-model ---------------------------------------------------------------

def cmd_init_model(args) -> int:
    cfg = ModelConfig(vocab_size=args.vocab_size, layers=args.layers, heads=args.heads,
                      head_dim=args.head_dim, hidden_dim=args.hidden_dim, ffn_dim=args.ffn_dim,
                      seed=_seed(args))
    model = init_model(cfg)
    save_weights(model, args.out)
    _emit({"out": args.out, "checksum": model.checksum(), "config": asdict(cfg)}, args.pretty)
    return 0


# -- parser -------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default: $ASPD_SEED or 0)")
    p.add_argument("--pretty", action="store_true", help="human-readable output")


def build_parser() -> tuple[argparse.ArgumentParser, list[argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="aspd", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    sub = parser.add_subparsers(dest="command", required=True)
    leaves = []

    d = sub.add_parser("decode", help="run the hybrid decoder")
    _common(d)
    d.add_argument("--weights", help="weights file from init-model")
    d.add_argument("--scripted", help="script JSON; with --weights it guides the model")
    d.add_argument("--prompt", help="prompt text (overrides the script prompt)")
    d.add_argument("--visibility", choices=[m.value for m in VisibilityMode], default="independent")
    d.add_argument("--positions", default="same-seq",
                   help="same-seq | same-max | same-rearrange | fixed-interval:N")
    d.add_argument("--max-total-tokens", type=int, default=4096)
    d.add_argument("--max-branch-tokens", type=int, default=512)
    d.add_argument("--max-titles", type=int, default=16)
    d.add_argument("--allow-nested", action="store_true", help="let branches sample title/para tags")
    d.add_argument("--greedy", action="store_true")
    d.add_argument("--temperature", type=float, default=0.7)
    d.add_argument("--top-k", type=int, default=20)
    d.add_argument("--top-p", type=float, default=0.8)
    d.add_argument("--report", action="store_true", help="append throughput and parallelism metrics")
    d.add_argument("--timing", action="store_true", help="include wall-clock fields")
    d.set_defaults(func=cmd_decode)
    leaves.append(d)

    c = sub.add_parser("corpus", help="corpus tools")
    csub = c.add_subparsers(dest="corpus_command", required=True)

    v = csub.add_parser("validate", help="structural checks per sample")
    _common(v)
    v.add_argument("input")
    v.set_defaults(func=cmd_validate)

    cu = csub.add_parser("curate", help="run the curation pipeline")
    _common(cu)
    cu.add_argument("input")
    cu.add_argument("--out", required=True, help="curated JSONL")
    cu.add_argument("--twins", help="serial twins JSONL (default: <out>.serial.jsonl)")
    cu.add_argument("--judge", default="mock", help="judge backend (only 'mock' is bundled)")
    cu.add_argument("--fail-stage", action="append", default=[],
                    choices=[s.value for s in Stage if s is not Stage.REWRITING],
                    help="make every vote of this stage fail (mock judge)")
    cu.add_argument("--candidates", type=int, default=3)
    cu.add_argument("--votes", type=int, default=3)
    cu.add_argument("--threshold", type=int, default=None, help="passing votes needed (default: all)")
    cu.add_argument("--workers", type=int, default=4)
    cu.set_defaults(func=cmd_curate)

    st = csub.add_parser("stats", help="PPD / DP / ABN")
    _common(st)
    st.add_argument("input")
    st.add_argument("--csv", action="store_true", help="one CSV row per sample")
    st.add_argument("--weighted", action="store_true", help="also report token-weighted ABN")
    st.set_defaults(func=cmd_stats)

    et = csub.add_parser("emit-training", help="teacher-forced training layouts")
    _common(et)
    et.add_argument("input")
    et.add_argument("--out", required=True)
    et.add_argument("--with-prompt", action=argparse.BooleanOptionalAction, default=True)
    et.set_defaults(func=cmd_emit_training)
    leaves += [v, cu, st, et]

    b = sub.add_parser("bench", help="step-speedup grid with the toy model")
    _common(b)
    b.add_argument("--branches", default="1,2,3,4", help="branch counts k")
    b.add_argument("--lengths", default="8,64,512", help="branch body lengths L")
    b.add_argument("--serial", default="0", help="leading serial text lengths")
    b.add_argument("--weights", help="weights file (default: fresh toy model)")
    b.add_argument("--scripted-only", action="store_true", help="skip the model forwards")
    b.add_argument("--timing", action=argparse.BooleanOptionalAction, default=True,
                   help="include tps / p_tps columns")
    b.add_argument("--json", action="store_true", help="JSON instead of CSV")
    b.set_defaults(func=cmd_bench)
    leaves.append(b)

    im = sub.add_parser("init-model", help="write random toy-model weights")
    _common(im)
    im.add_argument("--out", required=True)
    defaults = ModelConfig()
    for name in ("vocab_size", "layers", "heads", "head_dim", "hidden_dim", "ffn_dim"):
        im.add_argument("--" + name.replace("_", "-"), type=int, default=getattr(defaults, name))
    im.set_defaults(func=cmd_init_model)
    leaves.append(im)
    return parser, leaves


def _apply_config(path: str, leaves) -> None:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    known = {a.dest for p in leaves for a in p._actions}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for p in leaves:
        dests = {a.dest for a in p._actions}
        p.set_defaults(**{k: v for k, v in cfg.items() if k in dests})


def main(argv=None) -> int:
    parser, leaves = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config:
            _apply_config(known.config, leaves)
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"aspd: error: {exc}", file=sys.stderr)
        return 2
    except AspdError as exc:
        print(f"aspd: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
