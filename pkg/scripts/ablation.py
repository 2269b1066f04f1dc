#!/usr/bin/env python3
"""Decode one scripted response under every visibility x position-scheme pair.

Reports steps, recomputed tokens and whether the toy model's cached logits
match a full recompute. The guide script fixes the tokens, so only the model
side changes between cells.
"""
import argparse
import csv
import sys

import numpy as np

from aspd.engine import EngineConfig, decode
from aspd.mask import VisibilityMode, build_full_mask
from aspd.model import ModelConfig, PositionScheme, forward_full, init_model
from aspd.policy import ModelPolicy, ScriptedPolicy

RESPONSE = ("Plan:\n<Title>Food</Title><Title>Maps</Title><Title>Gear</Title><Para>"
            "<Branch>Food: rice, beans and tea</Branch><Branch>Maps: the trail guide</Branch>"
            "<Branch>Gear: tent and stove</Branch></Para>\nDone.")
SCHEMES = ["same-seq", "same-max", "same-rearrange", "fixed-interval:64"]


def max_error(res, model, visibility) -> float:
    ids = res.layout.token_ids()
    mask = build_full_mask(res.layout, visibility).to_dense()
    worst = 0.0
    for begin, logits, pos in res.trace:
        end = len(pos)
        ref = forward_full(model, ids[:end], pos, mask[:end, :end])
        worst = max(worst, float(np.max(np.abs(ref[begin:end] - logits))))
    return worst


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    model = init_model(ModelConfig(layers=args.layers, seed=args.seed))
    script = ScriptedPolicy.from_response(RESPONSE, prompt="Pack for a hike.")
    out = csv.writer(sys.stdout)
    out.writerow(["visibility", "positions", "steps", "sampled_steps", "recomputed", "max_abs_err"])
    for vis in VisibilityMode:
        for scheme in SCHEMES:
            cfg = EngineConfig(visibility=vis, positions=PositionScheme.parse(scheme))
            res = decode(ModelPolicy(model, guide=script, record=True), script.prompt, cfg)
            out.writerow([vis.value, scheme, res.step_count, res.sampled_step_count,
                          res.recomputed_tokens, f"{max_error(res, model, vis):.2e}"])


if __name__ == "__main__":
    main()
