"""JSON Lines corpus files."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from .pipeline import Sample


def dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=False, separators=(",", ":"))


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(dumps(r) + "\n")


def sample_from_json(obj) -> Sample:
    if not isinstance(obj, dict):
        raise ValueError("sample must be a JSON object")
    for key in ("id", "prompt", "response"):
        if not isinstance(obj.get(key), str):
            raise ValueError(f"field {key!r} must be a string")
    answer = obj.get("answer")
    if answer is not None and not isinstance(answer, str):
        raise ValueError("field 'answer' must be a string or null")
    return Sample(obj["id"], obj["prompt"], obj["response"], answer)


def read_samples(path) -> tuple[list[Sample], list[tuple[int, str]]]:
    """Parse a corpus file; bad lines are returned as (line number, error) and skipped."""
    samples, errors = [], []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            samples.append(sample_from_json(json.loads(line)))
        except (ValueError, json.JSONDecodeError) as exc:
            errors.append((n, str(exc)))
    return samples, errors
