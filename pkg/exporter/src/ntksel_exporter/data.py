"""Dataset loading and the fallback byte tokenizer.

Export jobs consume JSON lines with fields ``id``, ``prompt``, ``response``.
Any callable ``text -> list[int]`` works as a tokenizer; the built-in byte
tokenizer (one token per UTF-8 byte) needs no vocabulary files and pairs
with test models whose vocab covers 256 ids.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path


@dataclass
class Sample:
    id: str
    prompt: str
    response: str


def load_jsonl(path) -> list[Sample]:
    samples = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        d = json.loads(line)
        try:
            samples.append(Sample(str(d["id"]), d["prompt"], d["response"]))
        except KeyError as e:
            raise ValueError(f"{path}:{line_no}: missing field {e}") from e
    return samples


def byte_tokenizer(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def split_sample_id(sample_id: str) -> tuple[str, int]:
    """Map a dataset id to the engine's (tag, index) key.

    Ids of the form ``tag:123`` keep their tag; anything else lands in the
    ``sample`` tag with a stable non-negative index requirement.
    """
    tag, _, idx = sample_id.rpartition(":")
    if tag and idx.isdigit():
        return tag, int(idx)
    if sample_id.isdigit():
        return "sample", int(sample_id)
    raise ValueError(
        f"sample id {sample_id!r} must look like 'tag:<int>' or '<int>'"
    )
