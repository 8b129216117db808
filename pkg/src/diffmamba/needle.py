"""Synthetic single-fact needle retrieval.

A needle sentence carrying a one-byte answer is planted inside filler text at
the beginning, middle or end of the context.  The prompt follows::

    <context>{input}</context>Question:{question} Answer:

and the model is scored on the byte it predicts right after ``Answer:``.
This is a desk-scale stand-in for a long-context QA benchmark; it measures
single-fact retrieval only.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .data import synthetic_text
from .errors import ConfigError, DataError
from .model import PAD_ID, LanguageModel
from .tensor import no_grad

PROMPT_TEMPLATE = "<context>{input}</context>Question:{question} Answer:"
QUESTION = "What is the secret code?"
# Two needle wordings with disjoint byte sets: every byte value is absent
# from at least one of them, so answers can be drawn from all 256 bytes.
NEEDLE_TEMPLATES = ("The secret code is {answer}.", "KEY={answer}!")
POSITIONS = ("begin", "middle", "end")
TASK_NOTE = "synthetic single-fact needle retrieval (desk-scale stand-in for a long-context QA benchmark)"


def _to_text(b: bytes) -> str:
    return b.decode("latin-1")


def _to_bytes(s: str) -> bytes:
    return s.encode("latin-1")


def needle_sentence(answer: int) -> bytes:
    ch = chr(answer)
    for tmpl in NEEDLE_TEMPLATES:
        if ch not in tmpl.replace("{answer}", ""):
            return _to_bytes(tmpl.format(answer=ch))
    raise ConfigError("needle templates must not share bytes")


@dataclass
class NeedleTask:
    context_length: int
    position: str
    insert_at: int
    answer: int
    context: str
    question: str = QUESTION

    @property
    def answer_id(self) -> int:
        return self.answer

    @property
    def prompt(self) -> str:
        return PROMPT_TEMPLATE.format(input=self.context, question=self.question)

    def prompt_ids(self) -> np.ndarray:
        return np.frombuffer(_to_bytes(self.prompt), dtype=np.uint8).astype(np.int64)

    def to_json(self) -> dict:
        d = asdict(self)
        d["prompt"] = self.prompt
        d["answer_id"] = self.answer
        return d

    @classmethod
    def from_json(cls, d: dict) -> "NeedleTask":
        return cls(d["context_length"], d["position"], d["insert_at"], d["answer"], d["context"], d.get("question", QUESTION))


def insert_offset(position: str, context_length: int, needle_length: int) -> int:
    room = context_length - needle_length
    if position == "begin":
        return 0
    if position == "middle":
        return room // 2
    if position == "end":
        return room
    raise ConfigError(f"unknown needle position {position!r}")


def make_task(filler: bytes, context_length: int, position: str, answer: int, rng: np.random.Generator) -> NeedleTask:
    needle = needle_sentence(answer)
    if context_length < len(needle):
        raise DataError(f"context length {context_length} is shorter than the needle ({len(needle)} bytes)")
    need = context_length - len(needle)
    clean = filler.replace(bytes([answer]), b"")
    if len(clean) < need:
        raise DataError(f"filler too short: need {need} bytes, have {len(clean)}")
    start = int(rng.integers(0, len(clean) - need + 1))
    fill = clean[start : start + need]
    at = insert_offset(position, context_length, len(needle))
    context = fill[:at] + needle + fill[at:]
    if context.count(bytes([answer])) != 1:
        raise DataError("answer byte is not unique in the context")
    return NeedleTask(context_length, position, at, answer, _to_text(context))


def generate_needle_dataset(count: int, lengths, seed: int = 0, filler: bytes | None = None) -> list[NeedleTask]:
    """Round-robin over (length, position) strata so stratum sizes differ by at most one."""
    if count < 0:
        raise ConfigError("count must be nonnegative")
    lengths = [int(n) for n in lengths]
    if count and not lengths:
        raise ConfigError("at least one context length is required")
    rng = np.random.default_rng(seed)
    if filler is None:
        filler = synthetic_text(max(lengths, default=0) * 4 + 4096, seed=seed + 1)
    strata = [(n, p) for n in lengths for p in POSITIONS]
    tasks = []
    for i in range(count):
        n, pos = strata[i % len(strata)]
        answer = int(rng.integers(0, 256))
        tasks.append(make_task(filler, n, pos, answer, rng))
    return tasks


def write_jsonl(path, tasks: list[NeedleTask]) -> str:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_json(), sort_keys=True) + "\n")
    return path


def read_jsonl(path) -> list[NeedleTask]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [NeedleTask.from_json(json.loads(line)) for line in fh if line.strip()]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"cannot read needle dataset {path}: {exc}") from exc


def prompt_batch(tasks: list[NeedleTask]) -> tuple[np.ndarray, np.ndarray]:
    """Right-padded prompt ids and the read position (last prompt byte) per row."""
    ids = [t.prompt_ids() for t in tasks]
    width = max((len(i) for i in ids), default=0)
    out = np.full((len(ids), width), PAD_ID, dtype=np.int64)
    for r, i in enumerate(ids):
        out[r, : len(i)] = i
    return out, np.array([len(i) - 1 for i in ids], dtype=np.int64)


def answer_loss(model: LanguageModel, tasks: list[NeedleTask]):
    """Cross-entropy on the answer byte only."""
    ids, read = prompt_batch(tasks)
    targets = np.zeros(ids.shape, dtype=np.int64)
    mask = np.zeros(ids.shape)
    rows = np.arange(len(tasks))
    targets[rows, read] = [t.answer for t in tasks]
    mask[rows, read] = 1.0
    return F.cross_entropy(model(ids), targets, mask)


def answer_probabilities(model: LanguageModel, tasks: list[NeedleTask], batch_size: int = 16) -> np.ndarray:
    """Model probability of the answer byte at the read position, per task."""
    out = []
    with no_grad():
        for i in range(0, len(tasks), batch_size):
            chunk = tasks[i : i + batch_size]
            ids, read = prompt_batch(chunk)
            logits = model(ids).data[np.arange(len(chunk)), read]
            p = F.softmax(logits).data
            out.extend(p[np.arange(len(chunk)), [t.answer for t in chunk]])
    return np.asarray(out, dtype=np.float64)


def needle_grid(model: LanguageModel, tasks: list[NeedleTask], batch_size: int = 16) -> dict:
    """Retrieval accuracy per ``position -> context length`` cell."""
    grid: dict[str, dict[str, list]] = {}
    with no_grad():
        for i in range(0, len(tasks), batch_size):
            chunk = tasks[i : i + batch_size]
            ids, read = prompt_batch(chunk)
            pred = np.argmax(model(ids).data[np.arange(len(chunk)), read], axis=-1)
            for t, p in zip(chunk, pred):
                grid.setdefault(t.position, {}).setdefault(str(t.context_length), []).append(float(p == t.answer))
    return {r: {c: float(np.mean(v)) for c, v in cols.items()} for r, cols in grid.items()}
