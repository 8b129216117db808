"""Byte corpora, splits, training batches and evaluation windows."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError
from .model import PAD_ID


@dataclass
class Corpus:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray

    def split(self, name: str) -> np.ndarray:
        if name not in ("train", "valid", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def sizes(self) -> dict:
        return {k: int(getattr(self, k).size) for k in ("train", "valid", "test")}


def parse_fractions(spec) -> tuple[float, float, float]:
    if isinstance(spec, str):
        parts = [p for p in spec.replace(",", "/").split("/") if p.strip()]
        vals = [float(p) for p in parts]
    else:
        vals = [float(v) for v in spec]
    if len(vals) != 3:
        raise ConfigError(f"need three split fractions, got {vals}")
    if any(v > 1.0 for v in vals) and abs(sum(vals) - 100.0) < 1e-9:
        vals = [v / 100.0 for v in vals]
    if any(v < 0 for v in vals) or abs(sum(vals) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {vals}")
    return vals[0], vals[1], vals[2]


def split_bytes(data: np.ndarray, fractions=(0.8, 0.1, 0.1)) -> Corpus:
    f = parse_fractions(fractions)
    n = data.size
    n_train = int(np.floor(n * f[0] + 1e-9))
    n_valid = int(np.floor(n * f[1] + 1e-9))
    return Corpus(data[:n_train], data[n_train : n_train + n_valid], data[n_train + n_valid :])


def load_corpus(path, fractions=(0.8, 0.1, 0.1)) -> Corpus:
    """Read a raw byte file and cut it into contiguous train/valid/test splits.

    Token ids are the byte values themselves.
    """
    f = parse_fractions(fractions)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    if not raw:
        raise DataError(f"corpus {path} is empty")
    return split_bytes(np.frombuffer(raw, dtype=np.uint8).copy(), f)


_SUBJECTS = "the cat|a dog|my friend|the old man|a small bird|the teacher|our neighbor|the river|a child|the city".split("|")
_VERBS = "sees|likes|follows|remembers|carries|finds|watches|builds|paints|hears|opens|keeps".split("|")
_OBJECTS = (
    "the red door|a quiet garden|the long road|an empty box|the blue sky|a warm house|"
    "the green hill|a bright lamp|the heavy stone|a new book|the wooden table|an open window"
).split("|")
_ADVERBS = "today|again|slowly|at night|in the morning|every day|with care|once more".split("|")
_JOINERS = ["and then", "because", "while", "but", "so"]


def synthetic_text(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic English-like text from a small phrase grammar.

    The output has real structure (a closed vocabulary with skewed frequencies
    and fixed word order), so a small model can learn it quickly.
    """
    if n_bytes < 0:
        raise ConfigError("n_bytes must be nonnegative")
    rng = np.random.default_rng(seed)

    def pick(words):
        # Zipf-like preference for early entries
        w = 1.0 / np.arange(1, len(words) + 1)
        return words[rng.choice(len(words), p=w / w.sum())]

    def clause():
        s = f"{pick(_SUBJECTS)} {pick(_VERBS)} {pick(_OBJECTS)}"
        if rng.random() < 0.4:
            s += " " + pick(_ADVERBS)
        return s

    out = []
    size = 0
    while size < n_bytes:
        s = clause()
        if rng.random() < 0.3:
            s += f" {pick(_JOINERS)} {clause()}"
        s = s[0].upper() + s[1:] + (". " if rng.random() < 0.85 else "! ")
        if rng.random() < 0.08:
            s += "\n"
        out.append(s)
        size += len(s)
    return "".join(out).encode("ascii")[:n_bytes]


def write_synthetic_corpus(path, n_bytes: int, seed: int = 0) -> str:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(synthetic_text(n_bytes, seed))
    return path


class BatchSampler:
    """Random contiguous windows of ``seq_len + 1`` bytes from one split."""

    def __init__(self, data: np.ndarray, seq_len: int, batch_size: int, seed: int = 0):
        if seq_len < 1 or batch_size < 1:
            raise ConfigError("seq_len and batch_size must be positive")
        if data.size < seq_len + 1:
            raise DataError(f"split of {data.size} bytes is shorter than seq_len + 1 = {seq_len + 1}")
        self.data = np.asarray(data, dtype=np.int64)
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        starts = self.rng.integers(0, self.data.size - self.seq_len, size=self.batch_size)
        win = self.data[starts[:, None] + np.arange(self.seq_len + 1)]
        return win[:, :-1], win[:, 1:]


@dataclass
class EvalWindow:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray


def eval_windows(data: np.ndarray, seq_len: int) -> list[EvalWindow]:
    """Non-overlapping windows whose targets cover bytes ``1..n-1`` exactly once.

    The last window is right-padded with the pad id and masked.
    """
    data = np.asarray(data, dtype=np.int64)
    n_targets = data.size - 1
    out = []
    for start in range(0, max(n_targets, 0), seq_len):
        stop = min(start + seq_len, n_targets)
        k = stop - start
        inp = np.full(seq_len, PAD_ID, dtype=np.int64)
        tgt = np.zeros(seq_len, dtype=np.int64)
        mask = np.zeros(seq_len)
        inp[:k] = data[start:stop]
        tgt[:k] = data[start + 1 : stop + 1]
        mask[:k] = 1.0
        out.append(EvalWindow(inp, tgt, mask))
    return out


def batched_windows(windows: list[EvalWindow], batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    for i in range(0, len(windows), batch_size):
        chunk = windows[i : i + batch_size]
        yield (
            np.stack([w.inputs for w in chunk]),
            np.stack([w.targets for w in chunk]),
            np.stack([w.mask for w in chunk]),
        )
