"""Tuned-lens probes and per-layer needle probability curves.

Each probe is an affine map on one residual-stream state, followed by the
model's own (frozen) final norm and unembedding.  Probes are trained to match
the model's final next-byte distribution under KL divergence.
"""

from __future__ import annotations

import csv
import math
import os

import numpy as np

from . import functional as F
from .checkpoint import model_hash
from .data import BatchSampler
from .errors import IntegrityError, NumericalError
from .model import LanguageModel
from .needle import NeedleTask, prompt_batch
from .nn import Module, param
from .optim import AdamW
from .tensor import Tensor, no_grad

DIVERGENCE_FACTOR = 10.0


class LensProbe(Module):
    """``h -> h @ weight + bias``, initialized to the identity."""

    def __init__(self, d_model: int, dtype=np.float32):
        self.weight = param(np.eye(d_model), dtype)
        self.bias = param(np.zeros(d_model), dtype)
        self.history: list[float] = []

    def __call__(self, h: Tensor) -> Tensor:
        return h @ self.weight + self.bias


class LensSet(Module):
    """One probe per residual state: index 0 is the embedding, index ``depth`` the final layer."""

    def __init__(self, model: LanguageModel):
        self.probes = [LensProbe(model.d_model, model.dtype) for _ in range(model.depth + 1)]
        self.model_hash = model_hash(model)

    def __len__(self) -> int:
        return len(self.probes)

    def check(self, model: LanguageModel) -> None:
        if model_hash(model) != self.model_hash:
            raise IntegrityError("lens probes were trained for a different model")

    def save(self, path) -> str:
        path = os.fspath(path)
        arrays = {}
        for i, p in enumerate(self.probes):
            arrays[f"w{i}"] = p.weight.data
            arrays[f"b{i}"] = p.bias.data
            arrays[f"h{i}"] = np.asarray(p.history, dtype=np.float64)
        with open(path, "wb") as fh:
            np.savez(fh, model_hash=np.array(self.model_hash), **arrays)
        return path

    @classmethod
    def load(cls, path, model: LanguageModel) -> "LensSet":
        try:
            z = np.load(path)
        except (OSError, ValueError) as exc:
            raise IntegrityError(f"cannot read lens file {path}: {exc}") from exc
        lens = cls(model)
        lens.model_hash = str(z["model_hash"])
        if len(lens.probes) * 3 != len(z.files) - 1:
            raise IntegrityError("lens file depth does not match the model")
        for i, p in enumerate(lens.probes):
            p.weight.data = z[f"w{i}"].astype(p.weight.dtype)
            p.bias.data = z[f"b{i}"].astype(p.bias.dtype)
            p.history = z[f"h{i}"].tolist()
        lens.check(model)
        return lens


def _frozen_head(model: LanguageModel):
    gain = Tensor(model.final_norm.data)
    unembed = Tensor(model.unembed.data)
    return lambda h: F.rmsnorm(h, gain, model.norm_eps) @ unembed


def kl_to_target(target_logp: np.ndarray, logits: Tensor) -> Tensor:
    """Mean over positions of ``KL(target || softmax(logits))``."""
    p = np.exp(target_logp)
    n = int(np.prod(target_logp.shape[:-1]))
    ent = float(np.sum(p * target_logp)) / n
    return ent - (F.log_softmax(logits) * Tensor(p.astype(logits.dtype))).sum() * (1.0 / n)


def lens_logits(model: LanguageModel, lens: LensSet, ids) -> list[Tensor]:
    head = _frozen_head(model)
    with no_grad():
        states = model.hidden_states(ids)
        return [head(probe(Tensor(h.data))) for probe, h in zip(lens.probes, states)]


def train_lens(
    model: LanguageModel,
    data: np.ndarray,
    steps: int = 200,
    lr: float = 1e-3,
    seq_len: int = 128,
    batch_size: int = 8,
    seed: int = 0,
) -> LensSet:
    """Fit every probe to the model's final distribution on held-out bytes.

    The model is never modified.  The final-layer probe stays at the identity,
    where it reproduces the head exactly.  A probe whose loss exceeds ten
    times its initial value raises :class:`NumericalError` naming the layer.
    """
    was_training = model.training
    model.eval()
    lens = LensSet(model)
    head = _frozen_head(model)
    sampler = BatchSampler(data, seq_len, batch_size, seed=seed)
    trained = lens.probes[:-1]
    opts = [AdamW(p, lr=lr, weight_decay=0.0) for p in trained]
    try:
        for _ in range(steps):
            inp, _ = sampler.next()
            with no_grad():
                states = [h.data for h in model.hidden_states(inp)]
                target = F.log_softmax(head(Tensor(states[-1]))).data
            for layer, (probe, opt, h) in enumerate(zip(trained, opts, states)):
                loss = kl_to_target(target, head(probe(Tensor(h))))
                value = float(loss.data)
                first = probe.history[0] if probe.history else value
                if not math.isfinite(value) or value > DIVERGENCE_FACTOR * max(first, 1e-6):
                    raise NumericalError(f"lens probe for layer {layer} diverged (loss {value:.4g}, initial {first:.4g})")
                probe.history.append(value)
                probe.zero_grad()
                loss.backward()
                opt.step()
    finally:
        model.train(was_training)
    return lens


def lens_kl(model: LanguageModel, lens: LensSet, data: np.ndarray, seq_len: int = 128, batch_size: int = 8,
            batches: int = 4, seed: int = 1) -> list[float]:
    """Mean KL per probe on held-out windows."""
    head = _frozen_head(model)
    sampler = BatchSampler(data, seq_len, batch_size, seed=seed)
    totals = np.zeros(len(lens))
    with no_grad():
        for _ in range(batches):
            inp, _ = sampler.next()
            states = model.hidden_states(inp)
            target = F.log_softmax(head(Tensor(states[-1].data))).data
            for i, (probe, h) in enumerate(zip(lens.probes, states)):
                totals[i] += float(kl_to_target(target, head(probe(Tensor(h.data)))).data)
    return (totals / batches).tolist()


def needle_snr(model: LanguageModel, lens: LensSet, tasks: list[NeedleTask], batch_size: int = 16) -> list[dict]:
    """Per-layer mean probability of the answer byte at the read position, with its standard error."""
    lens.check(model)
    head = _frozen_head(model)
    probs = [[] for _ in lens.probes]
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for i in range(0, len(tasks), batch_size):
                chunk = tasks[i : i + batch_size]
                ids, read = prompt_batch(chunk)
                rows = np.arange(len(chunk))
                answers = [t.answer for t in chunk]
                for layer, (probe, h) in enumerate(zip(lens.probes, model.hidden_states(ids))):
                    at = Tensor(h.data[rows, read])
                    p = F.softmax(head(probe(at))).data
                    probs[layer].extend(p[rows, answers].tolist())
    finally:
        model.train(was_training)
    out = []
    for layer, vals in enumerate(probs):
        v = np.asarray(vals, dtype=np.float64)
        sem = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        out.append({"layer": layer, "mean_prob": float(v.mean()) if v.size else float("nan"), "sem": sem})
    return out


def write_snr_csv(path, curves: dict[str, list[dict]]) -> str:
    """One curve: ``layer,mean_prob,sem``; several: a leading ``model`` column."""
    path = os.fspath(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        multi = len(curves) > 1
        w.writerow((["model"] if multi else []) + ["layer", "mean_prob", "sem"])
        for name, rows in curves.items():
            for r in rows:
                w.writerow(([name] if multi else []) + [r["layer"], repr(r["mean_prob"]), repr(r["sem"])])
    return path
