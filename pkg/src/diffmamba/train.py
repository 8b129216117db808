"""Training loop, evaluation metrics and run reports."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import functional as F
from . import kernels
from .checkpoint import Checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import BatchSampler, Corpus, batched_windows, eval_windows
from .errors import NumericalError
from .model import BlockSpec, LanguageModel, build_model, stack_specs
from .optim import AdamW, clip_grad_norm, lr_at
from .tensor import no_grad

LN2 = math.log(2.0)
LOG_FIELDS = ("step", "split", "loss", "ppl", "bpb", "lr", "elapsed_s")


def specs_from_config(m: ModelConfig) -> list[BlockSpec]:
    kw = dict(
        d_state=m.d_state,
        d_conv=m.d_conv,
        heads=m.heads or None,
        lambda_mode=m.lambda_mode,
        normalized=m.normalized,
        fused=m.fused,
        shared_out_proj=m.shared_out_proj,
        lambda_init=m.lambda_init,
    )
    specs = stack_specs(m.pattern, m.depth, **kw)
    for s in specs:
        if s.kind == "mamba":
            s.expand = m.expand
            s.heads = m.heads or None
    return specs


def model_from_config(m: ModelConfig, seed: int = 0, dropout: float = 0.0, dtype=np.float32) -> LanguageModel:
    return build_model(specs_from_config(m), m.d_model, dtype=dtype, seed=seed, dropout=dropout)


def metrics_from_nll(nll: float) -> dict:
    return {"loss": nll, "ppl": math.exp(min(nll, 700.0)), "bpb": nll / LN2}


def eval_nll(
    model: LanguageModel,
    data: np.ndarray,
    seq_len: int,
    batch_size: int = 16,
    max_bytes: int = 0,
    mode: str = "sequential",
) -> tuple[float, int]:
    """Summed NLL (nats) and target count over windows tiling ``data`` once."""
    if max_bytes and data.size > max_bytes:
        data = data[:max_bytes]
    total, count = 0.0, 0
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for inp, tgt, mask in batched_windows(eval_windows(data, seq_len), batch_size):
                logits = model(inp, mode=mode)
                total += float(F.cross_entropy(logits, tgt, mask, reduction="sum").data)
                count += int(mask.sum())
    finally:
        model.train(was_training)
    return total, count


def eval_metrics(model, data, seq_len, batch_size=16, max_bytes=0, mode="sequential") -> dict:
    total, count = eval_nll(model, data, seq_len, batch_size, max_bytes, mode)
    return metrics_from_nll(total / max(count, 1))


def evaluate(model, data, seq_len: int, unit: str = "ppl", batch_size: int = 16, max_bytes: int = 0) -> float:
    """Perplexity (``exp`` of mean NLL) or bits per byte (mean NLL / ln 2)."""
    if unit not in ("ppl", "bpb", "loss"):
        raise ValueError(f"unknown unit {unit!r}")
    return eval_metrics(model, data, seq_len, batch_size, max_bytes)[unit]


@dataclass
class RunReport:
    name: str
    architecture: dict
    param_count: int
    param_breakdown: dict
    seed: int
    steps: int
    backend: str
    curve: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    lambdas: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    grid: dict = field(default_factory=dict)

    def eval_curve(self, split: str = "test") -> list[tuple[int, float]]:
        return [(r["step"], r["loss"]) for r in self.curve if r["split"] == split]

    def table1_row(self) -> dict:
        test = self.final.get("test", {})
        return {
            "model": self.name,
            "params": self.param_count,
            "test_loss": test.get("loss"),
            "test_ppl": test.get("ppl"),
            "test_bpb": test.get("bpb"),
        }

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            for r in self.curve:
                w.writerow(r)

    @classmethod
    def read_json(cls, path) -> "RunReport":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def table1(reports: list[RunReport]) -> str:
    """Plain-text table with parameter counts and test ppl / bpb."""
    lines = ["model,params,test_ppl,test_bpb"]
    for r in reports:
        row = r.table1_row()
        lines.append(f"{row['model']},{row['params']},{row['test_ppl']:.4f},{row['test_bpb']:.4f}")
    return "\n".join(lines) + "\n"


def param_breakdown(model: LanguageModel) -> dict:
    out = {"embedding": 0, "blocks": 0, "norms": 0, "head": 0}
    for name, p in model.named_parameters():
        if name == "embed":
            out["embedding"] += p.size
        elif name == "unembed":
            out["head"] += p.size
        elif name == "final_norm" or name.endswith(".norm"):
            out["norms"] += p.size
        else:
            out["blocks"] += p.size
    return {k: int(v) for k, v in out.items()}


def _fmt(v: float) -> str:
    return repr(float(v))


class CsvLog:
    """Append-only ``step,split,loss,ppl,bpb,lr,elapsed_s`` log."""

    def __init__(self, path=None):
        self.path = path
        if path:
            new = not os.path.exists(path) or os.path.getsize(path) == 0
            self._fh = open(path, "a", newline="", encoding="utf-8")
            if new:
                self._fh.write(",".join(LOG_FIELDS) + "\n")
        else:
            self._fh = None

    def write(self, row: dict) -> None:
        if self._fh:
            self._fh.write(",".join(_fmt(row[k]) if isinstance(row[k], float) else str(row[k]) for k in LOG_FIELDS) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def train_loop(
    cfg: TrainConfig,
    model: LanguageModel,
    corpus: Corpus,
    seed: int | None = None,
    name: str = "model",
    log_path=None,
    on_step: Callable[[int, LanguageModel], None] | None = None,
    abort_dir=None,
    optimizer: AdamW | None = None,
) -> RunReport:
    """Train ``model`` in place; evaluate valid/test every ``eval_interval`` steps.

    Everything except ``elapsed_s`` is a function of (seed, config, corpus).
    A non-finite loss raises :class:`NumericalError` carrying ``step`` and
    ``last_good`` (a checkpoint of the parameters before that step).
    """
    cfg.validate()
    seed = cfg.seeds[0] if seed is None else seed
    sampler = BatchSampler(corpus.train, cfg.max_seq_len, cfg.batch_size, seed=seed)
    opt = optimizer if optimizer is not None else AdamW(model, lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = CsvLog(log_path)
    report = RunReport(
        name=name,
        architecture=model.architecture(),
        param_count=model.param_count(),
        param_breakdown=param_breakdown(model),
        seed=seed,
        steps=cfg.steps,
        backend=kernels.BACKEND,
    )
    t0 = time.perf_counter()

    def record(step, split, m, lr):
        row = {"step": step, "split": split, "loss": m["loss"], "ppl": m["ppl"], "bpb": m["bpb"], "lr": lr,
               "elapsed_s": round(time.perf_counter() - t0, 3)}
        log.write(row)
        report.curve.append(row)

    def run_eval(step, lr):
        for split in ("valid", "test"):
            data = corpus.split(split)
            if data.size < 2:
                continue
            m = eval_metrics(model, data, cfg.max_seq_len, cfg.eval_batch_size, cfg.eval_max_bytes, cfg.scan_mode)
            record(step, split, m, lr)
            report.final[split] = m

    def abort(step, good, cause):
        if good is None:
            good = Checkpoint.from_model(model, opt, step)
        good.meta["aborted_at"] = step
        if abort_dir:
            save_checkpoint(os.path.join(abort_dir, "last_good.ckpt"), good)
        err = NumericalError(f"non-finite training loss at step {step}: {cause}")
        err.step, err.last_good = step, good
        return err

    good = None  # parameters that last produced a finite loss
    try:
        model.train()
        run_eval(0, 0.0)
        for step in range(cfg.steps):
            lr = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps, cfg.min_lr_ratio)
            inp, tgt = sampler.next()
            try:
                loss = F.cross_entropy(model(inp, mode=cfg.scan_mode), tgt)
            except NumericalError as exc:
                raise abort(step, good, exc) from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise abort(step, good, f"loss {value}")
            good = Checkpoint.from_model(model, opt, step)
            model.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                clip_grad_norm(model.parameters(), cfg.grad_clip)
            opt.step(lr)
            record(step + 1, "train", metrics_from_nll(value), lr)
            if on_step is not None:
                on_step(step + 1, model)
            if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.steps:
                run_eval(step + 1, lr)
    finally:
        log.close()
        model.eval()
    report.lambdas = [{"layer": i, "lambda": v, "lambda_init": l0} for i, v, l0 in model.lambdas()]
    return report


def smoothed(values, window: int) -> list[float]:
    """Trailing mean over ``window`` entries (shorter at the start)."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    out = []
    for i in range(values.size):
        lo = max(0, i + 1 - window)
        out.append(float((c[i + 1] - c[lo]) / (i + 1 - lo)))
    return out
