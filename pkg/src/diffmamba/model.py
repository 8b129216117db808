"""Byte-level language model: embedding, pre-norm residual stack, head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import functional as F
from .diff import LAMBDA_MODES, DiffMamba, DiffS6Block, FusedDiffMamba, lambda_init_schedule
from .errors import ConfigError, NumericalError
from .mamba import MambaBlock
from .nn import Module, param
from .tensor import Tensor

BYTE_VOCAB = 256
PAD_ID = 256
BLOCK_KINDS = ("mamba", "diff-s6", "diff-mamba")
STACK_PATTERNS = ("mamba", "diff", "alternating")


@dataclass
class BlockSpec:
    """Configuration of one sequence-mixing block."""

    kind: str = "mamba"
    normalized: bool = True
    lambda_mode: str = "simple"
    expand: int = 2
    d_state: int = 16
    d_conv: int = 4
    heads: int | None = None
    fused: bool = True
    shared_out_proj: bool = False
    lambda_init: float | None = None

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.lambda_mode not in LAMBDA_MODES:
            raise ConfigError(f"unknown lambda mode {self.lambda_mode!r}")
        if self.expand not in (1, 2):
            raise ConfigError(f"expand must be 1 or 2, got {self.expand}")
        if self.d_state < 1 or self.d_conv < 1:
            raise ConfigError("d_state and d_conv must be positive")

    @property
    def is_diff(self) -> bool:
        return self.kind != "mamba"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BlockSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown block fields {sorted(extra)}")
        return cls(**d)


def stack_specs(pattern: str, depth: int, **kw) -> list[BlockSpec]:
    """``mamba``: all plain; ``diff``: all Diff-Mamba; ``alternating``: mamba, diff, ..."""
    if pattern not in STACK_PATTERNS:
        raise ConfigError(f"unknown stack pattern {pattern!r}; expected one of {STACK_PATTERNS}")
    diff_kw = {k: v for k, v in kw.items() if k != "expand"}
    plain = {k: kw[k] for k in ("d_state", "d_conv", "expand", "heads") if k in kw}
    out = []
    for i in range(depth):
        use_diff = pattern == "diff" or (pattern == "alternating" and i % 2 == 1)
        out.append(BlockSpec("diff-mamba", **diff_kw) if use_diff else BlockSpec("mamba", **plain))
    return out


def make_block(spec: BlockSpec, d_model: int, layer_index: int, dtype, rng) -> Module:
    lam0 = lambda_init_schedule(layer_index) if spec.lambda_init is None else spec.lambda_init
    common = dict(d_state=spec.d_state, d_conv=spec.d_conv, heads=spec.heads, dtype=dtype, rng=rng)
    if spec.kind == "mamba":
        return MambaBlock(d_model, expand=spec.expand, **common)
    if spec.kind == "diff-s6":
        return DiffS6Block(
            d_model, expand=spec.expand, normalized=spec.normalized, lambda_init=lam0,
            lambda_mode=spec.lambda_mode, **common,
        )
    if spec.fused and spec.normalized:
        return FusedDiffMamba(
            d_model, shared_out_proj=spec.shared_out_proj, lambda_init=lam0,
            lambda_mode=spec.lambda_mode, **common,
        )
    return DiffMamba(
        d_model, pre_sub_norm=spec.normalized, post_sub_norm=spec.normalized, lambda_init=lam0,
        lambda_mode=spec.lambda_mode, **common,
    )


class Layer(Module):
    """``h + dropout(block(rmsnorm(h)))``."""

    def __init__(self, block: Module, d_model: int, dtype):
        self.norm = param(np.ones(d_model), dtype)
        self.block = block


class LanguageModel(Module):
    def __init__(
        self,
        specs: list[BlockSpec],
        d_model: int,
        vocab: int = BYTE_VOCAB,
        dtype=np.float32,
        seed: int = 0,
        dropout: float = 0.0,
        norm_eps: float = 1e-5,
    ):
        if vocab < 2 or d_model < 1:
            raise ConfigError(f"invalid vocab/width: vocab={vocab}, d_model={d_model}")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {dropout}")
        rng = np.random.default_rng(seed)
        self.specs = list(specs)
        self.d_model = d_model
        self.vocab = vocab
        self.seed = seed
        self.dropout = dropout
        self.norm_eps = norm_eps
        # one extra row for the pad id; the head only predicts real tokens
        self.embed = param(rng.normal(0.0, 1.0, (vocab + 1, d_model)), dtype)
        self.layers = [Layer(make_block(s, d_model, i, dtype, rng), d_model, dtype) for i, s in enumerate(specs)]
        self.final_norm = param(np.ones(d_model), dtype)
        self.unembed = param(rng.uniform(-1, 1, (d_model, vocab)) / np.sqrt(d_model), dtype)
        self.dropout_rng = np.random.default_rng(seed + 1)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def layer_kinds(self) -> list[str]:
        return ["mamba" if s.kind == "mamba" else "diff" for s in self.specs]

    def architecture(self) -> dict:
        return {
            "d_model": self.d_model,
            "vocab": self.vocab,
            "seed": self.seed,
            "dropout": self.dropout,
            "norm_eps": self.norm_eps,
            "layers": [s.to_dict() for s in self.specs],
        }

    @classmethod
    def from_architecture(cls, arch: dict, dtype=np.float32) -> "LanguageModel":
        specs = [BlockSpec.from_dict(d) for d in arch["layers"]]
        return cls(
            specs, arch["d_model"], arch["vocab"], dtype=dtype, seed=arch.get("seed", 0),
            dropout=arch.get("dropout", 0.0), norm_eps=arch.get("norm_eps", 1e-5),
        )

    def hidden_states(self, ids, mode: str = "sequential") -> list[Tensor]:
        """Residual stream: ``[embedding, after layer 0, ..., after layer depth-1]``."""
        ids = np.asarray(ids)
        h = F.embedding(self.embed, ids)
        states = [h]
        for i, layer in enumerate(self.layers):
            try:
                y = layer.block(F.rmsnorm(h, layer.norm, self.norm_eps), mode=mode)
            except NumericalError as exc:
                raise NumericalError(f"layer {i}: {exc}") from exc
            h = h + F.dropout(y, self.dropout, self.dropout_rng, self.training)
            states.append(h)
        return states

    def head(self, h: Tensor) -> Tensor:
        """Final norm and unembedding (shared by the model and every lens)."""
        return F.rmsnorm(h, self.final_norm, self.norm_eps) @ self.unembed

    def forward(self, ids, mode: str = "sequential") -> Tensor:
        return self.head(self.hidden_states(ids, mode)[-1])

    __call__ = forward

    def lambdas(self) -> list[tuple[int, float, float]]:
        """``(layer, lambda, lambda_init)`` for every differential layer."""
        out = []
        for i, layer in enumerate(self.layers):
            lam = getattr(layer.block, "lam", None)
            if lam is not None:
                out.append((i, float(lam), lam.lambda_init))
        return out


def build_model(
    specs: list[BlockSpec],
    d_model: int,
    vocab: int = BYTE_VOCAB,
    dtype=np.float32,
    seed: int = 0,
    dropout: float = 0.0,
) -> LanguageModel:
    return LanguageModel(specs, d_model, vocab, dtype=dtype, seed=seed, dropout=dropout)
