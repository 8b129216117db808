"""Rewrite trained Mamba layers as fused Diff-Mamba layers.

Each selected layer's inner channels are cut in half: the lower half becomes
the subtrahend path and the upper half the minuend path.  Projections,
convolution taps and S6 weights are sliced along the channel axis; lambda and
norm gains come fresh from a template build.

The subtrahend's out-projection rows are loaded as ``-W / lambda0`` (lambda0
is the fresh lambda), so that before normalization the differential output
equals the source's out-projection applied to the split halves.  Splitting
still drops the S6 terms that couple the two halves, and the fresh norms
rescale every position.  Passing ``calibration`` bytes aligns each converted
layer to its source on those bytes: the per-half S6 input projections are
refit by ridge regression onto the full-width ones, the post-Mamba norm gains
absorb the mean half magnitudes and the post-subtraction gains are fit per
channel to the source output.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import functional as F
from .checkpoint import Checkpoint
from .diff import lambda_init_schedule
from .errors import ConfigError, DataError
from .model import BlockSpec, LanguageModel
from .tensor import Tensor, no_grad

RIDGE = 1e-3


def parse_layer_range(text: str, depth: int) -> list[int]:
    """``"2:4"``, ``"1,3"``, ``"-2:"`` (last two) or ``""`` (none)."""
    text = text.strip()
    if not text:
        return []
    if ":" in text:
        lo, hi = text.split(":", 1)
        return list(range(depth))[slice(int(lo) if lo else None, int(hi) if hi else None)]
    return [int(t) for t in text.split(",") if t.strip()]


def _split_layer(params: dict, prefix: str, spec: dict) -> tuple[dict, dict]:
    def g(key):
        return params[prefix + key]

    in_proj = g("in_proj")
    dm, two_di = in_proj.shape
    di = two_di // 2
    if di % 2:
        raise ConfigError(f"layer {prefix!r} has odd internal width {di}")
    if di != 2 * dm:
        raise ConfigError(f"layer {prefix!r} must use expand=2 (internal width {di}, model width {dm})")
    dp = di // 2
    heads = g("s6.S_delta").shape[0]
    half_heads = heads // 2 if heads % 2 == 0 else heads
    out: dict[str, np.ndarray] = {}
    xs, zs = in_proj[:, :di], in_proj[:, di:]
    out["in_proj"] = np.stack([np.concatenate([xs[:, h * dp : (h + 1) * dp], zs[:, h * dp : (h + 1) * dp]], axis=1) for h in (0, 1)])
    out["conv_w"] = g("conv_w").copy()
    out["conv_b"] = g("conv_b").copy() if prefix + "conv_b" in params else np.zeros(di, np.float32)
    for h in (0, 1):
        ch = slice(h * dp, (h + 1) * dp)
        hs = slice(h * half_heads, (h + 1) * half_heads) if half_heads != heads else slice(None)
        out[f"s6.{h}.A_log"] = g("s6.A_log")[ch].copy()
        out[f"s6.{h}.S_B"] = g("s6.S_B")[:, ch].copy()
        out[f"s6.{h}.S_C"] = g("s6.S_C")[:, ch].copy()
        out[f"s6.{h}.S_delta"] = g("s6.S_delta")[hs, ch].copy()
        out[f"s6.{h}.delta_bias"] = g("s6.delta_bias")[hs].copy()
    out["out_proj"] = g("out_proj").copy()
    new_spec = BlockSpec(
        "diff-mamba",
        normalized=True,
        d_state=spec["d_state"],
        d_conv=spec["d_conv"],
        heads=half_heads,
        fused=True,
        lambda_init=spec.get("lambda_init"),
    ).to_dict()
    return out, new_spec


def _ridge(X: np.ndarray, T: np.ndarray, ridge: float) -> np.ndarray:
    """``W`` minimizing ``|X W - T|^2 + ridge * mean(diag(X'X)) * |W|^2``."""
    G = X.T @ X
    G[np.diag_indices_from(G)] += ridge * max(np.trace(G) / len(G), 1e-12)
    return np.linalg.solve(G, X.T @ T)


def _calibration_batch(calibration, seq_len: int) -> np.ndarray:
    ids = np.asarray(calibration)
    if ids.ndim == 1:
        rows = len(ids) // seq_len
        if rows == 0:
            raise DataError(f"calibration needs at least {seq_len} bytes, got {len(ids)}")
        ids = ids[: rows * seq_len].reshape(rows, seq_len)
    if ids.ndim != 2 or ids.size == 0:
        raise DataError("calibration must be a byte sequence or a 2-D batch of ids")
    return ids.astype(np.int64)


def _align(source: LanguageModel, target: LanguageModel, layers: list[int], ids: np.ndarray, ridge: float) -> None:
    """Fit the converted layers of ``target`` to ``source`` in order, each on its own inputs."""
    for i in layers:
        src, blk = source.layers[i].block, target.layers[i].block
        dp = blk.d_path
        with no_grad():
            h = target.hidden_states(ids, mode="parallel")[i]
            u = F.rmsnorm(h, target.layers[i].norm, target.norm_eps)
            xb, _ = src.branches(u)
            X = F.silu(F.depthwise_causal_conv1d(xb, src.conv_w, src.conv_b)).data
            X = X.reshape(-1, src.d_inner).astype(np.float64)
            full = src.s6
            heads = full.S_delta.shape[0]
            for half, s6 in enumerate(blk.s6):
                Xh = X[:, half * dp : (half + 1) * dp]
                hs = s6.S_delta.shape[0]
                rows = slice(half * hs, (half + 1) * hs) if hs != heads else slice(None)
                for name, W in (("S_B", full.S_B.data), ("S_C", full.S_C.data), ("S_delta", full.S_delta.data[rows])):
                    fitted = _ridge(Xh, X @ W.T.astype(np.float64), ridge).T
                    getattr(s6, name).data = fitted.astype(s6.dtype)
            gains = blk.mamba_norm
            blk.mamba_norm = None
            Y = blk.mamba_pass(u, "parallel").data.astype(np.float64)
            blk.mamba_norm = gains
            rms = np.sqrt(np.mean(Y**2, axis=-1)).mean(axis=(0, 1))
            gains.data = np.repeat(rms[:, None], dp, axis=1).astype(gains.dtype)
            keep = blk.sub_norm.data.copy()
            blk.sub_norm.data = np.ones_like(keep)
            O = blk(u, "parallel").data.reshape(-1, blk.d_model).astype(np.float64)
            T = src(u, "parallel").data.reshape(-1, blk.d_model).astype(np.float64)
            den = np.sum(O * O, axis=0)
            g = np.where(den > 0, np.sum(O * T, axis=0) / np.maximum(den, 1e-30), 1.0)
            blk.sub_norm.data = g.astype(keep.dtype)


def convert_mamba_to_diff(
    source: Checkpoint,
    layers: Iterable[int],
    calibration=None,
    seq_len: int = 128,
    ridge: float = RIDGE,
) -> Checkpoint:
    """Return a new checkpoint with ``layers`` rewritten as normalized fused Diff-Mamba.

    Converting no layers returns an identical checkpoint.  ``calibration`` is an
    optional byte sequence (cut into ``seq_len`` windows) or id batch used to
    align the converted layers; without it only the weight split is applied.
    """
    arch = source.architecture
    depth = len(arch["layers"])
    layers = sorted(set(int(i) for i in layers))
    for i in layers:
        if not 0 <= i < depth:
            raise ConfigError(f"layer index {i} out of range for depth {depth}")
        if arch["layers"][i]["kind"] != "mamba":
            raise ConfigError(f"layer {i} is {arch['layers'][i]['kind']!r}, only mamba layers can be converted")
    if not layers:
        return Checkpoint(
            architecture=arch, params=dict(source.params), optimizer=source.optimizer, step=source.step,
            rng_state=source.rng_state, meta=dict(source.meta), version=source.version,
        )

    new_arch = dict(arch)
    new_arch["layers"] = [dict(s) for s in arch["layers"]]
    pieces = {}
    for i in layers:
        prefix = f"layers.{i}.block."
        pieces[i], new_arch["layers"][i] = _split_layer(source.params, prefix, arch["layers"][i])
    # fresh lambda and norm parameters come from a template build
    template_model = LanguageModel.from_architecture(new_arch)
    template = template_model.state_dict()
    for i in layers:
        lam0 = float(template_model.layers[i].block.lam.value().data)
        if abs(lam0) > 1e-6:
            W = pieces[i]["out_proj"]
            W[: W.shape[0] // 2] *= -1.0 / lam0
    params = {}
    for name, arr in template.items():
        parts = name.split(".")
        if parts[0] == "layers" and int(parts[1]) in pieces and parts[2] == "block":
            key = ".".join(parts[3:])
            params[name] = pieces[int(parts[1])].get(key, arr).astype(np.float32)
        else:
            params[name] = source.params[name].copy()
    meta = dict(source.meta)
    meta["converted_layers"] = layers
    if calibration is not None:
        ids = _calibration_batch(calibration, seq_len)
        target = LanguageModel.from_architecture(new_arch)
        target.load_state_dict(params)
        target.eval()
        src_model = source.build_model()
        src_model.eval()
        _align(src_model, target, layers, ids, ridge)
        params = {k: v.astype(np.float32) for k, v in target.state_dict().items()}
        meta["calibration"] = {"windows": int(ids.shape[0]), "seq_len": int(ids.shape[1]), "ridge": ridge}
    meta["lambda_init"] = {}
    for i in layers:
        fixed = new_arch["layers"][i]["lambda_init"]
        meta["lambda_init"][str(i)] = lambda_init_schedule(i) if fixed is None else fixed
    return Checkpoint(
        architecture=new_arch, params=params, optimizer=None, step=source.step,
        rng_state=source.rng_state, meta=meta, version=source.version,
    )
