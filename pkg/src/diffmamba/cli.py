"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data, numerical or
integrity error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import functional as F
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .compare import win_ratio_table, write_table
from .config import RunConfig, load_config
from .convert import convert_mamba_to_diff, parse_layer_range
from .data import Corpus, load_corpus, split_bytes, synthetic_text
from .diff import DiffMamba, DiffS6Block, FusedDiffMamba
from .errors import ConfigError, DataError, DiffSSMError
from .implicit import materialize_diff, materialize_diff_s6, materialize_mamba, operator_stats
from .lens import LensSet, lens_kl, needle_snr, train_lens, write_snr_csv
from .mamba import MambaBlock
from .needle import TASK_NOTE, generate_needle_dataset, needle_grid, read_jsonl, write_jsonl
from .optim import AdamW
from .tensor import Tensor, no_grad
from .train import RunReport, eval_metrics, model_from_config, table1, train_loop

USAGE_ERROR = 1
DATA_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (section.key=value); repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffmamba", description="Selective SSM and differential Mamba toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("train", help="train one model per seed")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint (ppl and bpb)")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--needle", help="needle dataset (JSONL) to score as a retrieval grid")
    p.add_argument("--report", help="write a JSON report here")

    p = sub.add_parser("convert", help="rewrite Mamba layers as Diff-Mamba")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layers", required=True, help='layer range: "2:4", "-2:", "1,3" or "" for none')
    p.add_argument("--out", required=True)
    p.add_argument("--calibrate", type=int, default=0, metavar="BYTES",
                   help="align converted layers on this many training bytes (0: weight split only)")

    p = sub.add_parser("needle-gen", help="generate a needle retrieval dataset")
    _common(p)
    p.add_argument("--out", help="output JSONL (default: needle.out)")

    p = sub.add_parser("lens-train", help="train tuned-lens probes for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="probe file (.npz)")

    p = sub.add_parser("lens-eval", help="per-layer needle probability through the lens")
    _common(p)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--lens", action="append", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="CSV output")

    p = sub.add_parser("attn-dump", help="dump one layer/channel implicit attention matrix")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--channel", type=int, required=True)
    p.add_argument("--length", type=int, default=16)
    p.add_argument("--text", help="input text (default: start of the test split)")
    p.add_argument("--target", type=int, help="target source position for off-target mass")
    p.add_argument("--out", required=True, help="output prefix; writes <out>.csv and <out>.json")

    p = sub.add_parser("compare", help="win-ratio table between two reports")
    _common(p)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--keys", help="comma-separated grid rows (default: all)")
    p.add_argument("--out", required=True, help="output prefix; writes <out>.csv and <out>.json")
    return parser


def _corpus(cfg: RunConfig) -> Corpus:
    t = cfg.train
    if t.dataset:
        return load_corpus(t.dataset, t.splits)
    data = np.frombuffer(synthetic_text(t.synthetic_bytes, seed=0), dtype=np.uint8).copy()
    return split_bytes(data, t.splits)


def _out(cfg: RunConfig, filename: str) -> str:
    os.makedirs(cfg.output.dir, exist_ok=True)
    return os.path.join(cfg.output.dir, filename)


def cmd_train(args, cfg: RunConfig) -> int:
    corpus = _corpus(cfg)
    reports = []
    base = cfg.output.name or cfg.model.pattern
    for seed in cfg.train.seeds:
        tag = base if len(cfg.train.seeds) == 1 else f"{base}-s{seed}"
        model = model_from_config(cfg.model, seed=seed, dropout=cfg.train.dropout)
        log_path = _out(cfg, f"{tag}.log.csv")
        if os.path.exists(log_path):
            os.remove(log_path)
        opt = AdamW(model, lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)
        report = train_loop(cfg.train, model, corpus, seed=seed, name=tag, log_path=log_path,
                            abort_dir=cfg.output.dir, optimizer=opt)
        report.notes.append(f"corpus sizes {corpus.sizes}")
        save_checkpoint(_out(cfg, f"{tag}.ckpt"), Checkpoint.from_model(model, opt, cfg.train.steps, {"name": tag}))
        report.write_json(_out(cfg, f"{tag}.report.json"))
        reports.append(report)
    sys.stdout.write(table1(reports))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    data = _corpus(cfg).split(args.split)
    m = eval_metrics(model, data, cfg.train.max_seq_len, cfg.train.eval_batch_size, cfg.train.eval_max_bytes)
    out = {"checkpoint": args.checkpoint, "split": args.split, **m}
    grid = {}
    if args.needle:
        grid = needle_grid(model, read_jsonl(args.needle))
        out["grid"] = grid
    print(json.dumps(out, sort_keys=True))
    if args.report:
        report = RunReport(
            name=ckpt.meta.get("name", os.path.basename(args.checkpoint)),
            architecture=ckpt.architecture, param_count=model.param_count(), param_breakdown={},
            seed=ckpt.architecture.get("seed", 0), steps=ckpt.step, backend="",
            final={args.split: m}, grid=grid, notes=[TASK_NOTE] if grid else [],
        )
        report.write_json(args.report)
    return 0


def cmd_convert(args, cfg: RunConfig) -> int:
    src = load_checkpoint(args.checkpoint)
    layers = parse_layer_range(args.layers, len(src.architecture["layers"]))
    calibration = None
    if args.calibrate > 0:
        calibration = _corpus(cfg).train[: args.calibrate]
    out = convert_mamba_to_diff(src, layers, calibration=calibration, seq_len=min(cfg.lens.seq_len, args.calibrate))
    save_checkpoint(args.out, out)
    kinds = ["mamba" if s["kind"] == "mamba" else "diff" for s in out.architecture["layers"]]
    print(json.dumps({"out": args.out, "converted": layers, "layer_kinds": kinds}))
    return 0


def cmd_needle_gen(args, cfg: RunConfig) -> int:
    n = cfg.needle
    filler = None
    if n.filler:
        try:
            with open(n.filler, "rb") as fh:
                filler = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read filler {n.filler}: {exc}") from exc
    tasks = generate_needle_dataset(n.count, n.lengths, n.seed, filler)
    path = write_jsonl(args.out or n.out, tasks)
    print(json.dumps({"out": path, "count": len(tasks), "task": TASK_NOTE}))
    return 0


def cmd_lens_train(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.checkpoint).build_model()
    data = _corpus(cfg).split(cfg.lens.split)
    lc = cfg.lens
    lens = train_lens(model, data, lc.steps, lc.lr, lc.seq_len, lc.batch_size, lc.seed)
    lens.save(args.out)
    kl = lens_kl(model, lens, data, lc.seq_len, lc.batch_size)
    print(json.dumps({"out": args.out, "kl_per_layer": kl}))
    return 0


def cmd_lens_eval(args, cfg: RunConfig) -> int:
    if len(args.checkpoint) != len(args.lens):
        raise UsageError("--checkpoint and --lens must be given the same number of times")
    tasks = read_jsonl(args.dataset)
    curves = {}
    for ck, lp in zip(args.checkpoint, args.lens):
        model = load_checkpoint(ck).build_model()
        name = os.path.splitext(os.path.basename(ck))[0]
        curves[name] = needle_snr(model, LensSet.load(lp, model), tasks)
    write_snr_csv(args.out, curves)
    with open(os.path.splitext(args.out)[0] + ".json", "w", encoding="utf-8") as fh:
        json.dump({"task": TASK_NOTE, "examples": len(tasks), "curves": curves}, fh, indent=2, sort_keys=True)
    print(json.dumps({"out": args.out, "models": list(curves)}))
    return 0


def layer_operator(model, layer: int, channel: int, ids: np.ndarray):
    """Implicit attention of one channel of one layer on the normalized layer input."""
    if not 0 <= layer < model.depth:
        raise ConfigError(f"layer {layer} out of range for depth {model.depth}")
    lyr = model.layers[layer]
    with no_grad():
        h = model.hidden_states(ids[None])[layer]
        u = F.rmsnorm(h, lyr.norm, model.norm_eps).data[0]
    block = lyr.block
    if isinstance(block, MambaBlock):
        return materialize_mamba(u, block, channel)
    if isinstance(block, FusedDiffMamba):
        block = block.to_two_pass()
    if isinstance(block, DiffMamba):
        op1 = materialize_mamba(u, block.mamba1, channel)
        op2 = materialize_mamba(u, block.mamba2, channel)
        out = materialize_diff(op1, op2, float(block.lam))
        out.source = "diff-mamba"
        return out
    if isinstance(block, DiffS6Block):
        with no_grad():
            xz = Tensor(u) @ block.in_proj
            X = F.silu(F.depthwise_causal_conv1d(xz[..., : block.d_inner], block.conv_w, block.conv_b))
        return materialize_diff_s6(X.data, block, channel)
    raise ConfigError(f"unsupported block type {type(block).__name__}")


def cmd_attn_dump(args, cfg: RunConfig) -> int:
    model = load_checkpoint(args.checkpoint).build_model()
    if args.text is not None:
        ids = np.frombuffer(args.text.encode("utf-8"), dtype=np.uint8)[: args.length].astype(np.int64)
    else:
        ids = _corpus(cfg).test[: args.length].astype(np.int64)
    op = layer_operator(model, args.layer, args.channel, ids)
    with open(args.out + ".csv", "w", encoding="utf-8") as fh:
        for row in op.matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    stats = operator_stats(op, args.target)
    record = {
        "layer": args.layer, "channel": args.channel, "source": op.source, "length": int(op.length),
        "lambda": op.lam, "target": args.target,
        "row_mass": stats["row_mass"].tolist(), "row_entropy": stats["row_entropy"].tolist(),
        "off_target_per_row": stats["off_target_per_row"].tolist(), "off_target_mass": stats["off_target_mass"],
        "note": "per-channel token-mixing operator on the normalized layer input; differential layers "
                "show the pre-normalization difference",
    }
    with open(args.out + ".json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
    print(json.dumps({"csv": args.out + ".csv", "json": args.out + ".json", "shape": list(op.matrix.shape)}))
    return 0


def _read_report(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc


def cmd_compare(args, cfg: RunConfig) -> int:
    a, b = _read_report(args.a), _read_report(args.b)
    keys = [k for k in args.keys.split(",") if k] if args.keys else None
    cells = win_ratio_table(a, b, keys)
    csv_path, json_path = write_table(args.out, cells, a.get("name", "a"), b.get("name", "b"))
    wins = sum(c["winner"] == "a" for c in cells)
    print(json.dumps({"csv": csv_path, "json": json_path, "cells": len(cells), "a_wins": wins}))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "convert": cmd_convert,
    "needle-gen": cmd_needle_gen,
    "lens-train": cmd_lens_train,
    "lens-eval": cmd_lens_eval,
    "attn-dump": cmd_attn_dump,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return USAGE_ERROR
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return USAGE_ERROR
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"diffmamba {args.command}: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DiffSSMError, OSError) as exc:
        print(f"diffmamba {args.command}: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
