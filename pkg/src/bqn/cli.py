"""Command-line entry points: ``bqn train | eval | compress | gradcheck``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .inference import compress, evaluate
from .io import (ConfigError, DatasetError, CheckpointError, load_checkpoint, load_csv, load_idx, packed_size_bits,
                 read_config, save_checkpoint, save_packed)
from .network import Network, build_network, mlp
from .distributions import QuantizationGrid
from .trainer import TrainConfig, train


def _emit(record: dict, stream) -> None:
    stream.write(json.dumps(record, sort_keys=True) + "\n")
    stream.flush()


def load_data(data: dict, split: str = "train"):
    """``(x, y, handle)`` for the requested split of a config's data section."""
    if data["kind"] == "idx":
        key = "train" if split == "train" else "test"
        if f"{key}_images" not in data:
            raise ConfigError(f"data.{key}_images is required for this command")
        h = load_idx(data[f"{key}_images"], data[f"{key}_labels"])
        limit = data.get(f"{key}_limit")
        x, y = h.x, h.y
        if limit is not None:
            x, y = x[:limit], y[:limit]
        return x.reshape(len(x), -1) if data.get("flatten", True) else x[:, None], y, h
    tr, te = load_csv(data["path"], data.get("target_column", -1), data.get("header"), data.get("test_size", 50),
                      data.get("split_seed", 0))
    h = tr if split == "train" else te
    return h.x, h.y, tr


def make_network(arch: dict, x, handle) -> Network:
    """Build from ``{"mlp": [...], "head": ...}`` shorthand or a full layer list."""
    head = arch["head"]
    head_kind = head if isinstance(head, str) else head["kind"]
    grid = QuantizationGrid(np.array(arch.get("grid", [-1.0, 1.0]), dtype=np.float64))
    if "mlp" in arch:
        kw = {}
        if head_kind == "gaussian":
            kw = dict(target_mean=handle.target_mean, target_std=handle.target_std)
        elif isinstance(head, dict) and head.get("init_scale") is not None:
            kw = dict(init_scale=head["init_scale"])
        return mlp(arch["mlp"], head_kind, grid, arch.get("bias_input"), **kw)
    desc = {"input_shape": arch.get("input_shape", list(x.shape[1:])), "layers": arch["layers"],
            "head": dict(head) if isinstance(head, dict) else {"kind": head}}
    if head_kind == "gaussian":
        desc["head"].update(target_mean=handle.target_mean, target_std=handle.target_std)
    return build_network(desc)


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    x, y, handle = load_data(cfg["data"], "train")
    net = make_network(cfg["architecture"], x, handle)
    tc = dict(cfg["train"])
    if tc.get("image_shape") is not None:
        tc["image_shape"] = tuple(tc["image_shape"])
    if args.seed is not None:
        tc["seed"] = args.seed
    if args.epochs is not None:
        tc["epochs"] = args.epochs
    config = TrainConfig(**tc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "w") as mf:
        streams = [mf] + ([sys.stdout] if args.verbose else [])

        def sink(rec):
            for s in streams:
                _emit(rec, s)

        def save(state):
            if args.every_epoch:
                save_checkpoint(out / f"epoch_{state.epoch:03d}.bqn", net, state)

        state = train(net, config, x, y, metrics=sink, on_epoch=save)
    save_checkpoint(out / "final.bqn", net, state)
    print(f"wrote {out / 'final.bqn'}")
    return 0


def cmd_eval(args) -> int:
    net, state = load_checkpoint(args.checkpoint)
    cfg = read_config(args.config)
    x, y, _ = load_data(cfg["data"], args.split)
    report = evaluate(net, state.params, x, y, args.mode, S=args.samples, seed=args.seed)
    rec = report.record()
    _emit(rec, sys.stdout)
    if args.out:
        with open(args.out, "a") as f:
            _emit(rec, f)
    return 0


def cmd_compress(args) -> int:
    net, state = load_checkpoint(args.checkpoint)
    members = compress(net, state.params, args.mode, args.samples, args.seed)
    packed = save_packed(args.out, net, members)
    n_weights = sum(state.params["layers"][i]["logits"][..., 0].size for i in net.weight_layers)
    bits = packed_size_bits(packed)
    logit_bits = 64 * sum(state.params["layers"][i]["logits"].size for i in net.weight_layers)
    _emit({"members": len(members), "weights": int(n_weights), "packed_bits": int(bits),
           "logit_bits": int(logit_bits), "ratio": bits / logit_bits}, sys.stdout)
    return 0


def cmd_gradcheck(args) -> int:
    res = gc.run(seed=args.seed, lam=args.lam)
    worst = max(res.values())
    _emit({"max_rel_err": worst, **{f"max_rel_err_{k}": v for k, v in res.items()}}, sys.stdout)
    return 0 if worst < args.tol else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bqn", description="Bayesian quantized networks")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--every-epoch", action="store_true", help="also write a checkpoint after every epoch")
    t.add_argument("--verbose", action="store_true", help="echo metrics to stdout")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True, help="config whose data section names the dataset")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--mode", choices=("ai", "mc", "map"), default="ai")
    e.add_argument("--samples", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="append the report to this JSON-lines file")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compress", help="write quantized weight tensors")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--mode", choices=("map", "mc"), default="map")
    c.add_argument("--samples", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compress)

    g = sub.add_parser("gradcheck", help="finite-difference check of the objective gradient")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--lam", type=float, default=1e-3)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"bqn {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
