"""Command-line entry point: train / eval / distill / gradcheck.

Configuration is a flat ``key = value`` file (``#`` comments); command-line
``--key value`` flags override file values. Unknown keys are rejected.

Exit codes: 0 success, 2 configuration error, 3 divergence or numerical
failure, 4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import torch

from . import checkpoint as ckpt_io
from . import numerics, tasks
from .analysis import degradation_report, write_report
from .errors import ConfigurationError, DivergenceError, InputError, NumericsError
from .model import Model, ModelConfig, beam_decode, build_model, greedy_decode
from .tasks import TaskConfig, batch_stream, seq_accuracy, token_accuracy
from .training import OptimHyper, average_checkpoints, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_GRADCHECK = 4

GRADCHECK_THRESHOLD = 1e-4

# key -> (type, default); None default means the key is required by commands
# that consume it.
SCHEMA: dict[str, tuple] = {
    # model
    "variant": (str, None),
    "n_enc_layers": (int, 6),
    "n_dec_layers": (int, 6),
    "d_model": (int, 64),
    "d_ff": (int, 128),
    "heads": (int, 4),
    "dropout": (float, 0.1),
    "hidden_variant": (str, "ffn2"),
    "sharing": (str, "gate"),
    "merge_mode": (str, "add"),
    "tie_embeddings": (bool, True),
    "final_ln": (bool, True),
    "pre_attn_norm": (bool, True),
    "forget_bias": (float, 1.0),
    "max_positions": (int, 512),
    # task
    "task": (str, "sort"),
    "vocab_size": (int, 16),
    "min_len": (int, 5),
    "max_len": (int, 20),
    "batch_size": (int, 64),
    # training
    "steps": (int, 2000),
    "warmup": (int, 4000),
    "lr_scale": (float, 1.0),
    "accum": (int, 1),
    "val_interval": (int, 500),
    "checkpoint_interval": (int, 500),
    "label_smoothing": (float, 0.1),
    "n_val_batches": (int, 2),
    "seed": (int, 42),
    "out_dir": (str, "."),
    # eval / decoding
    "beam": (int, 4),
    "length_norm": (bool, True),
    # distillation
    "side": (str, "both"),
    "layer_index": (int, 0),  # 0 = all layers
    "distill_steps": (int, 2000),
    "distill_lr": (float, 1e-4),
}


def _parse_value(key: str, raw: str):
    typ, _ = SCHEMA[key]
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigurationError(f"key {key!r}: expected boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigurationError(
            f"key {key!r}: expected {typ.__name__}, got {raw!r}") from None


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = {k: d for k, (_, d) in SCHEMA.items() if d is not None}
    if path:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigurationError(
                        f"{path}:{lineno}: expected 'key = value'")
                key, raw = (s.strip() for s in line.split("=", 1))
                if key not in SCHEMA:
                    raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
                cfg[key] = _parse_value(key, raw)
    if len(overrides) % 2 != 0:
        raise ConfigurationError("overrides must come in --key value pairs")
    for flag, raw in zip(overrides[::2], overrides[1::2]):
        if not flag.startswith("--"):
            raise ConfigurationError(f"expected --key, got {flag!r}")
        key = flag[2:]
        if key not in SCHEMA:
            raise ConfigurationError(f"unknown key {key!r}")
        cfg[key] = _parse_value(key, raw)
    return cfg


def require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigurationError(f"missing required key {key!r}")
    return cfg[key]


def model_config(cfg: dict, vocab: int) -> ModelConfig:
    return ModelConfig(
        variant=require(cfg, "variant"),
        n_enc_layers=cfg["n_enc_layers"],
        n_dec_layers=cfg["n_dec_layers"],
        d_model=cfg["d_model"],
        d_ff=cfg["d_ff"],
        heads=cfg["heads"],
        vocab_size=vocab,
        dropout=cfg["dropout"],
        hidden_variant=cfg["hidden_variant"],
        sharing=cfg["sharing"],
        merge_mode=cfg["merge_mode"],
        tie_embeddings=cfg["tie_embeddings"],
        final_ln=cfg["final_ln"],
        pre_attn_norm=cfg["pre_attn_norm"],
        forget_bias=cfg["forget_bias"],
        max_positions=cfg["max_positions"],
    ).validate()


def task_config(cfg: dict) -> TaskConfig:
    return TaskConfig(
        kind=cfg["task"], vocab_size=cfg["vocab_size"], min_len=cfg["min_len"],
        max_len=cfg["max_len"], batch_size=cfg["batch_size"], seed=cfg["seed"],
    ).validate()


def write_resolved(cfg: dict, out_dir: str) -> None:
    with open(os.path.join(out_dir, "resolved.cfg"), "w", encoding="ascii") as f:
        for key in sorted(cfg):
            f.write(f"{key} = {cfg[key]}\n")


def cmd_train(cfg: dict) -> int:
    tc = task_config(cfg)
    mc = model_config(cfg, tc.model_vocab)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    write_resolved(cfg, out_dir)
    model = build_model(mc, seed=cfg["seed"])
    print(f"model: {mc.variant}, {model.param_count()} parameters")
    hyper = OptimHyper(warmup=cfg["warmup"], lr_scale=cfg["lr_scale"],
                       accum_batches=cfg["accum"])
    result = train(
        model, tc, hyper, steps=cfg["steps"], seed=cfg["seed"], out_dir=out_dir,
        val_interval=cfg["val_interval"], ckpt_interval=cfg["checkpoint_interval"],
        label_smoothing=cfg["label_smoothing"], n_val_batches=cfg["n_val_batches"])
    print(f"final val_token_acc: {result.final_val_acc:.6f}")
    return EXIT_OK


def cmd_eval(cfg: dict, checkpoints: list[str]) -> int:
    if not checkpoints:
        raise ConfigurationError("eval requires at least one --checkpoint path")
    if len(checkpoints) == 1:
        ckpt = ckpt_io.load_checkpoint(checkpoints[0])
    else:
        ckpt = average_checkpoints(checkpoints)
    model = ckpt_io.restore_model(ckpt)
    tc = task_config(cfg)
    if tc.model_vocab != model.cfg.vocab_size:
        raise InputError(
            f"task vocab {tc.model_vocab} does not match checkpoint vocab "
            f"{model.cfg.vocab_size}")
    max_decode_len = tc.max_len + 1
    val_stream = batch_stream(tc, cfg["seed"] + tasks.VAL_SEED_OFFSET)
    val_batches = [next(val_stream) for _ in range(cfg["n_val_batches"])]
    beam = cfg["beam"]
    tok_hits = 0.0
    seq_hits = 0.0
    tok_weight = 0
    n_seq = 0
    for b in val_batches:
        if beam == 1:
            pred = greedy_decode(model, b.src, max_decode_len)
        else:
            pred = beam_decode(model, b.src, beam=beam, max_len=max_decode_len,
                               length_norm=cfg["length_norm"])
        gold = b.tgt[:, 1:]
        w = int((gold != tasks.PAD_ID).sum())
        tok_hits += token_accuracy(pred, gold) * w
        tok_weight += w
        seq_hits += seq_accuracy(pred, gold) * gold.shape[0]
        n_seq += gold.shape[0]
    token_acc = tok_hits / tok_weight
    seq_acc = seq_hits / n_seq
    print(f"token_acc: {token_acc:.8f}")
    print(f"seq_acc: {seq_acc:.8f}")
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", encoding="ascii") as f:
        f.write("metric,value\n")
        f.write(f"token_acc,{token_acc:.8f}\n")
        f.write(f"seq_acc,{seq_acc:.8f}\n")
    return EXIT_OK


def cmd_distill(cfg: dict, checkpoints: list[str]) -> int:
    if len(checkpoints) != 1:
        raise ConfigurationError("distill requires exactly one --checkpoint path")
    tc = task_config(cfg)
    only = None
    if cfg["layer_index"] > 0:
        side = cfg["side"]
        if side not in ("encoder", "decoder"):
            raise ConfigurationError(
                "single-layer distill needs side = encoder or decoder")
        only = (side, cfg["layer_index"])
    ckpt = ckpt_io.load_checkpoint(checkpoints[0])
    model = ckpt_io.restore_model(ckpt)
    rows = degradation_report(
        model, tc, seed=cfg["seed"], distill_steps=cfg["distill_steps"],
        distill_lr=cfg["distill_lr"], n_eval_batches=cfg["n_val_batches"],
        label_smoothing=cfg["label_smoothing"], only=only)
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "report.csv")
    write_report(rows, path)
    for row in rows:
        print(row)
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    from .training import label_smoothed_ce

    tc = task_config(cfg)
    mc = model_config(cfg, tc.model_vocab)
    mc.dropout = 0.0  # grad check requires a deterministic loss
    model = build_model(mc, seed=cfg["seed"], dtype=torch.float64)
    batch = next(batch_stream(tc, cfg["seed"]))

    def loss_fn():
        logits = model(batch.src, batch.tgt[:, :-1], training=False)
        return label_smoothed_ce(logits, batch.tgt[:, 1:],
                                 eps=cfg["label_smoothing"])

    params = ckpt_io.model_params(model)
    report = numerics.grad_check(loss_fn, params)
    for name in sorted(report.per_param):
        print(f"{name}: {report.per_param[name]:.3e}")
    failing = report.failing(GRADCHECK_THRESHOLD)
    print(f"max relative error: {report.max_rel_error:.3e}")
    if failing:
        print(f"FAILED parameters (> {GRADCHECK_THRESHOLD}): {', '.join(failing)}")
        return EXIT_GRADCHECK
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dwformer",
        description="Depth-wise LSTM Transformer experiments")
    parser.add_argument("command",
                        choices=["train", "eval", "distill", "gradcheck"])
    parser.add_argument("--config", default=None, help="flat key=value file")
    parser.add_argument("--checkpoint", action="append", default=[],
                        help="checkpoint path (repeatable; eval averages them)")
    args, overrides = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "distill":
            return cmd_distill(cfg, args.checkpoint)
        return cmd_gradcheck(cfg)
    except (ConfigurationError, InputError, OSError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NumericsError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
