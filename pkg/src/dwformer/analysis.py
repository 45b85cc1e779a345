"""Layer non-linearity probing.

One trained layer is replaced by a trainable affine map; only that map is
retrained on the task, and the resulting drop in validation token accuracy
is reported per layer. A small delta means the layer's function was close
to linear; a large one means its non-linearity mattered.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from . import tasks
from .errors import ConfigurationError, DivergenceError, InputError
from .layers import LinearProbe
from .model import Model
from .tasks import TaskConfig, batch_stream
from .training import AdamState, OptimHyper, adam_step, evaluate, label_smoothed_ce

SIDES = ("encoder", "decoder")


@dataclass
class ProbeConfig:
    side: str = "decoder"
    layer_index: int = 1  # 1-based
    distill_steps: int = 2000
    distill_lr: float = 1e-4
    n_eval_batches: int = 2


@dataclass
class ProbeResult:
    side: str
    layer_index: int
    baseline_metric: float
    probed_metric: float
    delta_percent: float
    probe: LinearProbe


def _stack(model: Model, side: str):
    if side == "encoder":
        return model.enc_layers
    if side == "decoder":
        return model.dec_layers
    raise ConfigurationError(f"unknown side {side!r}")


def insert_probe(model: Model, side: str, layer_index: int) -> tuple[Model, LinearProbe]:
    """Clone the model and swap one layer for an identity-initialized probe."""
    stack = _stack(model, side)
    if not 1 <= layer_index <= len(stack):
        raise ConfigurationError(
            f"layer_index {layer_index} out of range 1..{len(stack)} for {side}")
    probed = copy.deepcopy(model)
    probe = LinearProbe(model.cfg.d_model, dtype=model.dtype_)
    _stack(probed, side)[layer_index - 1] = probe
    for p in probed.parameters():
        p.requires_grad_(False)
    for p in probe.parameters():
        p.requires_grad_(True)
    return probed, probe


def distill_layer(model: Model, pc: ProbeConfig, task_cfg: TaskConfig,
                  seed: int, label_smoothing: float = 0.1,
                  baseline_metric: float | None = None) -> ProbeResult:
    """Train the probe with everything else frozen; report the accuracy delta."""
    max_decode_len = task_cfg.max_len + 1
    val_stream = batch_stream(task_cfg, seed + tasks.VAL_SEED_OFFSET)
    val_batches = [next(val_stream) for _ in range(pc.n_eval_batches)]
    if baseline_metric is None:
        _, baseline_metric = evaluate(
            model, val_batches, label_smoothing, max_decode_len)

    probed, probe = insert_probe(model, pc.side, pc.layer_index)
    params = {"probe.w": probe.w, "probe.b": probe.b}
    state = AdamState.init(params)
    hyper = OptimHyper()
    stream = batch_stream(task_cfg, seed)
    for step in range(1, pc.distill_steps + 1):
        batch = next(stream)
        for p in params.values():
            p.grad = None
        logits = probed(batch.src, batch.tgt[:, :-1], training=False)
        loss = label_smoothed_ce(logits, batch.tgt[:, 1:], eps=label_smoothing)
        if not torch.isfinite(loss):
            raise DivergenceError(
                f"distillation diverged at step {step} "
                f"({pc.side} layer {pc.layer_index})")
        loss.backward()
        grads = {n: p.grad for n, p in params.items()}
        adam_step(params, grads, state, hyper, pc.distill_lr)

    if baseline_metric == 0.0:
        raise InputError("baseline metric is zero; percent delta undefined")
    _, probed_metric = evaluate(probed, val_batches, label_smoothing, max_decode_len)
    delta = (probed_metric - baseline_metric) / baseline_metric * 100.0
    return ProbeResult(
        side=pc.side, layer_index=pc.layer_index,
        baseline_metric=baseline_metric, probed_metric=probed_metric,
        delta_percent=delta, probe=probe)


REPORT_HEADER = "side,layer,metric,delta_percent"


def degradation_report(model: Model, task_cfg: TaskConfig, seed: int,
                       distill_steps: int = 2000, distill_lr: float = 1e-4,
                       n_eval_batches: int = 2, label_smoothing: float = 0.1,
                       only: tuple[str, int] | None = None) -> list[str]:
    """Per-layer degradation rows in CSV form, baseline row first.

    ``only=(side, layer_index)`` restricts the report to one probed layer.
    """
    max_decode_len = task_cfg.max_len + 1
    val_stream = batch_stream(task_cfg, seed + tasks.VAL_SEED_OFFSET)
    val_batches = [next(val_stream) for _ in range(n_eval_batches)]
    _, baseline = evaluate(model, val_batches, label_smoothing, max_decode_len)

    rows = [f"none,none,{baseline:.6f},0.00"]
    targets = []
    if only is not None:
        targets.append(only)
    else:
        for side in SIDES:
            for idx in range(1, len(_stack(model, side)) + 1):
                targets.append((side, idx))
    for side, idx in targets:
        pc = ProbeConfig(side=side, layer_index=idx, distill_steps=distill_steps,
                         distill_lr=distill_lr, n_eval_batches=n_eval_batches)
        res = distill_layer(model, pc, task_cfg, seed, label_smoothing,
                            baseline_metric=baseline)
        rows.append(f"{side},{idx},{res.probed_metric:.6f},{res.delta_percent:.2f}")
    return rows


def write_report(rows: list[str], path: str) -> None:
    with open(path, "w", encoding="ascii") as f:
        f.write(REPORT_HEADER + "\n")
        for row in rows:
            f.write(row + "\n")
