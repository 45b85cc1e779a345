"""Training loop: Adam, inverse-sqrt warmup, label smoothing, accumulation,
checkpointing, and checkpoint averaging."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import torch

from . import checkpoint as ckpt_io
from . import tasks
from .checkpoint import Checkpoint
from .errors import ConfigurationError, DivergenceError, InputError, NumericsError
from .model import Model, greedy_decode
from .tasks import Batch, TaskConfig, batch_stream, token_accuracy

# Dropout stream seed offset, distinct from data and validation streams.
DROPOUT_SEED_OFFSET = 101


@dataclass
class OptimHyper:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup: int = 4000  # paper scale: 8000
    lr_scale: float = 1.0
    accum_batches: int = 1

    def validate(self) -> "OptimHyper":
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigurationError("betas must be in (0, 1)")
        if self.warmup < 1 or self.accum_batches < 1:
            raise ConfigurationError("warmup and accum_batches must be >= 1")
        return self


@dataclass
class AdamState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def init(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(
            m={n: torch.zeros_like(p) for n, p in params.items()},
            v={n: torch.zeros_like(p) for n, p in params.items()},
        )


def lr_schedule(step: int, d_model: int, warmup: int) -> float:
    """d_model^-0.5 * min(step^-0.5, step * warmup^-1.5).

    Written as step^-0.5 scaled by min(1, (step/warmup)^1.5), which is the
    same function but makes the two branches agree bit-exactly at
    step == warmup (the min() form can differ there by one ulp).
    """
    if step < 1:
        raise ConfigurationError("schedule step must be >= 1")
    return d_model ** -0.5 * step ** -0.5 * min(1.0, (step / warmup) ** 1.5)


def label_smoothed_ce(logits: torch.Tensor, targets: torch.Tensor,
                      eps: float = 0.1, pad_id: int = tasks.PAD_ID,
                      reduction: str = "mean"):
    """Cross-entropy against the smoothed distribution: 1-eps on gold,
    eps/(V-2) on every other non-pad class, 0 on the pad class. Pad target
    positions are excluded. reduction="sum" returns (loss_sum, n_tokens).
    """
    if not 0.0 <= eps < 1.0:
        raise ConfigurationError("label smoothing eps must be in [0, 1)")
    v = logits.shape[-1]
    if eps > 0.0 and v <= 2:
        raise ConfigurationError("label smoothing needs vocab > 2")
    mask = targets != pad_id
    n_tok = int(mask.sum())
    if n_tok == 0:
        raise InputError("label_smoothed_ce: all target positions are padded")
    logp = torch.log_softmax(logits, dim=-1)
    gold_lp = logp.gather(-1, targets.clamp_min(0).unsqueeze(-1)).squeeze(-1)
    if eps > 0.0:
        other_lp = logp.sum(dim=-1) - logp[..., pad_id] - gold_lp
        per_pos = -((1.0 - eps) * gold_lp + eps / (v - 2) * other_lp)
    else:
        per_pos = -gold_lp
    loss_sum = per_pos[mask].sum()
    if reduction == "sum":
        return loss_sum, n_tok
    return loss_sum / n_tok


def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
              state: AdamState, h: OptimHyper, lr: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if not torch.isfinite(g).all():
                raise NumericsError(f"non-finite gradient for parameter {name}")
            m = state.m[name]
            v = state.v[name]
            m.mul_(h.beta1).add_(g, alpha=1.0 - h.beta1)
            v.mul_(h.beta2).addcmul_(g, g, value=1.0 - h.beta2)
            m_hat = m / (1.0 - h.beta1 ** t)
            v_hat = v / (1.0 - h.beta2 ** t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + h.eps))


def _split_batch(batch: Batch, k: int) -> list[Batch]:
    """Split along the batch axis into k near-equal slices, widths preserved."""
    srcs = torch.tensor_split(batch.src, k, dim=0)
    tgts = torch.tensor_split(batch.tgt, k, dim=0)
    return [Batch(src=s, tgt=t) for s, t in zip(srcs, tgts) if s.shape[0] > 0]


METRICS_HEADER = "step,lr,train_loss,val_loss,val_token_acc"


def format_metrics_row(step: int, lr: float, train_loss: float,
                       val_loss: float, val_acc: float) -> str:
    return f"{step},{lr:.12f},{train_loss:.8f},{val_loss:.8f},{val_acc:.8f}"


@dataclass
class TrainResult:
    metrics_rows: list[str]
    step_losses: list[float]
    checkpoint_paths: list[str]
    final_val_acc: float = 0.0
    steps_to_target: int | None = None


def evaluate(model: Model, val_batches: list[Batch], label_eps: float,
             max_decode_len: int) -> tuple[float, float]:
    """Teacher-forced validation loss and greedy-decode token accuracy."""
    loss_sum = 0.0
    n_tok = 0
    hits = 0.0
    weight = 0
    with torch.no_grad():
        for b in val_batches:
            logits = model(b.src, b.tgt[:, :-1], training=False)
            s, n = label_smoothed_ce(logits, b.tgt[:, 1:], eps=label_eps,
                                     reduction="sum")
            loss_sum += float(s)
            n_tok += n
            pred = greedy_decode(model, b.src, max_decode_len)
            gold = b.tgt[:, 1:]
            mask = gold != tasks.PAD_ID
            hits += token_accuracy(pred, gold) * int(mask.sum())
            weight += int(mask.sum())
    return loss_sum / n_tok, hits / weight


def train(model: Model, task_cfg: TaskConfig, hyper: OptimHyper, steps: int,
          seed: int, out_dir: str | None = None, val_interval: int = 500,
          ckpt_interval: int = 500, label_smoothing: float = 0.1,
          n_val_batches: int = 2, target_acc: float | None = None,
          stop_at_target: bool = False) -> TrainResult:
    """Deterministic training loop; raises DivergenceError on NaN/Inf loss."""
    hyper.validate()
    task_cfg.validate()
    params = {n: p for n, p in ckpt_io.model_params(model).items()
              if p.requires_grad}
    state = AdamState.init(params)
    stream = batch_stream(task_cfg, seed)
    val_stream = batch_stream(task_cfg, seed + tasks.VAL_SEED_OFFSET)
    val_batches = [next(val_stream) for _ in range(n_val_batches)]
    drop_rng = torch.Generator().manual_seed(seed + DROPOUT_SEED_OFFSET)
    max_decode_len = task_cfg.max_len + 1  # payload + eos

    result = TrainResult(metrics_rows=[], step_losses=[], checkpoint_paths=[])
    model.finite_checks = True
    try:
        for step in range(1, steps + 1):
            batch = next(stream)
            for p in params.values():
                p.grad = None
            total_loss = 0.0
            total_tok = 0
            for sl in _split_batch(batch, hyper.accum_batches):
                logits = model(sl.src, sl.tgt[:, :-1], training=True, rng=drop_rng)
                loss_sum, n_tok = label_smoothed_ce(
                    logits, sl.tgt[:, 1:], eps=label_smoothing, reduction="sum")
                loss_sum.backward()
                total_loss += float(loss_sum.detach())
                total_tok += n_tok
            if not math.isfinite(total_loss):
                raise DivergenceError(f"non-finite training loss at step {step}")
            lr = lr_schedule(step, model.cfg.d_model, hyper.warmup) * hyper.lr_scale
            grads = {n: p.grad / total_tok for n, p in params.items()}
            adam_step(params, grads, state, hyper, lr)
            train_loss = total_loss / total_tok
            result.step_losses.append(train_loss)

            last = step == steps
            if step % val_interval == 0 or last:
                val_loss, val_acc = evaluate(
                    model, val_batches, label_smoothing, max_decode_len)
                result.metrics_rows.append(
                    format_metrics_row(step, lr, train_loss, val_loss, val_acc))
                result.final_val_acc = val_acc
                if (target_acc is not None and result.steps_to_target is None
                        and val_acc >= target_acc):
                    result.steps_to_target = step
                    if stop_at_target:
                        last = True
            if out_dir and (step % ckpt_interval == 0 or last):
                path = os.path.join(out_dir, f"checkpoint_{step}.bin")
                ckpt_io.save_checkpoint(path, model, step=step,
                                        metrics={"train_loss": train_loss})
                result.checkpoint_paths.append(path)
            if last and step != steps:
                break
    finally:
        model.finite_checks = False

    if out_dir:
        with open(os.path.join(out_dir, "metrics.csv"), "w",
                  encoding="ascii") as f:
            f.write(METRICS_HEADER + "\n")
            for row in result.metrics_rows:
                f.write(row + "\n")
    return result


def average_checkpoints(paths: list[str]) -> Checkpoint:
    """Elementwise mean of parameters across checkpoints with one schema."""
    if not paths:
        raise InputError("average_checkpoints: no paths given")
    ckpts = [ckpt_io.load_checkpoint(p) for p in paths]
    first = ckpts[0]
    for c in ckpts[1:]:
        if c.config.to_dict() != first.config.to_dict():
            raise InputError("average_checkpoints: configs differ")
        if set(c.params) != set(first.params):
            raise InputError("average_checkpoints: parameter schemas differ")
        for n in first.params:
            if c.params[n].shape != first.params[n].shape:
                raise InputError(f"average_checkpoints: shape mismatch for {n}")
    avg = {}
    for n in first.params:
        acc = torch.stack([c.params[n].double() for c in ckpts]).mean(dim=0)
        avg[n] = acc.to(torch.float32)
    return Checkpoint(config=first.config, params=avg,
                      step=max(c.step for c in ckpts), metrics={})
