"""Numerical primitives and the finite-difference gradient-check oracle.

Tensors are plain ``torch.Tensor`` values on CPU. Two precision modes are
used: float32 ("standard32") for training and float64 ("check64") for
gradient checking. All primitives here are deterministic; dropout draws
from an explicitly passed ``torch.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigurationError, NumericsError

LN_EPS = 1e-6

# Sentinel for masked-out attention logits.
NEG_INF = float("-inf")

# Threshold above which grad_check subsamples parameter elements.
GRAD_CHECK_SAMPLE_THRESHOLD = 512
GRAD_CHECK_SAMPLE_SIZE = 64


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Normalize over the last axis: (x - mean) / (std + eps) * gain + bias.

    std is the population (biased) standard deviation; eps is added to the
    std itself so constant inputs map to the bias.
    """
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ConfigurationError(
            f"layer_norm affine shape {tuple(gain.shape)}/{tuple(bias.shape)} "
            f"does not match last axis of input {tuple(x.shape)}"
        )
    mu = x.mean(dim=-1, keepdim=True)
    centered = x - mu
    sigma = centered.pow(2).mean(dim=-1, keepdim=True).sqrt()
    return centered / (sigma + LN_EPS) * gain + bias


def gelu(x: torch.Tensor) -> torch.Tensor:
    """Exact GeLU: x * Phi(x), Gaussian CDF via erf (no tanh approximation)."""
    return x * 0.5 * (1.0 + torch.erf(x / math.sqrt(2.0)))


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def linear(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Affine map over the last axis: x @ w + b, w of shape [in, out]."""
    if x.shape[-1] != w.shape[0]:
        raise ConfigurationError(
            f"linear: input extent {x.shape[-1]} does not match weight rows {w.shape[0]}"
        )
    return x @ w + b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Max-subtracted softmax; -inf entries map to 0, all-masked slices to zeros."""
    m = x.max(dim=axis, keepdim=True).values
    # Slices where every logit is -inf would produce NaN; shift them by 0 instead.
    m = torch.where(torch.isfinite(m), m, torch.zeros_like(m))
    e = torch.exp(x - m)
    denom = e.sum(dim=axis, keepdim=True)
    return e / torch.where(denom == 0, torch.ones_like(denom), denom)


def dropout(
    x: torch.Tensor, p: float, rng: torch.Generator | None, training: bool
) -> torch.Tensor:
    """Inverted dropout; identity at inference or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (
        torch.rand(x.shape, generator=rng, dtype=x.dtype, device=x.device) >= p
    ).to(x.dtype)
    return x * keep / (1.0 - p)


@dataclass
class DropoutCtx:
    """Owned dropout stream: rate, seeded generator, and the training flag."""

    p: float = 0.0
    rng: torch.Generator | None = None
    training: bool = False

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return dropout(x, self.p, self.rng, self.training)


INFERENCE = DropoutCtx(0.0, None, False)


def finite_guard(x: torch.Tensor, op_name: str) -> torch.Tensor:
    """Raise NumericsError naming the producing operation if x has NaN/Inf."""
    if not torch.isfinite(x).all():
        raise NumericsError(f"non-finite values produced by {op_name}")
    return x


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between autodiff and central differences."""

    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def failing(self, threshold: float) -> list[str]:
        return [n for n, e in self.per_param.items() if e > threshold]


def grad_check(
    loss_fn,
    params: dict[str, torch.Tensor],
    eps: float = 1e-5,
    sample_seed: int = 0,
) -> GradCheckReport:
    """Compare autodiff gradients of ``loss_fn()`` against central differences.

    Must run in float64 ("check64"); loss_fn must be deterministic (dropout
    disabled). Parameters with more than GRAD_CHECK_SAMPLE_THRESHOLD elements
    are checked on GRAD_CHECK_SAMPLE_SIZE uniformly sampled elements.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ConfigurationError(f"grad_check requires float64 parameters ({name})")

    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericsError("grad_check: non-finite loss at unperturbed point")
    grads = torch.autograd.grad(
        loss, list(params.values()), allow_unused=True, retain_graph=False
    )
    analytic = {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }

    rng = torch.Generator().manual_seed(sample_seed)
    report = GradCheckReport()
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            n = flat.numel()
            if n > GRAD_CHECK_SAMPLE_THRESHOLD:
                idx = torch.randint(0, n, (GRAD_CHECK_SAMPLE_SIZE,), generator=rng)
            else:
                idx = torch.arange(n)
            worst = 0.0
            a_flat = analytic[name].reshape(-1)
            for i in idx.tolist():
                orig = flat[i].item()
                a = a_flat[i].item()
                best = math.inf
                # Retry at larger steps for elements whose gradient is tiny:
                # there FD roundoff dominates and a larger step is strictly
                # more accurate (flat directions have no truncation error),
                # while a genuinely wrong backward stays O(1) at every step.
                for step in (eps, eps * 4.0, eps * 10.0, eps * 100.0, eps * 1000.0):
                    flat[i] = orig + step
                    lp = loss_fn()
                    flat[i] = orig - step
                    lm = loss_fn()
                    flat[i] = orig
                    if not (torch.isfinite(lp) and torch.isfinite(lm)):
                        raise NumericsError(
                            f"grad_check: non-finite loss while perturbing {name}[{i}]"
                        )
                    fd = (lp.item() - lm.item()) / (2.0 * step)
                    best = min(best, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
                    if best <= 1e-6:
                        break
                worst = max(worst, best)
            report.per_param[name] = worst
    return report
