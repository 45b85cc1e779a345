"""Multi-head scaled dot-product attention with additive masking.

This sub-layer is kept identical between the residual baseline and the
depth-wise LSTM variant; only what surrounds it changes.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from . import numerics
from .errors import ConfigurationError
from .numerics import NEG_INF


def init_affine_(w: torch.Tensor, b: torch.Tensor, gen: torch.Generator) -> None:
    """Uniform fan-based (Xavier) init for a [in, out] weight, zero bias."""
    fan_in, fan_out = w.shape[0], w.shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        w.uniform_(-bound, bound, generator=gen)
        b.zero_()


def causal_mask(n: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Additive [n, n] mask: entry (i, j) = 0 if j <= i else -inf."""
    if n < 1:
        raise ConfigurationError(f"causal_mask length must be >= 1, got {n}")
    m = torch.full((n, n), NEG_INF, dtype=dtype)
    return torch.triu(m, diagonal=1)


def padding_mask(tokens: torch.Tensor, pad_id: int, dtype: torch.dtype) -> torch.Tensor:
    """Additive [B, 1, 1, Lk] mask zeroing out padded key positions."""
    return torch.where(
        tokens == pad_id,
        torch.full((), NEG_INF, dtype=dtype),
        torch.zeros((), dtype=dtype),
    )[:, None, None, :]


class MultiHeadAttention(nn.Module):
    """softmax(QK^T / sqrt(d/h) + mask) V per head, concatenated and projected.

    All four projections carry biases. Dropout is applied to the attention
    weights with the global rate.
    """

    def __init__(self, d_model: int, heads: int, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        if d_model % heads != 0:
            raise ConfigurationError(
                f"d_model={d_model} not divisible by heads={heads}"
            )
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = nn.Parameter(torch.empty(d_model, d_model, dtype=dtype))
            b = nn.Parameter(torch.empty(d_model, dtype=dtype))
            init_affine_(w, b, gen)
            setattr(self, name, w)
            setattr(self, name.replace("w_", "b_"), b)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.d_head).transpose(1, 2)

    def forward(
        self,
        q_in: torch.Tensor,
        k_in: torch.Tensor,
        v_in: torch.Tensor,
        mask: torch.Tensor | None,
        drop: numerics.DropoutCtx,
    ) -> torch.Tensor:
        q = self._split(numerics.linear(q_in, self.w_q, self.b_q))
        k = self._split(numerics.linear(k_in, self.w_k, self.b_k))
        v = self._split(numerics.linear(v_in, self.w_v, self.b_v))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            logits = logits + mask
        weights = drop.apply(numerics.softmax(logits, axis=-1))
        ctx = weights @ v
        b, _, lq, _ = ctx.shape
        ctx = ctx.transpose(1, 2).reshape(b, lq, self.d_model)
        return numerics.linear(ctx, self.w_o, self.b_o)
