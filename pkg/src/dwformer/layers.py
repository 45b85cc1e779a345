"""Encoder and decoder layers in both variants.

Depth-wise LSTM layers: attention sub-layer(s) feed the cell step that
replaces the residual connection. Residual layers: the pre-norm baseline
(x + dropout(sub(LN(x)))) with a GeLU feed-forward sub-layer, so the two
variants differ only in the connection mechanism.
"""

from __future__ import annotations

import torch
from torch import nn

from . import numerics
from .attention import MultiHeadAttention, init_affine_
from .dwlstm import DepthState, GateParams, HiddenParams, dwlstm_step
from .errors import ConfigurationError

MERGE_MODES = ("add", "concat")


class LayerNorm(nn.Module):
    """Affine layer norm over the last axis (gain ones, bias zeros)."""

    def __init__(self, d: int, dtype=torch.float32):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(d, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return numerics.layer_norm(x, self.gain, self.bias)


def merge(self_out: torch.Tensor, cross_out: torch.Tensor, mode: str,
          w_m: torch.Tensor | None = None,
          b_m: torch.Tensor | None = None) -> torch.Tensor:
    """Combine self- and cross-attention outputs into one LSTM input."""
    if self_out.shape != cross_out.shape:
        raise ConfigurationError("merge inputs must share shape")
    if mode == "add":
        return self_out + cross_out
    if mode == "concat":
        if w_m is None or b_m is None:
            raise ConfigurationError("concat merge requires a projection")
        return numerics.linear(torch.cat([self_out, cross_out], dim=-1), w_m, b_m)
    raise ConfigurationError(f"unknown merge mode {mode!r}")


class LinearProbe(nn.Module):
    """Trainable affine stand-in for a whole layer: y = x @ w + b.

    The forward path is exactly one matrix multiply and one bias add; no
    normalization, activation, gating, or attention. w starts at identity
    and b at zero, i.e. at the identity map.

    For residual layers the probe replaces the entire layer function. For
    depth-wise LSTM layers it maps the previous output to this layer's
    output while the cell passes through unchanged.
    """

    def __init__(self, d_model: int, dtype=torch.float32):
        super().__init__()
        self.w = nn.Parameter(torch.eye(d_model, dtype=dtype))
        self.b = nn.Parameter(torch.zeros(d_model, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x @ self.w + self.b


class FeedForward(nn.Module):
    """2-layer position-wise FFN with GeLU, dropout between the layers."""

    def __init__(self, d_model: int, d_ff: int, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(d_model, d_ff, dtype=dtype))
        self.b1 = nn.Parameter(torch.empty(d_ff, dtype=dtype))
        self.w2 = nn.Parameter(torch.empty(d_ff, d_model, dtype=dtype))
        self.b2 = nn.Parameter(torch.empty(d_model, dtype=dtype))
        init_affine_(self.w1, self.b1, gen)
        init_affine_(self.w2, self.b2, gen)

    def forward(self, x: torch.Tensor, drop: numerics.DropoutCtx) -> torch.Tensor:
        h = numerics.gelu(numerics.linear(x, self.w1, self.b1))
        return numerics.linear(drop.apply(h), self.w2, self.b2)


class EncoderLayerDW(nn.Module):
    """Self-attention followed by one depth-wise LSTM step."""

    def __init__(self, d_model: int, d_ff: int, heads: int, hidden_variant: str,
                 gates: GateParams, hidden: HiddenParams | None,
                 gen: torch.Generator, pre_attn_norm: bool = True,
                 dtype=torch.float32):
        super().__init__()
        self.pre_attn_norm = pre_attn_norm
        if pre_attn_norm:
            self.attn_ln = LayerNorm(d_model, dtype)
        self.attn = MultiHeadAttention(d_model, heads, gen, dtype)
        self.gates = gates  # possibly shared across the stack
        self.hidden = hidden if hidden is not None else HiddenParams(
            d_model, d_ff, hidden_variant, gen, dtype)

    def forward(self, state: DepthState, pad_mask: torch.Tensor | None,
                drop: numerics.DropoutCtx) -> DepthState:
        q = self.attn_ln(state.output) if self.pre_attn_norm else state.output
        a = drop.apply(self.attn(q, q, q, pad_mask, drop))
        return dwlstm_step(a, state, self.gates, self.hidden, drop)


class DecoderLayerDW(nn.Module):
    """Self-attention, cross-attention, merge, then one depth-wise LSTM step.

    The cross-attention query input is the sum of the self-attention output
    and the layer's input, as in the standard decoder layer.
    """

    def __init__(self, d_model: int, d_ff: int, heads: int, hidden_variant: str,
                 merge_mode: str, gates: GateParams, hidden: HiddenParams | None,
                 gen: torch.Generator, pre_attn_norm: bool = True,
                 dtype=torch.float32):
        super().__init__()
        if merge_mode not in MERGE_MODES:
            raise ConfigurationError(f"unknown merge mode {merge_mode!r}")
        self.pre_attn_norm = pre_attn_norm
        if pre_attn_norm:
            self.self_ln = LayerNorm(d_model, dtype)
            self.cross_ln = LayerNorm(d_model, dtype)
        self.self_attn = MultiHeadAttention(d_model, heads, gen, dtype)
        self.cross_attn = MultiHeadAttention(d_model, heads, gen, dtype)
        self.merge_mode = merge_mode
        if merge_mode == "concat":
            # Start at the average of the two inputs, i.e. near the add variant.
            eye = torch.eye(d_model, dtype=dtype)
            self.w_m = nn.Parameter(torch.cat([eye, eye], dim=0) / 2.0)
            self.b_m = nn.Parameter(torch.zeros(d_model, dtype=dtype))
        self.gates = gates
        self.hidden = hidden if hidden is not None else HiddenParams(
            d_model, d_ff, hidden_variant, gen, dtype)

    def forward(self, state: DepthState, enc_output: torch.Tensor,
                self_mask: torch.Tensor | None, cross_mask: torch.Tensor | None,
                drop: numerics.DropoutCtx) -> DepthState:
        q = self.self_ln(state.output) if self.pre_attn_norm else state.output
        s = drop.apply(self.self_attn(q, q, q, self_mask, drop))
        cross_in = s + state.output
        cq = self.cross_ln(cross_in) if self.pre_attn_norm else cross_in
        x = drop.apply(self.cross_attn(cq, enc_output, enc_output, cross_mask, drop))
        if self.merge_mode == "concat":
            m = merge(s, x, "concat", self.w_m, self.b_m)
        else:
            m = merge(s, x, "add")
        return dwlstm_step(m, state, self.gates, self.hidden, drop)


class EncoderLayerRes(nn.Module):
    """Pre-norm residual baseline layer: x + dropout(sub(LN(x)))."""

    def __init__(self, d_model: int, d_ff: int, heads: int, gen: torch.Generator,
                 dtype=torch.float32):
        super().__init__()
        self.attn_ln = LayerNorm(d_model, dtype)
        self.attn = MultiHeadAttention(d_model, heads, gen, dtype)
        self.ffn_ln = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(d_model, d_ff, gen, dtype)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None,
                drop: numerics.DropoutCtx) -> torch.Tensor:
        q = self.attn_ln(x)
        x = x + drop.apply(self.attn(q, q, q, pad_mask, drop))
        x = x + drop.apply(self.ffn(self.ffn_ln(x), drop))
        return x


class DecoderLayerRes(nn.Module):
    """Pre-norm residual baseline decoder layer."""

    def __init__(self, d_model: int, d_ff: int, heads: int, gen: torch.Generator,
                 dtype=torch.float32):
        super().__init__()
        self.self_ln = LayerNorm(d_model, dtype)
        self.self_attn = MultiHeadAttention(d_model, heads, gen, dtype)
        self.cross_ln = LayerNorm(d_model, dtype)
        self.cross_attn = MultiHeadAttention(d_model, heads, gen, dtype)
        self.ffn_ln = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(d_model, d_ff, gen, dtype)

    def forward(self, x: torch.Tensor, enc_output: torch.Tensor,
                self_mask: torch.Tensor | None, cross_mask: torch.Tensor | None,
                drop: numerics.DropoutCtx) -> torch.Tensor:
        q = self.self_ln(x)
        x = x + drop.apply(self.self_attn(q, q, q, self_mask, drop))
        cq = self.cross_ln(x)
        x = x + drop.apply(self.cross_attn(cq, enc_output, enc_output, cross_mask, drop))
        x = x + drop.apply(self.ffn(self.ffn_ln(x), drop))
        return x
