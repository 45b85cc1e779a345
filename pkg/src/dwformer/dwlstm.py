"""Depth-wise LSTM cell: the recurrence that replaces residual connections.

The cell steps over layer depth, never over the token axis. Each layer i
consumes the previous layer's (output, cell) pair together with the layer's
own sub-layer result, and produces the next pair:

    c      = [lstm_input | prev_output]
    gate   = sigmoid(LN(W c + b))           (input / forget / output)
    h      = act(LN(W_h c + b_h))           (single variant)
           = W_h2 act(LN(W_h1 c + b_h1)) + b_h2   (ffn2 variant)
    cell'  = prev_cell * f + h * i
    out'   = cell' * o
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import numerics
from .attention import init_affine_
from .errors import ConfigurationError

HIDDEN_VARIANTS = ("single", "ffn2")
SHARING_MODES = ("all", "gate", "none")


@dataclass
class DepthState:
    """The (output, cell) pair threaded through a layer stack."""

    output: torch.Tensor
    cell: torch.Tensor


def init_state(stack_input: torch.Tensor) -> DepthState:
    """Depth step 0: output carries the embedded sequence, cell starts at zero."""
    return DepthState(output=stack_input, cell=torch.zeros_like(stack_input))


def concat_input(lstm_input: torch.Tensor, prev_output: torch.Tensor) -> torch.Tensor:
    """Last-axis concatenation, lstm_input first then prev_output."""
    if lstm_input.shape != prev_output.shape:
        raise ConfigurationError(
            f"concat_input shape mismatch: {tuple(lstm_input.shape)} vs "
            f"{tuple(prev_output.shape)}"
        )
    return torch.cat([lstm_input, prev_output], dim=-1)


class GateParams(nn.Module):
    """Projections and LN affines for the input/forget/output gates.

    Each gate maps the concatenated [.., 2d] input to d. A constant pre-LN
    bias would be cancelled by the normalization, so the forget-gate opening
    bias is realized on the forget gate's LN bias instead.
    """

    def __init__(self, d_model: int, gen: torch.Generator, forget_bias: float = 1.0,
                 dtype=torch.float32):
        super().__init__()
        self.d_model = d_model
        for g in ("ig", "fg", "og"):
            w = nn.Parameter(torch.empty(2 * d_model, d_model, dtype=dtype))
            b = nn.Parameter(torch.empty(d_model, dtype=dtype))
            init_affine_(w, b, gen)
            setattr(self, f"w_{g}", w)
            setattr(self, f"b_{g}", b)
            setattr(self, f"ln_g_{g}", nn.Parameter(torch.ones(d_model, dtype=dtype)))
            setattr(self, f"ln_b_{g}", nn.Parameter(torch.zeros(d_model, dtype=dtype)))
        with torch.no_grad():
            self.ln_b_fg.fill_(forget_bias)


def compute_gates(c: torch.Tensor, gp: GateParams):
    """sigmoid(LN(affine(c))) for each of the three gates."""
    if c.shape[-1] != 2 * gp.d_model:
        raise ConfigurationError(
            f"gate input width {c.shape[-1]} != 2*d_model ({2 * gp.d_model})"
        )
    gates = []
    for g in ("ig", "fg", "og"):
        z = numerics.linear(c, getattr(gp, f"w_{g}"), getattr(gp, f"b_{g}"))
        z = numerics.layer_norm(z, getattr(gp, f"ln_g_{g}"), getattr(gp, f"ln_b_{g}"))
        gates.append(numerics.sigmoid(z))
    return tuple(gates)


class HiddenParams(nn.Module):
    """Hidden-state computation, either a single gated-style affine+GeLU or
    the 2-layer feed-forward form that absorbs the Transformer FFN sub-layer."""

    def __init__(self, d_model: int, d_ff: int, variant: str, gen: torch.Generator,
                 dtype=torch.float32):
        super().__init__()
        if variant not in HIDDEN_VARIANTS:
            raise ConfigurationError(f"unknown hidden variant {variant!r}")
        self.variant = variant
        self.d_model = d_model
        if variant == "single":
            self.w_h = nn.Parameter(torch.empty(2 * d_model, d_model, dtype=dtype))
            self.b_h = nn.Parameter(torch.empty(d_model, dtype=dtype))
            init_affine_(self.w_h, self.b_h, gen)
            self.ln_g = nn.Parameter(torch.ones(d_model, dtype=dtype))
            self.ln_b = nn.Parameter(torch.zeros(d_model, dtype=dtype))
        else:
            self.w_h1 = nn.Parameter(torch.empty(2 * d_model, d_ff, dtype=dtype))
            self.b_h1 = nn.Parameter(torch.empty(d_ff, dtype=dtype))
            init_affine_(self.w_h1, self.b_h1, gen)
            self.ln_g = nn.Parameter(torch.ones(d_ff, dtype=dtype))
            self.ln_b = nn.Parameter(torch.zeros(d_ff, dtype=dtype))
            self.w_h2 = nn.Parameter(torch.empty(d_ff, d_model, dtype=dtype))
            self.b_h2 = nn.Parameter(torch.empty(d_model, dtype=dtype))
            init_affine_(self.w_h2, self.b_h2, gen)


def compute_hidden(c: torch.Tensor, hp: HiddenParams,
                   drop: numerics.DropoutCtx) -> torch.Tensor:
    if c.shape[-1] != 2 * hp.d_model:
        raise ConfigurationError(
            f"hidden input width {c.shape[-1]} != 2*d_model ({2 * hp.d_model})"
        )
    if hp.variant == "single":
        z = numerics.linear(c, hp.w_h, hp.b_h)
        return numerics.gelu(numerics.layer_norm(z, hp.ln_g, hp.ln_b))
    z = numerics.linear(c, hp.w_h1, hp.b_h1)
    z = numerics.gelu(numerics.layer_norm(z, hp.ln_g, hp.ln_b))
    return numerics.linear(drop.apply(z), hp.w_h2, hp.b_h2)


def cell_update(prev_cell: torch.Tensor, h: torch.Tensor,
                i_gate: torch.Tensor, f_gate: torch.Tensor,
                o_gate: torch.Tensor) -> DepthState:
    """cell' = prev_cell * f + h * i;  output' = cell' * o."""
    cell = prev_cell * f_gate + h * i_gate
    return DepthState(output=cell * o_gate, cell=cell)


def dwlstm_step(lstm_input: torch.Tensor, prev: DepthState, gp: GateParams,
                hp: HiddenParams,
                drop: numerics.DropoutCtx = numerics.INFERENCE) -> DepthState:
    """One depth step of the LSTM given this layer's sub-layer result."""
    c = concat_input(lstm_input, prev.output)
    i_gate, f_gate, o_gate = compute_gates(c, gp)
    h = compute_hidden(c, hp, drop)
    return cell_update(prev.cell, h, i_gate, f_gate, o_gate)
