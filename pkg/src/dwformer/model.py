"""Full encoder-decoder assembly, parameter counting, and decoding."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import numerics
from .attention import causal_mask, padding_mask
from .dwlstm import DepthState, GateParams, HiddenParams, init_state
from .errors import ConfigurationError, InputError
from .layers import (
    DecoderLayerDW,
    DecoderLayerRes,
    EncoderLayerDW,
    EncoderLayerRes,
    LayerNorm,
    LinearProbe,
)

log = logging.getLogger(__name__)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2

VARIANTS = ("residual", "dwlstm")


@dataclass
class ModelConfig:
    variant: str = "dwlstm"
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    d_model: int = 64
    d_ff: int = 128
    heads: int = 4
    vocab_size: int = 19
    dropout: float = 0.1
    hidden_variant: str = "ffn2"
    sharing: str = "gate"
    merge_mode: str = "add"
    tie_embeddings: bool = True
    final_ln: bool = True
    pre_attn_norm: bool = True
    forget_bias: float = 1.0
    max_positions: int = 512

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.hidden_variant not in ("single", "ffn2"):
            raise ConfigurationError(f"unknown hidden_variant {self.hidden_variant!r}")
        if self.sharing not in ("all", "gate", "none"):
            raise ConfigurationError(f"unknown sharing mode {self.sharing!r}")
        if self.merge_mode not in ("add", "concat"):
            raise ConfigurationError(f"unknown merge_mode {self.merge_mode!r}")
        for k in ("n_enc_layers", "n_dec_layers", "d_model", "d_ff", "heads",
                  "vocab_size", "max_positions"):
            if getattr(self, k) < 1:
                raise ConfigurationError(f"{k} must be positive")
        if self.d_model % self.heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by heads={self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d).validate()


def sinusoidal_positions(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    dim = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, dim / d)
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : (d // 2 + d % 2)])
    return pe.to(dtype)


class Model(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d, v = cfg.d_model, cfg.vocab_size
        bound = 1.0 / math.sqrt(d)
        self.src_emb = nn.Parameter(
            torch.empty(v, d, dtype=dtype).uniform_(-bound, bound, generator=gen))
        self.tgt_emb = nn.Parameter(
            torch.empty(v, d, dtype=dtype).uniform_(-bound, bound, generator=gen))
        if cfg.tie_embeddings:
            self.classifier = self.tgt_emb  # aliased parameter
        else:
            self.classifier = nn.Parameter(
                torch.empty(v, d, dtype=dtype).uniform_(-bound, bound, generator=gen))
        self.register_buffer(
            "positions", sinusoidal_positions(cfg.max_positions, d, dtype))

        enc_gates = dec_gates = None
        enc_hidden = dec_hidden = None
        if cfg.variant == "dwlstm" and cfg.sharing in ("gate", "all"):
            enc_gates = GateParams(d, gen, cfg.forget_bias, dtype)
            dec_gates = GateParams(d, gen, cfg.forget_bias, dtype)
        if cfg.variant == "dwlstm" and cfg.sharing == "all":
            enc_hidden = HiddenParams(d, cfg.d_ff, cfg.hidden_variant, gen, dtype)
            dec_hidden = HiddenParams(d, cfg.d_ff, cfg.hidden_variant, gen, dtype)

        if cfg.variant == "dwlstm":
            self.enc_layers = nn.ModuleList([
                EncoderLayerDW(
                    d, cfg.d_ff, cfg.heads, cfg.hidden_variant,
                    enc_gates if enc_gates is not None
                    else GateParams(d, gen, cfg.forget_bias, dtype),
                    enc_hidden, gen, cfg.pre_attn_norm, dtype)
                for _ in range(cfg.n_enc_layers)
            ])
            self.dec_layers = nn.ModuleList([
                DecoderLayerDW(
                    d, cfg.d_ff, cfg.heads, cfg.hidden_variant, cfg.merge_mode,
                    dec_gates if dec_gates is not None
                    else GateParams(d, gen, cfg.forget_bias, dtype),
                    dec_hidden, gen, cfg.pre_attn_norm, dtype)
                for _ in range(cfg.n_dec_layers)
            ])
        else:
            self.enc_layers = nn.ModuleList([
                EncoderLayerRes(d, cfg.d_ff, cfg.heads, gen, dtype)
                for _ in range(cfg.n_enc_layers)
            ])
            self.dec_layers = nn.ModuleList([
                DecoderLayerRes(d, cfg.d_ff, cfg.heads, gen, dtype)
                for _ in range(cfg.n_dec_layers)
            ])

        if cfg.final_ln:
            self.enc_final_ln = LayerNorm(d, dtype)
            self.dec_final_ln = LayerNorm(d, dtype)
        self.dtype_ = dtype
        self.finite_checks = False  # enabled during training

    # -- embedding -----------------------------------------------------------

    def _embed(self, tokens: torch.Tensor, table: torch.Tensor,
               drop: numerics.DropoutCtx) -> torch.Tensor:
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise InputError(
                f"token id out of range [0, {self.cfg.vocab_size})"
            )
        if tokens.shape[1] > self.cfg.max_positions:
            raise InputError(
                f"sequence length {tokens.shape[1]} exceeds "
                f"max_positions={self.cfg.max_positions}"
            )
        x = table[tokens] * math.sqrt(self.cfg.d_model)
        x = x + self.positions[: tokens.shape[1]]
        return drop.apply(x)

    def _guard(self, x: torch.Tensor, name: str) -> torch.Tensor:
        if self.finite_checks:
            numerics.finite_guard(x, name)
        return x

    # -- stacks --------------------------------------------------------------

    def encode(self, src_tokens: torch.Tensor, drop: numerics.DropoutCtx) -> torch.Tensor:
        pad_mask = padding_mask(src_tokens, PAD_ID, self.dtype_)
        x = self._embed(src_tokens, self.src_emb, drop)
        if self.cfg.variant == "dwlstm":
            state = init_state(x)
            for i, layer in enumerate(self.enc_layers):
                if isinstance(layer, LinearProbe):
                    state = DepthState(layer(state.output), state.cell)
                else:
                    state = layer(state, pad_mask, drop)
                self._guard(state.output, f"encoder_layer[{i}]")
            out = state.output
        else:
            for i, layer in enumerate(self.enc_layers):
                x = layer(x, pad_mask, drop) if not isinstance(layer, LinearProbe) \
                    else layer(x)
                self._guard(x, f"encoder_layer[{i}]")
            out = x
        if self.cfg.final_ln:
            out = self.enc_final_ln(out)
        return out

    def decode(self, tgt_tokens: torch.Tensor, enc_output: torch.Tensor,
               src_tokens: torch.Tensor, drop: numerics.DropoutCtx) -> torch.Tensor:
        lt = tgt_tokens.shape[1]
        self_mask = causal_mask(lt, self.dtype_)
        cross_mask = padding_mask(src_tokens, PAD_ID, self.dtype_)
        x = self._embed(tgt_tokens, self.tgt_emb, drop)
        if self.cfg.variant == "dwlstm":
            state = init_state(x)
            for i, layer in enumerate(self.dec_layers):
                if isinstance(layer, LinearProbe):
                    state = DepthState(layer(state.output), state.cell)
                else:
                    state = layer(state, enc_output, self_mask, cross_mask, drop)
                self._guard(state.output, f"decoder_layer[{i}]")
            out = state.output
        else:
            for i, layer in enumerate(self.dec_layers):
                x = layer(x, enc_output, self_mask, cross_mask, drop) \
                    if not isinstance(layer, LinearProbe) else layer(x)
                self._guard(x, f"decoder_layer[{i}]")
            out = x
        if self.cfg.final_ln:
            out = self.dec_final_ln(out)
        return out @ self.classifier.t()

    def forward(self, src_tokens: torch.Tensor, tgt_tokens: torch.Tensor,
                training: bool = False,
                rng: torch.Generator | None = None) -> torch.Tensor:
        """Logits [B, Lt, vocab] for each position of the (shifted) target."""
        drop = numerics.DropoutCtx(self.cfg.dropout, rng, training) \
            if training else numerics.INFERENCE
        enc = self.encode(src_tokens, drop)
        return self.decode(tgt_tokens, enc, src_tokens, drop)

    def decode_logits(self, src_tokens: torch.Tensor,
                      tgt_tokens: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(src_tokens, tgt_tokens, training=False)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


# -- parameter count formulas -------------------------------------------------

def _attn_count(d: int) -> int:
    return 4 * (d * d + d)


def _gate_count(d: int) -> int:
    return 3 * (2 * d * d + d) + 6 * d


def _hidden_count(d: int, f: int, variant: str) -> int:
    if variant == "single":
        return 2 * d * d + d + 2 * d
    return 2 * d * f + f + 2 * f + f * d + d


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count; asserted against the model at build time."""
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    ln = 2 * d
    total = 2 * v * d  # source + target embeddings
    if not cfg.tie_embeddings:
        total += v * d
    if cfg.final_ln:
        total += 2 * ln
    if cfg.variant == "residual":
        ffn = d * f + f + f * d + d
        total += cfg.n_enc_layers * (_attn_count(d) + 2 * ln + ffn)
        total += cfg.n_dec_layers * (2 * _attn_count(d) + 3 * ln + ffn)
        return total
    pre_ln_enc = ln if cfg.pre_attn_norm else 0
    pre_ln_dec = 2 * ln if cfg.pre_attn_norm else 0
    merge_proj = (2 * d * d + d) if cfg.merge_mode == "concat" else 0
    gates = _gate_count(d)
    hidden = _hidden_count(d, f, cfg.hidden_variant)
    per_enc = _attn_count(d) + pre_ln_enc
    per_dec = 2 * _attn_count(d) + pre_ln_dec + merge_proj
    if cfg.sharing == "none":
        per_enc += gates + hidden
        per_dec += gates + hidden
    elif cfg.sharing == "gate":
        per_enc += hidden
        per_dec += hidden
        total += 2 * gates  # one gate set per stack
    else:  # all
        total += 2 * (gates + hidden)
    total += cfg.n_enc_layers * per_enc + cfg.n_dec_layers * per_dec
    return total


def build_model(cfg: ModelConfig, seed: int, dtype=torch.float32) -> Model:
    """Deterministically initialize a model; assert and report its size."""
    gen = torch.Generator().manual_seed(seed)
    model = Model(cfg, gen, dtype)
    actual = model.param_count()
    expected = expected_param_count(cfg)
    assert actual == expected, (
        f"parameter count mismatch: counted {actual}, formula {expected}"
    )
    log.info("built %s model: %d parameters", cfg.variant, actual)
    return model


# -- decoding ------------------------------------------------------------------

def greedy_decode(model, src_tokens: torch.Tensor, max_len: int) -> torch.Tensor:
    """Iterative argmax continuation; returns [B, max_len] with pad after eos."""
    b = src_tokens.shape[0]
    tgt = torch.full((b, 1), BOS_ID, dtype=torch.long)
    finished = torch.zeros(b, dtype=torch.bool)
    for _ in range(max_len):
        logits = model.decode_logits(src_tokens, tgt)[:, -1, :]
        nxt = logits.argmax(dim=-1)
        nxt = torch.where(finished, torch.full_like(nxt, PAD_ID), nxt)
        tgt = torch.cat([tgt, nxt[:, None]], dim=1)
        finished = finished | (nxt == EOS_ID)
    return tgt[:, 1:]


def _hyp_score(logp: float, length: int, length_norm: bool) -> float:
    return logp / max(length, 1) if length_norm else logp


def beam_decode(model, src_tokens: torch.Tensor, beam: int = 4,
                max_len: int = 32, length_norm: bool = True) -> torch.Tensor:
    """Length-normalized beam search, one source row at a time.

    Expansion ranks by cumulative log-probability; the returned hypothesis
    maximizes logp / length over finished hypotheses (sequences forced to
    finish at max_len included). Ties break toward lower token id, then
    lower beam index.
    """
    if beam < 1:
        raise ConfigurationError("beam must be >= 1")
    rows = []
    for r in range(src_tokens.shape[0]):
        src = src_tokens[r : r + 1]
        alive: list[tuple[list[int], float]] = [([], 0.0)]
        done: list[tuple[list[int], float]] = []
        for _ in range(max_len):
            if not alive:
                break
            prefixes = torch.tensor(
                [[BOS_ID] + toks for toks, _ in alive], dtype=torch.long)
            logits = model.decode_logits(src.expand(len(alive), -1), prefixes)
            logp = torch.log_softmax(logits[:, -1, :].double(), dim=-1)
            cands = []
            for bi, (_, score) in enumerate(alive):
                for tid in range(logp.shape[1]):
                    s = logp[bi, tid].item()
                    if s == float("-inf"):
                        continue
                    cands.append((score + s, tid, bi))
            cands.sort(key=lambda c: (-c[0], c[1], c[2]))
            new_alive = []
            for score, tid, bi in cands[:beam]:
                toks = alive[bi][0] + [tid]
                if tid == EOS_ID:
                    done.append((toks, score))
                else:
                    new_alive.append((toks, score))
            alive = new_alive
        done.extend(alive)  # force-finish anything still open at max_len
        done.sort(key=lambda h: (-_hyp_score(h[1], len(h[0]), length_norm), h[0]))
        rows.append(done[0][0])
    out = torch.full((len(rows), max_len), PAD_ID, dtype=torch.long)
    for i, toks in enumerate(rows):
        out[i, : len(toks)] = torch.tensor(toks, dtype=torch.long)
    return out
