"""Deterministic synthetic sequence-to-sequence tasks and accuracy metrics.

Reserved token ids: pad=0, bos=1, eos=2; payload ids start at 3. Source
sequences carry the raw payload; targets are bos + transformed payload + eos.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, InputError

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
PAYLOAD_OFFSET = 3

KINDS = ("copy", "reverse", "sort")

# Validation streams use the training seed plus this offset.
VAL_SEED_OFFSET = 7919


@dataclass
class TaskConfig:
    kind: str = "sort"
    vocab_size: int = 16  # payload symbols, excluding the 3 specials
    min_len: int = 5
    max_len: int = 20
    batch_size: int = 64
    seed: int = 42

    def validate(self) -> "TaskConfig":
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown task kind {self.kind!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigurationError("need max_len >= min_len >= 1")
        if self.vocab_size < 1 or self.batch_size < 1:
            raise ConfigurationError("vocab_size and batch_size must be positive")
        return self

    @property
    def model_vocab(self) -> int:
        return self.vocab_size + PAYLOAD_OFFSET


def transform(kind: str, payload: list[int]) -> list[int]:
    if kind == "copy":
        return list(payload)
    if kind == "reverse":
        return list(reversed(payload))
    if kind == "sort":
        return sorted(payload)
    raise ConfigurationError(f"unknown task kind {kind!r}")


@dataclass
class Batch:
    src: torch.Tensor  # [B, Ls] payload + pad
    tgt: torch.Tensor  # [B, Lt] bos + payload' + eos + pad


def gen_batch(tc: TaskConfig, rng: torch.Generator) -> Batch:
    tc.validate()
    b = tc.batch_size
    lengths = torch.randint(tc.min_len, tc.max_len + 1, (b,), generator=rng)
    ls = int(lengths.max())
    src = torch.full((b, ls), PAD_ID, dtype=torch.long)
    tgt = torch.full((b, ls + 2), PAD_ID, dtype=torch.long)
    tgt[:, 0] = BOS_ID
    for i in range(b):
        n = int(lengths[i])
        payload = torch.randint(
            PAYLOAD_OFFSET, PAYLOAD_OFFSET + tc.vocab_size, (n,), generator=rng
        ).tolist()
        src[i, :n] = torch.tensor(payload)
        out = transform(tc.kind, payload)
        tgt[i, 1 : n + 1] = torch.tensor(out)
        tgt[i, n + 1] = EOS_ID
    return Batch(src=src, tgt=tgt)


def batch_stream(tc: TaskConfig, seed: int | None = None):
    """Endless deterministic stream of batches for the given seed."""
    rng = torch.Generator().manual_seed(tc.seed if seed is None else seed)
    while True:
        yield gen_batch(tc, rng)


def _aligned(pred: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    """Pad or truncate pred along axis 1 to gold's width."""
    b, lg = gold.shape
    if pred.shape[1] < lg:
        padded = torch.full((b, lg), PAD_ID, dtype=pred.dtype)
        padded[:, : pred.shape[1]] = pred
        return padded
    return pred[:, :lg]


def token_accuracy(pred: torch.Tensor, gold: torch.Tensor,
                   pad_id: int = PAD_ID) -> float:
    """Fraction of non-pad gold positions predicted exactly."""
    pred = _aligned(pred, gold)
    mask = gold != pad_id
    total = int(mask.sum())
    if total == 0:
        raise InputError("token_accuracy: no non-pad gold positions")
    return float(((pred == gold) & mask).sum()) / total


def seq_accuracy(pred: torch.Tensor, gold: torch.Tensor,
                 pad_id: int = PAD_ID) -> float:
    """Fraction of sequences whose non-pad positions all match."""
    pred = _aligned(pred, gold)
    mask = gold != pad_id
    ok = ((pred == gold) | ~mask).all(dim=1)
    return float(ok.sum()) / gold.shape[0]


def export_batches(tc: TaskConfig, n_batches: int, path: str,
                   seed: int | None = None) -> None:
    """Write batches as lines of space-separated ids: src TAB tgt."""
    stream = batch_stream(tc, seed)
    with open(path, "w", encoding="ascii") as f:
        for _ in range(n_batches):
            batch = next(stream)
            for i in range(batch.src.shape[0]):
                s = " ".join(str(t) for t in batch.src[i].tolist())
                t = " ".join(str(t) for t in batch.tgt[i].tolist())
                f.write(f"{s}\t{t}\n")
