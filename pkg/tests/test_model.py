import math

import pytest
import torch

from dwformer.checkpoint import (
    apply_params,
    load_checkpoint,
    model_params,
    restore_model,
    save_checkpoint,
)
from dwformer.errors import ConfigurationError, InputError
from dwformer.model import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    Model,
    ModelConfig,
    beam_decode,
    build_model,
    expected_param_count,
    greedy_decode,
    sinusoidal_positions,
)


def small_cfg(**kw):
    base = dict(variant="dwlstm", n_enc_layers=2, n_dec_layers=2, d_model=8,
                d_ff=16, heads=2, vocab_size=11, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def toy_tokens(b=2, l=5, vocab=11, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(3, vocab, (b, l), generator=g)


class TestConfig:
    def test_rejects_bad_variant(self):
        with pytest.raises(ConfigurationError):
            small_cfg(variant="highway").validate()

    def test_rejects_indivisible_heads(self):
        with pytest.raises(ConfigurationError):
            small_cfg(d_model=10, heads=4).validate()

    def test_round_trips_through_dict(self):
        cfg = small_cfg(sharing="none", merge_mode="concat")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestPositions:
    def test_hand_values(self):
        pe = sinusoidal_positions(4, 4, torch.float64)
        assert pe[0].abs().max().item() == pytest.approx(1.0)  # cos(0) columns
        assert pe[1, 0].item() == pytest.approx(math.sin(1.0), abs=1e-12)
        assert pe[1, 1].item() == pytest.approx(math.cos(1.0), abs=1e-12)
        assert pe[3, 2].item() == pytest.approx(math.sin(3.0 / 100.0), abs=1e-12)
        assert pe[3, 3].item() == pytest.approx(math.cos(3.0 / 100.0), abs=1e-12)

    def test_rows_distinct(self):
        pe = sinusoidal_positions(64, 16)
        assert torch.unique(pe, dim=0).shape[0] == 64


class TestBuild:
    def test_deterministic(self):
        a = build_model(small_cfg(), seed=7)
        b = build_model(small_cfg(), seed=7)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_seed_changes_weights(self):
        a = build_model(small_cfg(), seed=7)
        b = build_model(small_cfg(), seed=8)
        assert not torch.equal(a.src_emb, b.src_emb)

    def test_tied_embeddings_share_storage(self):
        m = build_model(small_cfg(), seed=0)
        assert m.classifier is m.tgt_emb
        m2 = build_model(small_cfg(tie_embeddings=False), seed=0)
        assert m2.classifier is not m2.tgt_emb

    def test_gate_sharing_aliases_within_stack(self):
        m = build_model(small_cfg(sharing="gate"), seed=0)
        assert m.enc_layers[0].gates is m.enc_layers[1].gates
        assert m.dec_layers[0].gates is m.dec_layers[1].gates
        assert m.enc_layers[0].gates is not m.dec_layers[0].gates
        assert m.enc_layers[0].hidden is not m.enc_layers[1].hidden
        m2 = build_model(small_cfg(sharing="none"), seed=0)
        assert m2.enc_layers[0].gates is not m2.enc_layers[1].gates
        m3 = build_model(small_cfg(sharing="all"), seed=0)
        assert m3.enc_layers[0].hidden is m3.enc_layers[1].hidden


class TestParamCount:
    def test_residual_hand_count(self):
        # d=4, f=8, v=5, 1+1 layers, tied embeddings, final LN.
        cfg = ModelConfig(variant="residual", n_enc_layers=1, n_dec_layers=1,
                          d_model=4, d_ff=8, heads=2, vocab_size=5, dropout=0.0)
        attn = 4 * (16 + 4)            # 80
        ln = 8
        ffn = 4 * 8 + 8 + 8 * 4 + 4    # 76
        enc = attn + 2 * ln + ffn      # 172
        dec = 2 * attn + 3 * ln + ffn  # 260
        emb = 2 * 5 * 4                # 40
        total = emb + enc + dec + 2 * ln
        assert expected_param_count(cfg) == total
        assert build_model(cfg, 0).param_count() == total

    def test_dwlstm_hand_count_single_no_sharing(self):
        cfg = small_cfg(n_enc_layers=1, n_dec_layers=1, d_model=4, d_ff=8,
                        heads=2, vocab_size=5, hidden_variant="single",
                        sharing="none")
        attn = 80
        ln = 8
        gates = 3 * (2 * 16 + 4) + 6 * 4       # 132
        hidden = 2 * 16 + 4 + 2 * 4            # 44
        enc = attn + ln + gates + hidden       # 264
        dec = 2 * attn + 2 * ln + gates + hidden
        total = 40 + enc + dec + 2 * ln
        assert expected_param_count(cfg) == total
        assert build_model(cfg, 0).param_count() == total

    def test_gate_sharing_is_depth_independent(self):
        deep = expected_param_count(small_cfg(sharing="gate", n_enc_layers=4))
        shallow = expected_param_count(small_cfg(sharing="gate", n_enc_layers=2))
        per_layer_wo_gates = (
            expected_param_count(small_cfg(sharing="none", n_enc_layers=4))
            - expected_param_count(small_cfg(sharing="none", n_enc_layers=2))
        ) // 2 - (3 * (2 * 64 + 8) + 6 * 8)
        assert deep - shallow == 2 * per_layer_wo_gates

    @pytest.mark.parametrize("kw", [
        {}, {"sharing": "none"}, {"sharing": "all"},
        {"hidden_variant": "single"}, {"merge_mode": "concat"},
        {"variant": "residual"}, {"tie_embeddings": False},
        {"final_ln": False}, {"pre_attn_norm": False},
        {"n_enc_layers": 3, "n_dec_layers": 1},
    ])
    def test_formula_matches_enumeration(self, kw):
        cfg = small_cfg(**kw)
        m = build_model(cfg, 1)  # build_model asserts internally
        assert m.param_count() == expected_param_count(cfg)

    def test_sharing_ordering(self):
        counts = {s: expected_param_count(small_cfg(sharing=s))
                  for s in ("none", "gate", "all")}
        assert counts["none"] > counts["gate"] > counts["all"]


class TestForward:
    @pytest.mark.parametrize("variant", ["dwlstm", "residual"])
    def test_shapes(self, variant):
        m = build_model(small_cfg(variant=variant), seed=0)
        src, tgt = toy_tokens(2, 5), toy_tokens(2, 4, seed=1)
        logits = m(src, tgt)
        assert logits.shape == (2, 4, 11)

    def test_token_range_checked(self):
        m = build_model(small_cfg(), seed=0)
        bad = torch.full((1, 3), 11, dtype=torch.long)
        with pytest.raises(InputError):
            m(bad, toy_tokens(1, 2))

    def test_length_limit_checked(self):
        m = build_model(small_cfg(max_positions=4), seed=0)
        with pytest.raises(InputError):
            m(toy_tokens(1, 5), toy_tokens(1, 2))

    @pytest.mark.parametrize("variant", ["dwlstm", "residual"])
    def test_decoder_causality(self, variant):
        m = build_model(small_cfg(variant=variant), seed=0, dtype=torch.float64)
        src = toy_tokens(1, 5)
        tgt = toy_tokens(1, 4, seed=2)
        base = m(src, tgt)
        tgt2 = tgt.clone()
        tgt2[0, 3] = 3 + (tgt2[0, 3].item() - 3 + 1) % 8
        moved = m(src, tgt2)
        assert (base[0, :3] - moved[0, :3]).abs().max().item() < 1e-9

    @pytest.mark.parametrize("variant", ["dwlstm", "residual"])
    def test_source_pad_invariance(self, variant):
        m = build_model(small_cfg(variant=variant), seed=0, dtype=torch.float64)
        src = toy_tokens(1, 5)
        padded = torch.cat([src, torch.zeros(1, 3, dtype=torch.long)], dim=1)
        tgt = toy_tokens(1, 4, seed=2)
        assert (m(src, tgt) - m(padded, tgt)).abs().max().item() < 1e-9

    def test_dropout_deterministic_given_seed(self):
        m = build_model(small_cfg(dropout=0.3), seed=0)
        src, tgt = toy_tokens(2, 5), toy_tokens(2, 4, seed=1)
        a = m(src, tgt, training=True, rng=torch.Generator().manual_seed(5))
        b = m(src, tgt, training=True, rng=torch.Generator().manual_seed(5))
        c = m(src, tgt, training=True, rng=torch.Generator().manual_seed(6))
        assert torch.equal(a, b)
        assert not torch.equal(a, c)


class TestCheckpointRoundTrip:
    def test_bit_exact(self, tmp_path):
        m = build_model(small_cfg(sharing="gate"), seed=3)
        path = str(tmp_path / "m.bin")
        save_checkpoint(path, m, step=17, metrics={"val_loss": 1.25})
        ckpt = load_checkpoint(path)
        assert ckpt.step == 17
        assert ckpt.metrics == {"val_loss": 1.25}
        orig = {k: v.clone() for k, v in model_params(m).items()}
        with torch.no_grad():
            for p in m.parameters():
                p.add_(1.0)
        apply_params(m, ckpt.params)
        for k, v in model_params(m).items():
            assert torch.equal(v, orig[k]), k

    def test_restore_builds_equivalent_model(self, tmp_path):
        m = build_model(small_cfg(), seed=3)
        path = str(tmp_path / "m.bin")
        save_checkpoint(path, m, step=0, metrics={})
        m2 = restore_model(load_checkpoint(path))
        src, tgt = toy_tokens(1, 4), toy_tokens(1, 3, seed=1)
        assert torch.equal(m(src, tgt), m2(src, tgt))

    def test_schema_mismatch_rejected(self, tmp_path):
        m = build_model(small_cfg(), seed=3)
        other = build_model(small_cfg(d_model=16), seed=3)
        with pytest.raises(InputError):
            apply_params(m, model_params(other))


# -- decoding ------------------------------------------------------------------

class FakeModel:
    """Deterministic conditional distributions over {eos, 3}; pad/bos barred.

    decode_logits depends only on the target prefix of each row, which is all
    beam search is entitled to assume.
    """

    def __init__(self, vocab=4, seed=11):
        self.vocab = vocab
        self.seed = seed

    def _row_logits(self, prefix):
        key = self.seed
        for t in prefix:
            key = key * 31 + int(t) + 7
        g = torch.Generator().manual_seed(key % (2 ** 31))
        logits = torch.randn(self.vocab, generator=g, dtype=torch.float64)
        logits[PAD_ID] = float("-inf")
        logits[BOS_ID] = float("-inf")
        return logits

    def decode_logits(self, src_tokens, tgt_tokens):
        b, l = tgt_tokens.shape
        out = torch.zeros(b, l, self.vocab, dtype=torch.float64)
        for r in range(b):
            for pos in range(l):
                out[r, pos] = self._row_logits(tgt_tokens[r, : pos + 1].tolist())
        return out


def enumerate_best(fake, max_len, length_norm=True):
    """Exhaustive search over all decodable sequences; the beam oracle."""
    hyps = []

    def expand(prefix, logp):
        logits = fake._row_logits([BOS_ID] + prefix)
        lp = torch.log_softmax(logits, dim=-1)
        for tid in range(fake.vocab):
            s = lp[tid].item()
            if s == float("-inf"):
                continue
            seq = prefix + [tid]
            if tid == EOS_ID or len(seq) == max_len:
                hyps.append((seq, logp + s))
            else:
                expand(seq, logp + s)

    expand([], 0.0)
    score = (lambda h: h[1] / len(h[0])) if length_norm else (lambda h: h[1])
    hyps.sort(key=lambda h: (-score(h), h[0]))
    return hyps[0][0]


class TestDecoding:
    def test_beam_matches_exhaustive_enumeration(self):
        fake = FakeModel()
        max_len = 4
        # two effective tokens, depth 4: at most 2^4 leaves, so beam 16 is
        # exhaustive and must agree with brute-force enumeration.
        out = beam_decode(fake, torch.zeros(3, 2, dtype=torch.long),
                          beam=16, max_len=max_len)
        best = enumerate_best(fake, max_len)
        for r in range(3):
            got = [t for t in out[r].tolist() if t != PAD_ID]
            assert got == best

    def test_beam_one_equals_greedy(self):
        m = build_model(small_cfg(), seed=9)
        src = toy_tokens(3, 5, seed=4)
        g = greedy_decode(m, src, max_len=6)
        b = beam_decode(m, src, beam=1, max_len=6, length_norm=False)
        assert torch.equal(g, b)

    def test_beam_improves_or_matches_greedy_score(self):
        fake = FakeModel(seed=23)
        src = torch.zeros(4, 2, dtype=torch.long)
        def logp_of(seq):
            total, prefix = 0.0, [BOS_ID]
            for t in seq:
                lp = torch.log_softmax(fake._row_logits(prefix), dim=-1)
                total += lp[t].item()
                prefix.append(t)
            return total
        g = greedy_decode(fake, src, max_len=4)
        b = beam_decode(fake, src, beam=8, max_len=4, length_norm=False)
        for r in range(4):
            gs = [t for t in g[r].tolist() if t != PAD_ID]
            bs = [t for t in b[r].tolist() if t != PAD_ID]
            assert logp_of(bs) >= logp_of(gs) - 1e-12

    def test_greedy_pads_after_eos(self):
        class EosModel:
            def decode_logits(self, src, tgt):
                out = torch.zeros(tgt.shape[0], tgt.shape[1], 5)
                out[:, :, EOS_ID] = 1.0
                return out

        out = greedy_decode(EosModel(), torch.zeros(2, 3, dtype=torch.long), 4)
        assert out[:, 0].eq(EOS_ID).all()
        assert out[:, 1:].eq(PAD_ID).all()

    def test_beam_rejects_nonpositive_width(self):
        with pytest.raises(ConfigurationError):
            beam_decode(FakeModel(), torch.zeros(1, 2, dtype=torch.long), beam=0)

    def test_beam_tie_breaks_toward_lower_token(self):
        class FlatModel:
            # uniform over {eos, 3, 4}: every hypothesis ties, so the
            # documented order (token id, then beam index) decides.
            def decode_logits(self, src, tgt):
                out = torch.zeros(tgt.shape[0], tgt.shape[1], 5,
                                  dtype=torch.float64)
                out[:, :, PAD_ID] = float("-inf")
                out[:, :, BOS_ID] = float("-inf")
                return out

        out = beam_decode(FlatModel(), torch.zeros(1, 2, dtype=torch.long),
                          beam=2, max_len=3, length_norm=True)
        # the single-token [eos] hypothesis has the best per-token score
        assert out[0].tolist() == [EOS_ID, PAD_ID, PAD_ID]
