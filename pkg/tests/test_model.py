import math

import numpy as np
import pytest

from fugato import autodiff as ad
from fugato import encoding
from fugato.autodiff import Tensor
from fugato.errors import ConfigError, DataError
from fugato.model import SUBDECODER_KINDS, CompoundModel, ModelConfig
from fugato.vocab import FeatureConfig, FeatureVocab, IGNORE_INDEX

FEATURES = (("alpha", 10), ("beta", 12), ("gamma", 9))


def micro_config(kind="nmt", **overrides):
    defaults = dict(
        features=FEATURES, model_dim=32, heads=4, main_layers=2,
        subdecoder_layers=1, enricher_layers=1, enricher_window=3,
        max_sequence_length=16, subdecoder_kind=kind, dropout=0.0,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def random_tokens(rng, shape):
    return rng.integers(4, 9, size=shape).astype(np.int32)


def all_logits(model, tokens):
    with ad.no_grad():
        hidden = model.hidden_states(tokens)
        h = hidden[:, :-1, :]
        sub = model.subtoken_embeddings(tokens)
        ctx = (model._enricher_context(hidden)
               if model.config.subdecoder_kind == "nmt" else None)
        return [l.data.copy()
                for l in model.subdecoder_logits(h, sub, hidden_context=ctx)]


@pytest.fixture(autouse=True)
def float64_mode():
    with ad.use_dtype("float64"):
        yield


class TestConfig:
    def test_dim_head_divisibility(self):
        with pytest.raises(ConfigError):
            micro_config(model_dim=30)

    def test_window_must_be_positive(self):
        with pytest.raises(ConfigError):
            micro_config(enricher_window=0)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            micro_config(kind="magic")

    def test_single_slot_schemes_force_parallel(self, vocab44):
        scheme = encoding.scheme_for("remi", vocab44)
        config = ModelConfig.for_scheme(scheme, model_dim=32, heads=4,
                                        main_layers=1, subdecoder_kind="nmt")
        assert config.subdecoder_kind == "parallel"

    def test_round_trip_dict(self):
        config = micro_config()
        assert ModelConfig.from_dict(config.to_dict()) == config


class TestEmbedding:
    def test_zeroed_tables_leave_only_positions(self):
        model = CompoundModel(micro_config("parallel"), seed=0)
        for emb in model.embeddings:
            emb.table.data[:] = 0.0
        tokens = random_tokens(np.random.default_rng(0), (1, 5, 3))
        out = model.embed_compound(tokens)
        assert np.allclose(out.data[0], model.positions.data[:5])

    def test_feature_sum_is_order_free(self):
        model = CompoundModel(micro_config("parallel"), seed=0)
        rng = np.random.default_rng(1)
        tokens = random_tokens(rng, (1, 4, 3))
        base = model.embed_compound(tokens).data.copy()
        # swap two features' tables and their token columns consistently
        t0 = model.embeddings[0].table.data.copy()
        model.embeddings[0].table.data = model.embeddings[1].table.data[:10].copy()
        model.embeddings[1].table.data[:10] = t0
        swapped = tokens.copy()
        swapped[..., [0, 1]] = tokens[..., [1, 0]]
        after = model.embed_compound(swapped).data
        assert np.allclose(base, after, atol=1e-12)

    def test_manual_three_feature_sum(self):
        model = CompoundModel(micro_config("parallel"), seed=3)
        tokens = np.array([[[4, 5, 6]]], dtype=np.int32)
        out = model.embed_compound(tokens).data[0, 0]
        manual = (model.embeddings[0].table.data[4]
                  + model.embeddings[1].table.data[5]
                  + model.embeddings[2].table.data[6]
                  + model.positions.data[0])
        assert np.allclose(out, manual, atol=1e-12)

    def test_ignore_contributes_zero_vector(self):
        model = CompoundModel(micro_config("parallel"), seed=0)
        tokens = np.array([[[4, IGNORE_INDEX, 6]]], dtype=np.int32)
        out = model.embed_compound(tokens).data[0, 0]
        manual = (model.embeddings[0].table.data[4]
                  + model.embeddings[2].table.data[6]
                  + model.positions.data[0])
        assert np.allclose(out, manual, atol=1e-12)

    def test_over_length_sequence_rejected(self):
        model = CompoundModel(micro_config("parallel"), seed=0)
        tokens = random_tokens(np.random.default_rng(0), (1, 17, 3))
        with pytest.raises(DataError):
            model.embed_compound(tokens)


class TestCausality:
    @pytest.mark.parametrize("kind", SUBDECODER_KINDS)
    def test_inter_token_bitwise(self, kind):
        model = CompoundModel(micro_config(kind), seed=1)
        rng = np.random.default_rng(0)
        tokens = random_tokens(rng, (1, 8, 3))
        base = all_logits(model, tokens)
        perturbed = tokens.copy()
        perturbed[0, 5, :] = [4, 4, 4]
        after = all_logits(model, perturbed)
        for s in range(3):
            assert np.array_equal(base[s][:, :5], after[s][:, :5])

    @pytest.mark.parametrize("kind", SUBDECODER_KINDS)
    def test_intra_token_bitwise(self, kind):
        model = CompoundModel(micro_config(kind), seed=1)
        rng = np.random.default_rng(0)
        tokens = random_tokens(rng, (1, 8, 3))
        base = all_logits(model, tokens)
        for slot in range(3):
            perturbed = tokens.copy()
            new = 4 if tokens[0, 6, slot] != 4 else 5
            perturbed[0, 6, slot] = new
            after = all_logits(model, perturbed)
            for s in range(slot + 1):
                # slot s logits never see ground-truth slots >= s
                assert np.array_equal(base[s][0, 6], after[s][0, 6]), \
                    f"kind={kind} slot {s} leaked slot {slot}"

    def test_parallel_ignores_all_intra_token_context(self):
        model = CompoundModel(micro_config("parallel"), seed=1)
        tokens = random_tokens(np.random.default_rng(0), (1, 6, 3))
        base = all_logits(model, tokens)
        perturbed = tokens.copy()
        perturbed[0, 3, 0] = 8
        after = all_logits(model, perturbed)
        for s in range(1, 3):
            assert np.array_equal(base[s][0, 3], after[s][0, 3])

    def test_single_token_sequence_is_valid(self):
        model = CompoundModel(micro_config("crossattn"), seed=0)
        tokens = random_tokens(np.random.default_rng(0), (1, 1, 3))
        logits = all_logits(model, tokens)
        assert logits[0].shape == (1, 1, 10)


class TestEquivalence:
    @pytest.mark.parametrize("kind", ("ff", "rnn", "selfattn", "crossattn", "nmt"))
    def test_teacher_forced_matches_incremental(self, kind):
        model = CompoundModel(micro_config(kind), seed=2)
        rng = np.random.default_rng(5)
        tokens = random_tokens(rng, (1, 7, 3))
        batched = all_logits(model, tokens)
        with ad.no_grad():
            hidden = model.hidden_states(tokens)
            w = model.config.enricher_window
            for t in range(7):
                h = hidden[0, t]
                window = hidden[0, max(0, t - w + 1): t + 1]
                for s in range(3):
                    prev = [int(x) for x in tokens[0, t, :s]]
                    inc = model.next_subtoken_logits(
                        h, s, prev,
                        hidden_window=window if kind == "nmt" else None,
                    )
                    assert np.abs(inc - batched[s][0, t]).max() < 1e-10

    def test_distinct_slot_bias_distinguishes_slots(self):
        """Identical K/V still yield distinct logits per slot through the
        learned per-slot query bias."""
        config = micro_config("crossattn",
                              features=(("a", 10), ("b", 10), ("c", 10)))
        model = CompoundModel(config, seed=3)
        shared_head = model.heads_out[0]
        with ad.no_grad():
            h = Tensor(np.random.default_rng(0).normal(size=32))
            kv = model.sub_bos.reshape(1, -1)
            outs = []
            for slot in range(2):
                q = (h + model.slot_bias[slot]).reshape(1, -1)
                x = q
                for block in model.sub_blocks:
                    x = block(x, kv)
                outs.append(shared_head(x[0]).data)
        assert not np.allclose(outs[0], outs[1])


class TestEnricher:
    def test_window_truncated_at_start(self):
        model = CompoundModel(micro_config("nmt", enricher_window=5), seed=0)
        tokens = random_tokens(np.random.default_rng(0), (1, 2, 3))
        hidden = model.hidden_states(tokens)
        context, mask = model._enricher_context(hidden)
        assert context.shape == (1, 2, 6, 32)
        assert mask[0, 0, 0].tolist() == [True, False, False, False, False, True]
        assert mask[1, 0, 0].tolist() == [True, False, False, False, True, True]

    def test_out_of_window_hiddens_are_isolated(self):
        """Garbage in context slots beyond the window cannot reach the
        nmt logits (main-decoder path aside)."""
        model = CompoundModel(micro_config("nmt", enricher_window=2,
                                           max_sequence_length=32), seed=4)
        rng = np.random.default_rng(6)
        tokens = random_tokens(rng, (1, 9, 3))
        with ad.no_grad():
            hidden = model.hidden_states(tokens)
            t = 8
            h = hidden[0, t]
            window = hidden[0, t - 1 : t + 1]
            base = [model.next_subtoken_logits(h, s,
                                               [int(x) for x in tokens[0, t, :s]],
                                               hidden_window=window)
                    for s in range(3)]
            # rebuild the window from a hidden tensor with garbage outside it
            garbage = hidden.data.copy()
            garbage[0, : t - 1] = 1e6
            poisoned = Tensor(garbage)
            window2 = poisoned[0, t - 1 : t + 1]
            after = [model.next_subtoken_logits(h, s,
                                                [int(x) for x in tokens[0, t, :s]],
                                                hidden_window=window2)
                     for s in range(3)]
        for a, b in zip(base, after):
            assert np.array_equal(a, b)

    def test_nmt_requires_context(self):
        model = CompoundModel(micro_config("nmt"), seed=0)
        tokens = random_tokens(np.random.default_rng(0), (1, 3, 3))
        with ad.no_grad():
            hidden = model.hidden_states(tokens)
            h = hidden[:, :-1, :]
            sub = model.subtoken_embeddings(tokens)
            with pytest.raises(ConfigError):
                model.subdecoder_logits(h, sub)


class TestTeacherForcedLoss:
    def test_uniform_logits_give_log_vocab_per_feature(self):
        model = CompoundModel(micro_config("crossattn"), seed=0)
        for head in model.heads_out:
            head.weight.data[:] = 0.0
            head.bias.data[:] = 0.0
        tokens = random_tokens(np.random.default_rng(0), (2, 6, 3))
        out = model.forward_teacher_forced(tokens, np.ones_like(tokens, bool))
        means = out.feature_means()
        for (name, size) in FEATURES:
            assert abs(means[name] - math.log(size)) < 1e-12

    def test_loss_invariant_to_pad_extension(self):
        model = CompoundModel(micro_config("crossattn"), seed=0)
        rng = np.random.default_rng(1)
        tokens = random_tokens(rng, (1, 5, 3))
        mask = np.ones_like(tokens, dtype=bool)
        base = model.forward_teacher_forced(tokens, mask)
        padded = np.concatenate(
            [tokens, np.zeros((1, 3, 3), dtype=np.int32)], axis=1
        )
        pad_mask = np.concatenate([mask, np.zeros((1, 3, 3), bool)], axis=1)
        after = model.forward_teacher_forced(padded, pad_mask)
        assert abs(base.mean - after.mean) < 1e-12

    def test_zero_scored_batch_rejected(self):
        model = CompoundModel(micro_config("parallel"), seed=0)
        tokens = random_tokens(np.random.default_rng(0), (1, 3, 3))
        with pytest.raises(DataError):
            model.forward_teacher_forced(tokens, np.zeros_like(tokens, bool))

    def test_chain_rule_sum_matches_flattened_total(self):
        """Summed per-feature NLL equals the sequence's total negative
        log-likelihood recomputed from saved per-slot probabilities."""
        model = CompoundModel(micro_config("crossattn"), seed=7)
        tokens = random_tokens(np.random.default_rng(2), (1, 6, 3))
        mask = np.ones_like(tokens, dtype=bool)
        out = model.forward_teacher_forced(tokens, mask, want_logprobs=True)
        total_from_features = sum(out.per_feature_nll.values())
        total_from_slots = -out.logprobs.sum()
        assert abs(total_from_features - total_from_slots) < 1e-9

    @pytest.mark.parametrize("kind", SUBDECODER_KINDS)
    def test_no_dead_parameters(self, kind):
        model = CompoundModel(micro_config(kind), seed=1)
        tokens = random_tokens(np.random.default_rng(3), (2, 8, 3))
        out = model.forward_teacher_forced(tokens, np.ones_like(tokens, bool))
        out.loss.backward()
        dead = [name for name, p in model.named_parameters()
                if p.grad is None or not np.any(p.grad)]
        # position rows beyond the batch length legitimately get no signal
        assert dead == [], f"dead parameters under {kind}: {dead}"


class TestParameterBudget:
    def test_paper_scale_configuration_lands_near_forty_million(self, vocab44):
        scheme = encoding.scheme_for("nb-pf", vocab44)
        config = ModelConfig.for_scheme(
            scheme, model_dim=512, heads=8, main_layers=12,
            subdecoder_layers=1, enricher_layers=1,
            max_sequence_length=512, subdecoder_kind="nmt",
        )
        model = CompoundModel(config, seed=0)
        total = model.num_parameters()
        assert 40e6 * 0.85 <= total <= 40e6 * 1.15, f"{total:,}"

    def test_breakdown_sums_to_total(self):
        model = CompoundModel(micro_config("nmt"), seed=0)
        breakdown = model.parameter_breakdown()
        total = breakdown.pop("total")
        assert sum(breakdown.values()) == total == model.num_parameters()

    def test_closed_form_count_for_micro_model(self):
        config = micro_config("parallel", main_layers=2)
        model = CompoundModel(config, seed=0)
        d = 32
        block = 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d) + 4 * d
        expected = (
            sum(size * d for _, size in FEATURES)          # embeddings
            + config.max_sequence_length * d               # positions
            + d                                            # sequence bos
            + 2 * block                                    # main blocks
            + 2 * d                                        # final norm
            + sum(d * size + size for _, size in FEATURES)  # output heads
        )
        assert model.num_parameters() == expected


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        model = CompoundModel(micro_config("nmt"), seed=9)
        tokens = random_tokens(np.random.default_rng(0), (1, 5, 3))
        mask = np.ones_like(tokens, dtype=bool)
        before = all_logits(model, tokens)
        path = tmp_path / "model.npz"
        model.save(path, extra_meta={"note": "test"})
        loaded, meta = CompoundModel.load(path)
        assert meta["note"] == "test"
        assert meta["config_digest"] == model.config.digest()
        after = all_logits(loaded, tokens)
        for a, b in zip(before, after):
            assert np.array_equal(a, b)

    def test_optimizer_state_round_trips(self, tmp_path):
        from fugato.optim import AdamW

        model = CompoundModel(micro_config("parallel"), seed=0)
        tokens = random_tokens(np.random.default_rng(0), (1, 4, 3))
        out = model.forward_teacher_forced(tokens, np.ones_like(tokens, bool))
        out.loss.backward()
        AdamW(model.parameters()).step(1e-3)
        path = tmp_path / "opt.npz"
        model.save(path)
        loaded, _ = CompoundModel.load(path)
        for (_, a), (_, b) in zip(model.named_parameters(),
                                  loaded.named_parameters()):
            assert np.array_equal(a.data, b.data)
            assert a.step == b.step
            assert np.array_equal(a.m, b.m)

    def test_shape_mismatch_rejected(self, tmp_path):
        model = CompoundModel(micro_config("parallel"), seed=0)
        path = tmp_path / "m.npz"
        model.save(path)
        # corrupt: reload raw arrays, swap a shape
        data = dict(np.load(path))
        key = next(k for k in data if k.startswith("param/"))
        data[key] = np.zeros((2, 2))
        np.savez(path, **data)
        with pytest.raises(DataError):
            CompoundModel.load(path)
