"""Samplers: elementary ops, Halton order, and the generation procedures."""

import math

import pytest
import torch

from partgen import (
    MdlmConfig,
    MdlmTransformer,
    PartitionConfig,
    PartitionTransformer,
    categorical_sample,
    cfg_combine,
    confidence_sample_step,
    count_token_positions,
    extract_predictions,
    get_sampler,
    halton_position_order,
    halton_schedule,
    linear_schedule,
    mdlm_ancestral_sample,
    mdlm_confidence_sample,
    nucleus_filter,
    pgm_sample_mdlm_equivalent,
    pgm_sample_simple,
    posterior_probs,
    radical_inverse,
    sample_noisy,
)
from partgen.samplers import PgmSampleState, SamplingError, maskgit_budget_schedule

N = 13
BOS = N - 2


def tiny_pgm(seed=0, max_len=32):
    torch.manual_seed(seed)
    return PartitionTransformer(PartitionConfig(
        n_encoder_layers=1, n_decoder_layers=1, hidden_dim=32, n_heads=2,
        vocab_size=N, max_len=max_len)).eval()


def tiny_mdlm(seed=0, max_len=32):
    torch.manual_seed(seed)
    return MdlmTransformer(MdlmConfig(
        n_layers=1, hidden_dim=32, n_heads=2, vocab_size=N, max_len=max_len)).eval()


class TestCategoricalSample:
    def test_one_hot_row(self, rng):
        logits = torch.full((5,), float("-inf"))
        logits[3] = 0.0
        for _ in range(10):
            assert int(categorical_sample(logits, rng)) == 3

    def test_all_neg_inf_rejected(self, rng):
        with pytest.raises(SamplingError):
            categorical_sample(torch.full((4,), float("-inf")), rng)

    def test_uniform_frequencies(self):
        rng = torch.Generator().manual_seed(0)
        draws = categorical_sample(torch.zeros(100_000, 4), rng)
        freqs = torch.bincount(draws, minlength=4).float() / 100_000
        assert torch.all(freqs >= 0.24) and torch.all(freqs <= 0.26)

    def test_constant_shift_invariance(self):
        logits = torch.tensor([0.0, 1.0, 2.0], dtype=torch.float64)
        a = categorical_sample(logits.expand(64, 3), torch.Generator().manual_seed(7))
        b = categorical_sample((logits + 2.0).expand(64, 3), torch.Generator().manual_seed(7))
        assert torch.equal(a, b)


class TestCfgCombine:
    def test_omega_zero_identity(self, rng):
        cond = torch.randn(4, 7, generator=rng)
        assert torch.equal(cfg_combine(cond, torch.randn(4, 7, generator=rng), 0.0), cond)

    def test_equal_rows_cancel(self, rng):
        cond = torch.randn(4, 7, generator=rng)
        for omega in (0.5, 1.0, 4.0):
            assert torch.allclose(cfg_combine(cond, cond, omega), cond, atol=1e-6)

    def test_direct_arithmetic(self):
        out = cfg_combine(torch.tensor([0.2]), torch.tensor([0.1]), 1.0)
        assert out.item() == pytest.approx(0.3, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cfg_combine(torch.zeros(3), torch.zeros(4), 1.0)

    def test_argmax_invariant_under_shared_shift(self, rng):
        cond = torch.randn(10, generator=rng)
        uncond = torch.randn(10, generator=rng)
        base = cfg_combine(cond, uncond, 2.0).argmax()
        shifted = cfg_combine(cond + 5.0, uncond + 5.0, 2.0).argmax()
        assert base == shifted


class TestNucleusFilter:
    def test_p_one_identity(self):
        p = torch.tensor([0.5, 0.3, 0.2])
        assert torch.equal(nucleus_filter(p, 1.0), p)

    def test_worked_example(self):
        out = nucleus_filter(torch.tensor([0.5, 0.3, 0.2], dtype=torch.float64), 0.9)
        assert torch.allclose(out, torch.tensor([0.625, 0.375, 0.0], dtype=torch.float64),
                              atol=1e-12)

    def test_tiny_p_is_argmax_one_hot(self):
        out = nucleus_filter(torch.tensor([0.1, 0.6, 0.3]), 1e-6)
        assert torch.allclose(out, torch.tensor([0.0, 1.0, 0.0]))

    def test_batched_rows_renormalize(self, rng):
        probs = torch.softmax(torch.randn(6, 9, generator=rng), dim=-1)
        out = nucleus_filter(probs, 0.7)
        assert torch.allclose(out.sum(-1), torch.ones(6), atol=1e-6)

    def test_threshold_domain(self):
        with pytest.raises(ValueError):
            nucleus_filter(torch.tensor([1.0]), 0.0)
        with pytest.raises(ValueError):
            nucleus_filter(torch.tensor([1.0]), 1.5)


class TestPosterior:
    def test_rows_sum_to_one_on_grid(self):
        lin = linear_schedule()
        x_probs = torch.softmax(torch.randn(3, N), dim=-1)
        for i in range(1, 11):
            for j in range(i):
                t, s = i / 10, j / 10
                rows = posterior_probs(lin, s, t, x_probs, mask_id=N)
                assert torch.allclose(rows.sum(-1), torch.ones(3, dtype=torch.float64),
                                      atol=1e-9)
                assert torch.all(rows >= 0)

    def test_final_step_leaves_no_mask_mass(self):
        lin = linear_schedule()
        rows = posterior_probs(lin, 0.0, 0.5, torch.softmax(torch.randn(2, N), -1), mask_id=N)
        assert torch.all(rows[..., N] == 0)


class TestRadicalInverse:
    def test_base2_values(self):
        assert radical_inverse(1, 2) == 0.5
        assert radical_inverse(2, 2) == 0.25
        assert radical_inverse(3, 2) == 0.75

    def test_base3_values(self):
        assert radical_inverse(1, 3) == pytest.approx(1 / 3)
        assert radical_inverse(5, 3) == pytest.approx(7 / 9)

    def test_range(self):
        for b in (2, 3):
            for i in range(1, 2000):
                assert 0.0 < radical_inverse(i, b) < 1.0

    def test_matches_digit_reversal_oracle(self):
        def oracle(i, b):
            digits = []
            while i:
                digits.append(i % b)
                i //= b
            return sum(d / b ** (k + 1) for k, d in enumerate(digits))

        for b in (2, 3):
            for i in range(1, 500):
                assert radical_inverse(i, b) == pytest.approx(oracle(i, b), abs=1e-15)

    def test_domain(self):
        with pytest.raises(ValueError):
            radical_inverse(0, 2)
        with pytest.raises(ValueError):
            radical_inverse(1, 1)


class TestHaltonSchedule:
    def test_h1(self):
        assert halton_schedule(1) == [(0, 0)]

    def test_h2_hand_trace(self):
        assert halton_schedule(2) == [(1, 0), (0, 1), (0, 0), (1, 1)]

    def test_h16_is_permutation(self):
        cells = halton_schedule(16)
        assert len(cells) == 256
        assert len(set(cells)) == 256
        assert all(0 <= r < 16 and 0 <= c < 16 for r, c in cells)

    def test_low_discrepancy_coverage(self):
        # After 64 of 256 cells, every 4x4 sub-block holds a decoded cell.
        cells = halton_schedule(16)[:64]
        blocks = {(r // 4, c // 4) for r, c in cells}
        assert len(blocks) == 16

    def test_position_order_covers_sequence(self):
        for L in (1, 5, 16, 30):
            order = halton_position_order(L)
            assert sorted(order) == list(range(L))


class TestConfidenceStep:
    def test_budget_all(self, rng):
        logits = torch.randn(6, N, generator=rng)
        chosen, tokens = confidence_sample_step(logits, 6, rng)
        assert sorted(chosen.tolist()) == list(range(6))

    def test_one_hot_row_wins(self, rng):
        logits = torch.zeros(4, N)
        logits[2] = torch.full((N,), -1e9)
        logits[2, 5] = 0.0  # probability 1 at token 5
        chosen, tokens = confidence_sample_step(logits, 1, rng)
        assert int(chosen[0]) == 2 and int(tokens[0]) == 5

    def test_ties_break_to_lowest_index(self):
        logits = torch.zeros(5, N)  # identical rows -> identical confidences
        rng = torch.Generator().manual_seed(0)
        # Identical uniform rows can sample different tokens; force identical
        # rows AND tokens by a deterministic one-hot everywhere.
        logits[:] = torch.full((N,), -1e9)
        logits[:, 3] = 0.0
        chosen, _ = confidence_sample_step(logits, 3, rng)
        assert chosen.tolist() == [0, 1, 2]

    def test_budget_zero_empty(self, rng):
        chosen, tokens = confidence_sample_step(torch.randn(3, N, generator=rng), 0, rng)
        assert len(chosen) == 0 and len(tokens) == 0

    def test_budget_cap(self, rng):
        with pytest.raises(ValueError):
            confidence_sample_step(torch.randn(2, N, generator=rng), 3, rng)

    def test_budget_schedule_sums_to_length(self):
        for L, T in ((16, 4), (100, 7), (32, 32)):
            budgets = maskgit_budget_schedule(L, T)
            assert sum(budgets) == L
            assert all(b >= 0 for b in budgets)


class TestMdlmAncestral:
    def test_complete_and_mask_free(self, rng):
        model = tiny_mdlm()
        trace = mdlm_ancestral_sample(model, 16, 4, rng, batch_size=3)
        assert trace.sequences.shape == (3, 16)
        assert torch.all(trace.sequences < N)

    def test_positions_processed_closed_form(self, rng):
        model = tiny_mdlm()
        trace = mdlm_ancestral_sample(model, 16, 8, rng, batch_size=2)
        assert count_token_positions(trace) == 8 * 16

    def test_single_step_resolves_everything(self, rng):
        model = tiny_mdlm()
        trace = mdlm_ancestral_sample(model, 12, 1, rng, batch_size=2)
        assert len(trace.steps) == 1
        assert all(len(p) == 12 for p in trace.steps[0].positions)

    def test_decoded_positions_never_change(self, rng):
        model = tiny_mdlm()
        trace = mdlm_ancestral_sample(model, 20, 6, rng, batch_size=2)
        for b in range(2):
            seen = {}
            for rec in trace.steps:
                for pos, tok in zip(rec.positions[b], rec.tokens[b]):
                    assert pos not in seen
                    seen[pos] = tok
            for pos, tok in seen.items():
                assert int(trace.sequences[b, pos]) == tok

    def test_t_validation(self, rng):
        with pytest.raises(ValueError):
            mdlm_ancestral_sample(tiny_mdlm(), 8, 0, rng)


class TestPgmSimple:
    def test_step_budget_boundaries(self, rng):
        model = tiny_pgm()
        trace = pgm_sample_simple(model, 9, 8, rng, batch_size=2, bos_id=BOS)
        assert all(len(rec.positions[0]) == 1 for rec in trace.steps)
        trace = pgm_sample_simple(model, 9, 1, rng, batch_size=2, bos_id=BOS)
        assert len(trace.steps) == 1 and len(trace.steps[0].positions[0]) == 8

    def test_trace_union_is_disjoint_cover(self, rng):
        model = tiny_pgm()
        trace = pgm_sample_simple(model, 17, 4, rng, batch_size=3, bos_id=BOS)
        for b in range(3):
            seen = [p for rec in trace.steps for p in rec.positions[b]]
            assert sorted(seen) == list(range(1, 17))
        assert torch.all(trace.sequences[:, 0] == BOS)

    def test_pinned_permutation_is_respected(self, rng):
        model = tiny_pgm()
        order = torch.tensor([3, 1, 4, 2, 6, 5, 7, 8])
        trace = pgm_sample_simple(model, 9, 8, rng, batch_size=1, bos_id=BOS, order=order)
        visited = [rec.positions[0][0] for rec in trace.steps]
        assert visited == order.tolist()

    def test_remainder_final_step(self, rng):
        model = tiny_pgm()
        trace = pgm_sample_simple(model, 12, 5, rng, batch_size=1, bos_id=BOS)
        sizes = [len(rec.positions[0]) for rec in trace.steps]
        assert sum(sizes) == 11
        assert sizes[:-1] == [3] * (len(sizes) - 1)

    def test_positions_processed_closed_form(self, rng):
        model = tiny_pgm()
        L, K = 17, 4  # k = 4: clean counts 1, 5, 9, 13
        trace = pgm_sample_simple(model, L, K, rng, batch_size=2, bos_id=BOS)
        assert count_token_positions(trace) == (1 + 5 + 9 + 13) + 16

    def test_k_validation(self, rng):
        with pytest.raises(ValueError):
            pgm_sample_simple(tiny_pgm(), 9, 9, rng, bos_id=BOS)


class TestSampleNoisy:
    def test_prob_zero(self, rng):
        queue = torch.arange(1, 9).unsqueeze(0).expand(3, -1)
        counts, sl, mask = sample_noisy(queue, 0.0, torch.full((3,), 8), rng)
        assert torch.all(counts == 0) and sl is None

    def test_prob_one_caps_at_remaining(self, rng):
        queue = torch.arange(1, 9).unsqueeze(0).expand(3, -1).contiguous()
        lengths = torch.tensor([8, 3, 0])
        counts, sl, mask = sample_noisy(queue, 1.0, lengths, rng)
        assert torch.equal(counts, lengths)

    def test_counts_never_exceed_remaining(self, rng):
        queue = torch.arange(1, 17).unsqueeze(0).expand(5, -1).contiguous()
        lengths = torch.tensor([16, 9, 4, 1, 0])
        for _ in range(20):
            counts, _, _ = sample_noisy(queue, 0.7, lengths, rng)
            assert torch.all(counts <= lengths)

    def test_domain(self, rng):
        with pytest.raises(ValueError):
            sample_noisy(torch.zeros(1, 4, dtype=torch.long), 1.2, torch.tensor([4]), rng)


class TestExtractPredictions:
    def make_state(self):
        return PgmSampleState(
            x=torch.tensor([[9, 0], [9, 4]]),
            clean_positions=torch.tensor([[0, 0], [0, 2]]),
            concrete_lengths=torch.tensor([1, 2]),
            noisy_positions=torch.tensor([[1, 2, 3, 4], [1, 3, 4, 0]]),
            noisy_lengths=torch.tensor([4, 3]),
        )

    def test_zero_counts_keep_state(self):
        state = self.make_state()
        counts = torch.zeros(2, dtype=torch.long)
        out = extract_predictions(state, counts, torch.zeros(2, 1, dtype=torch.long),
                                  torch.zeros(2, 1, dtype=torch.long))
        assert torch.equal(out.x[:, :2], state.x)
        assert torch.equal(out.concrete_lengths, state.concrete_lengths)

    def test_lengths_advance_by_counts(self):
        state = self.make_state()
        counts = torch.tensor([2, 1])
        sl = torch.tensor([[1, 2], [1, 0]])
        vals = torch.tensor([[5, 6], [7, 0]])
        out = extract_predictions(state, counts, sl, vals)
        assert torch.equal(out.concrete_lengths, state.concrete_lengths + counts)
        assert out.x[0, 1].item() == 5 and out.x[0, 2].item() == 6
        assert out.x[1, 2].item() == 7
        assert torch.equal(out.noisy_lengths, torch.tensor([2, 2]))
        assert out.noisy_positions[0, :2].tolist() == [3, 4]

    def test_shape_mismatch(self):
        state = self.make_state()
        with pytest.raises(ValueError):
            extract_predictions(state, torch.tensor([1, 1]),
                                torch.zeros(2, 2, dtype=torch.long),
                                torch.zeros(2, 3, dtype=torch.long))


class TestPgmMdlmEquivalent:
    def test_single_step_decodes_all(self, rng):
        model = tiny_pgm()
        trace = pgm_sample_mdlm_equivalent(model, 14, 1, rng, batch_size=3, bos_id=BOS)
        assert len(trace.steps) == 1
        assert all(len(p) == 13 for p in trace.steps[0].positions)

    def test_ragged_rows_complete(self, rng):
        model = tiny_pgm()
        trace = pgm_sample_mdlm_equivalent(model, 18, 5, rng, batch_size=6, bos_id=BOS)
        assert trace.sequences.shape == (6, 18)
        assert torch.all(trace.sequences[:, 0] == BOS)
        for b in range(6):
            seen = sorted(p for rec in trace.steps for p in rec.positions[b])
            assert seen == list(range(1, 18))

    def test_reproducible(self):
        model = tiny_pgm()
        a = pgm_sample_mdlm_equivalent(model, 12, 4, torch.Generator().manual_seed(3),
                                       batch_size=4, bos_id=BOS)
        b = pgm_sample_mdlm_equivalent(model, 12, 4, torch.Generator().manual_seed(3),
                                       batch_size=4, bos_id=BOS)
        assert torch.equal(a.sequences, b.sequences)


class TestRegistry:
    def test_known_samplers_run(self, rng):
        pgm, mdlm = tiny_pgm(), tiny_mdlm()
        for name, model in (("mdlm_ancestral", mdlm), ("mdlm_confidence", mdlm),
                            ("pgm_simple", pgm), ("pgm_mdlm_equivalent", pgm),
                            ("pgm_halton", pgm)):
            fn = get_sampler(name)
            trace = fn(model, 10, 3, rng, batch_size=2, bos_id=BOS)
            assert trace.sequences.shape == (2, 10)

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            get_sampler("beam_search")

    def test_missing_bos_rejected(self, rng):
        with pytest.raises(ValueError, match="BOS"):
            get_sampler("pgm_simple")(tiny_pgm(), 10, 2, rng)


class TestGuidedSampling:
    def test_class_conditional_paths_run(self, rng):
        torch.manual_seed(0)
        model = PartitionTransformer(PartitionConfig(
            n_encoder_layers=1, n_decoder_layers=1, hidden_dim=32, n_heads=2,
            vocab_size=N, max_len=16, n_classes=3)).eval()
        trace = pgm_sample_simple(model, 10, 3, rng, guidance=(1, 2.0),
                                  nucleus_p=0.9, batch_size=2, bos_id=BOS)
        assert torch.all(trace.sequences < N)
        # two forwards per step: positions-processed doubles
        assert trace.steps[0].positions_processed == 2 * (1 + 3)

    def test_guidance_needs_conditional_model(self, rng):
        with pytest.raises(ValueError, match="class-conditional"):
            pgm_sample_simple(tiny_pgm(), 10, 3, rng, guidance=(0, 1.0),
                              batch_size=1, bos_id=BOS)
