"""Partition transformer contracts: isolation, path equivalence, queries."""

import pytest
import torch

from partgen import (
    PartitionConfig,
    PartitionTransformer,
    groupswap_queries,
    pgm_forward_train,
    pgm_predict,
)
from partgen.nn_core import sinusoidal_positions


def tiny_model(seed=0, **overrides) -> PartitionTransformer:
    torch.manual_seed(seed)
    cfg = dict(n_encoder_layers=2, n_decoder_layers=2, hidden_dim=32, n_heads=2,
               vocab_size=17, max_len=32)
    cfg.update(overrides)
    return PartitionTransformer(PartitionConfig(**cfg)).eval()


def random_case(rng, L=12, vocab=17, avoid_degenerate=True):
    x = torch.randint(0, vocab, (1, L), generator=rng)
    while True:
        g = torch.randint(0, 2, (1, L), generator=rng)
        if not avoid_degenerate or (0 < g.sum() < L):
            return x, g


class TestIsolation:
    @pytest.mark.parametrize("mode", ["data_independent", "mean", "logsumexp"])
    def test_perturbation_never_leaks_into_own_group(self, mode):
        model = tiny_model(query_mode=mode)
        rng = torch.Generator().manual_seed(42)
        for _ in range(15):
            x, g = random_case(rng)
            with torch.no_grad():
                base = model.forward_train(x, g)
            for group in (0, 1):
                idx = (g[0] == group).nonzero().flatten()
                x2 = x.clone()
                x2[0, idx] = torch.randint(0, 17, (len(idx),), generator=rng)
                with torch.no_grad():
                    pert = model.forward_train(x2, g)
                assert float((base[0, idx] - pert[0, idx]).abs().max()) <= 1e-6

    def test_all_ones_group_is_token_independent(self):
        model = tiny_model()
        g = torch.ones(1, 10, dtype=torch.long)
        with torch.no_grad():
            a = model.forward_train(torch.randint(0, 17, (1, 10)), g)
            b = model.forward_train(torch.randint(0, 17, (1, 10)), g)
        assert torch.equal(a, b)
        assert torch.isfinite(a).all()

    def test_output_shape_and_finiteness(self, rng):
        model = tiny_model()
        x, g = random_case(rng, L=9)
        out = model.forward_train(x, g)
        assert out.shape == (1, 9, 17)
        assert torch.isfinite(out).all()


class TestPathEquivalence:
    @pytest.mark.parametrize("mode", ["data_independent", "mean", "logsumexp"])
    def test_predict_matches_sliced_train_rows(self, mode):
        model = tiny_model(query_mode=mode)
        rng = torch.Generator().manual_seed(7)
        for _ in range(10):
            x, g = random_case(rng, L=14)
            clean = (g[0] == 0).nonzero().flatten()
            dec = (g[0] == 1).nonzero().flatten()
            filler = x.clone()
            filler[0, dec] = torch.randint(0, 17, (len(dec),), generator=rng)
            with torch.no_grad():
                full = model.forward_train(filler, g)
                sub = model.predict(x[:, clean], clean.unsqueeze(0), dec.unsqueeze(0))
            ref = full[0, dec]
            rel = float((sub[0] - ref).abs().max() / ref.abs().max())
            assert rel <= 1e-5

    @pytest.mark.parametrize("n_decode", [1, 13])
    def test_extreme_decode_counts(self, n_decode):
        model = tiny_model()
        L = 14
        rng = torch.Generator().manual_seed(3)
        x = torch.randint(0, 17, (1, L), generator=rng)
        dec = torch.randperm(L - 1, generator=rng)[:n_decode] + 1
        clean = torch.tensor([i for i in range(L) if i not in set(dec.tolist())])
        g = torch.zeros(1, L, dtype=torch.long)
        g[0, dec] = 1
        with torch.no_grad():
            full = model.forward_train(x, g)
            sub = model.predict(x[:, clean], clean.unsqueeze(0), dec.unsqueeze(0).sort().values)
        ref = full[0, dec.sort().values]
        assert float((sub[0] - ref).abs().max() / ref.abs().max()) <= 1e-5

    def test_single_clean_token_shape(self):
        model = tiny_model()
        L = 10
        dec = torch.arange(1, L).unsqueeze(0)
        out = model.predict(torch.full((1, 1), 3), torch.zeros(1, 1, dtype=torch.long), dec)
        assert out.shape == (1, L - 1, 17)

    def test_cost_counter(self):
        model = tiny_model()
        model.reset_positions_counter()
        clean = torch.arange(5).unsqueeze(0)
        dec = torch.arange(5, 9).unsqueeze(0)
        model.predict(torch.randint(0, 17, (1, 5)), clean, dec)
        assert model.positions_processed == 5 + 4
        model.forward_train(torch.randint(0, 17, (1, 8)), torch.randint(0, 2, (1, 8)))
        assert model.positions_processed == 9 + 8


class TestPredictValidation:
    def test_overlap_rejected(self):
        model = tiny_model()
        clean = torch.tensor([[0, 1, 2]])
        with pytest.raises(ValueError, match="disjoint"):
            model.predict(torch.zeros(1, 3, dtype=torch.long), clean, torch.tensor([[2, 3]]))

    def test_empty_decode_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError, match="nonempty"):
            model.predict(torch.zeros(1, 2, dtype=torch.long),
                          torch.tensor([[0, 1]]), torch.empty(1, 0, dtype=torch.long))

    def test_out_of_range_positions_rejected(self):
        model = tiny_model()
        with pytest.raises(ValueError, match="max_len"):
            model.predict(torch.zeros(1, 1, dtype=torch.long),
                          torch.tensor([[0]]), torch.tensor([[99]]))

    def test_length_cap_on_train_path(self):
        model = tiny_model(max_len=8)
        with pytest.raises(ValueError, match="max_len"):
            model.forward_train(torch.zeros(1, 9, dtype=torch.long),
                                torch.zeros(1, 9, dtype=torch.long))

    def test_mask_id_rejected(self):
        model = tiny_model()
        x = torch.full((1, 4), 17)  # == vocab_size: no such token for this family
        with pytest.raises(ValueError):
            model.forward_train(x, torch.zeros(1, 4, dtype=torch.long))


class TestGroupSwapQueries:
    def test_data_independent_ignores_tokens(self):
        model = tiny_model()
        g = torch.randint(0, 2, (1, 8))
        q = groupswap_queries(model, g)
        q2 = groupswap_queries(model, 1 - g)
        assert torch.equal(q, q2)  # only positions and params matter

    def test_data_dependent_requires_encoder_out(self):
        model = tiny_model(query_mode="mean")
        with pytest.raises(ValueError, match="encoder_out"):
            groupswap_queries(model, torch.randint(0, 2, (1, 8)))

    def test_mean_mode_zero_encoder_is_identity(self):
        model = tiny_model(query_mode="mean")
        g = torch.randint(0, 2, (1, 8))
        enc = torch.zeros(1, 8, 32)
        base = model.swap.base_queries(torch.arange(8).unsqueeze(0))
        assert torch.allclose(groupswap_queries(model, g, encoder_out=enc), base)

    def test_mean_mode_singleton_groups(self):
        model = tiny_model(query_mode="mean")
        g = torch.tensor([[0, 1]])
        enc = torch.randn(1, 2, 32)
        base = model.swap.base_queries(torch.arange(2).unsqueeze(0))
        out = groupswap_queries(model, g, encoder_out=enc)
        assert torch.allclose(out[0, 0], base[0, 0] + enc[0, 1], atol=1e-6)
        assert torch.allclose(out[0, 1], base[0, 1] + enc[0, 0], atol=1e-6)

    def test_base_query_formula(self):
        model = tiny_model()
        H = model.cfg.hidden_dim
        pos_table = sinusoidal_positions(3, H)
        q = model.swap.base_queries(torch.arange(3))
        ln = model.swap.ln_u
        want = model.swap.W(ln(model.swap.u + pos_table) + model.swap.b)
        assert torch.allclose(q, want, atol=1e-6)


class TestPermutationConsistency:
    def test_permuted_inputs_permute_logits(self):
        model = tiny_model()
        rng = torch.Generator().manual_seed(5)
        L = 10
        x, g = random_case(rng, L=L)
        pos = torch.arange(L)
        with torch.no_grad():
            base = model.forward_train(x, g, positions=pos)
        perm = torch.randperm(L, generator=rng)
        with torch.no_grad():
            out = model.forward_train(x[:, perm], g[:, perm], positions=pos[perm].unsqueeze(0))
        assert torch.allclose(out[0], base[0, perm], atol=1e-5)


class TestConfigValidation:
    def test_heads_divide_hidden(self):
        with pytest.raises(ValueError):
            PartitionConfig(hidden_dim=30, n_heads=4)

    def test_layer_minimums(self):
        with pytest.raises(ValueError):
            PartitionConfig(n_encoder_layers=0)

    def test_query_mode_enum(self):
        with pytest.raises(ValueError):
            PartitionConfig(query_mode="max")


class TestGradients:
    def test_finite_difference_check(self):
        # Tiny double-precision config; deterministic corruption.
        from partgen import linear_schedule, pgm_loss

        torch.manual_seed(11)
        model = PartitionTransformer(PartitionConfig(
            n_encoder_layers=1, n_decoder_layers=1, hidden_dim=16, n_heads=2,
            vocab_size=11, max_len=8)).double()
        x = torch.randint(0, 11, (2, 8))
        g = torch.randint(0, 2, (2, 8))
        t = torch.tensor([0.4, 0.7], dtype=torch.float64)

        def f():
            return pgm_loss(x, model, linear_schedule(), t=t, g=g)

        loss = f()
        loss.backward()
        # Check the dominant component of randomly chosen parameter tensors:
        # relative comparison at step 1e-3 is ill-conditioned where the
        # gradient itself is ~0 (truncation error dominates).
        params = [p for p in model.parameters() if p.grad is not None and p.grad.abs().max() > 1e-6]
        rng = torch.Generator().manual_seed(0)
        picks = torch.randint(len(params), (8,), generator=rng)
        for pi in picks.tolist():
            p = params[pi]
            flat = p.detach().view(-1)
            idx = int(p.grad.view(-1).abs().argmax())
            h = 1e-3
            with torch.no_grad():
                orig = flat[idx].item()
                flat[idx] = orig + h
                up = float(f())
                flat[idx] = orig - h
                down = float(f())
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            grad = p.grad.view(-1)[idx].item()
            assert abs(grad - fd) / max(abs(fd), abs(grad)) < 1e-4
