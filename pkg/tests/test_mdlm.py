"""Baseline denoiser: carry-over readout and gradient correctness."""

import pytest
import torch
import torch.nn.functional as F

from partgen import MdlmConfig, MdlmTransformer, linear_schedule, mdlm_forward, mgm_loss


def tiny_mdlm(seed=0, **overrides) -> MdlmTransformer:
    torch.manual_seed(seed)
    cfg = dict(n_layers=2, hidden_dim=32, n_heads=2, vocab_size=17, max_len=32)
    cfg.update(overrides)
    return MdlmTransformer(MdlmConfig(**cfg)).eval()


class TestCarryOver:
    def test_fully_clean_input_is_one_hot(self, rng):
        model = tiny_mdlm()
        z = torch.randint(0, 17, (2, 10), generator=rng)
        probs = F.softmax(model(z), dim=-1)
        want = F.one_hot(z, 17).to(probs.dtype)
        assert torch.allclose(probs, want)

    def test_partial_mask_clean_rows_exact(self, rng):
        model = tiny_mdlm()
        z = torch.randint(0, 17, (1, 12), generator=rng)
        z[0, 3] = model.cfg.mask_id
        z[0, 8] = model.cfg.mask_id
        probs = F.softmax(model(z), dim=-1)
        clean = torch.tensor([i for i in range(12) if i not in (3, 8)])
        assert torch.allclose(probs[0, clean],
                              F.one_hot(z[0, clean], 17).to(probs.dtype))

    def test_rows_normalize_and_exclude_mask(self, rng):
        model = tiny_mdlm()
        z = torch.full((1, 6), model.cfg.mask_id)
        logits = model(z)
        assert logits.shape == (1, 6, 17)  # the mask column is gone entirely
        assert torch.isfinite(logits).all()
        probs = F.softmax(logits, dim=-1)
        assert torch.allclose(probs.sum(-1), torch.ones(1, 6))

    def test_length_cap(self):
        model = tiny_mdlm(max_len=8)
        with pytest.raises(ValueError, match="max_len"):
            model(torch.zeros(1, 9, dtype=torch.long))


class TestMdlmGradients:
    def test_finite_difference_check(self):
        torch.manual_seed(4)
        model = MdlmTransformer(MdlmConfig(n_layers=1, hidden_dim=16, n_heads=2,
                                           vocab_size=11, max_len=8)).double()
        x = torch.randint(0, 11, (2, 8))
        t = torch.tensor([0.35, 0.6], dtype=torch.float64)
        mask_rng_seed = 21

        def f():
            rng = torch.Generator().manual_seed(mask_rng_seed)
            return mgm_loss(x, model, linear_schedule(), rng, t=t)

        loss = f()
        loss.backward()
        params = [p for p in model.parameters() if p.grad is not None and p.grad.abs().max() > 1e-6]
        rng = torch.Generator().manual_seed(0)
        for pi in torch.randint(len(params), (6,), generator=rng).tolist():
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

    def test_mask_id_property(self):
        cfg = MdlmConfig(vocab_size=100)
        assert cfg.mask_id == 100
