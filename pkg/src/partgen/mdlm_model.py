"""Bidirectional masked-diffusion baseline.

A standard pre-LN transformer with RoPE over the mask-extended vocabulary
(N real tokens plus a reserved mask id equal to N).  The output follows
the carry-over parameterization: the mask column is forced to -inf at
readout, and positions whose input token is not the mask id return a
one-hot distribution on the observed token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .nn_core import FeedForward, MultiHeadProjections, apply_rope, init_linear, masked_attention


@dataclass
class MdlmConfig:
    """Hyperparameters of the baseline denoiser.

    ``vocab_size`` counts real tokens only; the mask id is ``vocab_size``
    and the embedding table has ``vocab_size + 1`` rows.
    """

    n_layers: int = 4
    hidden_dim: int = 128
    n_heads: int = 4
    vocab_size: int = 259
    max_len: int = 64
    dropout_rate: float = 0.0
    n_classes: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")

    @property
    def mask_id(self) -> int:
        return self.vocab_size


class MdlmBlock(nn.Module):
    def __init__(self, cfg: MdlmConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.ln_attn = nn.LayerNorm(H, eps=1e-5)
        self.proj = MultiHeadProjections(H, cfg.n_heads)
        self.ln_ffn = nn.LayerNorm(H, eps=1e-5)
        self.ffn = FeedForward(H, cfg.dropout_rate)
        self.dropout = cfg.dropout_rate

    def forward(self, x, positions):
        h = self.ln_attn(x)
        q = apply_rope(self.proj.split_heads(self.proj.q_proj(h)), positions)
        k = apply_rope(self.proj.split_heads(self.proj.k_proj(h)), positions)
        v = self.proj.split_heads(self.proj.v_proj(h))
        ctx = masked_attention(q, k, v, None, self.dropout, self.training)
        x = x + self.proj.out_proj(self.proj.merge_heads(ctx))
        return x + self.ffn(self.ln_ffn(x))


class MdlmTransformer(nn.Module):
    """Full-sequence bidirectional denoiser with carry-over readout."""

    family = "mdlm"

    def __init__(self, cfg: MdlmConfig):
        super().__init__()
        self.cfg = cfg
        H = cfg.hidden_dim
        self.embed = nn.Embedding(cfg.vocab_size + 1, H)
        nn.init.trunc_normal_(self.embed.weight, std=0.02, a=-0.04, b=0.04)
        if cfg.n_classes > 0:
            self.class_embed = nn.Embedding(cfg.n_classes + 1, H)
            nn.init.trunc_normal_(self.class_embed.weight, std=0.02, a=-0.04, b=0.04)
        else:
            self.class_embed = None
        self.blocks = nn.ModuleList(MdlmBlock(cfg) for _ in range(cfg.n_layers))
        self.ln_out = nn.LayerNorm(H, eps=1e-5)
        self.head = nn.Linear(H, cfg.vocab_size + 1)
        init_linear(self.head)
        self.positions_processed = 0.0

    def reset_positions_counter(self) -> None:
        self.positions_processed = 0.0

    def forward(self, z: torch.Tensor, labels: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Carry-over logits over the N real tokens.

        Args:
            z: Token ids ``(B, L)``, mask id allowed.
            labels: Optional class labels ``(B,)``.

        Returns:
            ``(B, L, N)`` logits.  Rows at non-mask input positions are the
            exact one-hot of the observed token (0 at it, -inf elsewhere).
        """
        B, L = z.shape
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        positions = torch.arange(L)
        h = self.embed(z)
        if self.class_embed is not None:
            if labels is None:
                labels = torch.full((B,), self.cfg.n_classes, dtype=torch.long)
            h = h + self.class_embed(labels).unsqueeze(1)
        for block in self.blocks:
            h = block(h, positions)
        logits = self.head(self.ln_out(h))
        neg_inf = torch.finfo(logits.dtype).min
        # Exclude the mask token from the prediction space, then overwrite
        # unmasked rows with the exact one-hot of their input token.
        logits = logits[..., : self.cfg.vocab_size]
        clean = z != self.cfg.mask_id
        if torch.any(clean):
            carry = torch.full_like(logits, neg_inf)
            idx = torch.where(clean, z, torch.zeros_like(z))
            carry.scatter_(-1, idx.unsqueeze(-1), 0.0)
            logits = torch.where(clean.unsqueeze(-1), carry, logits)
        self.positions_processed += float(L)
        return logits


def mdlm_forward(model: MdlmTransformer, z, labels=None):
    """Functional alias for :meth:`MdlmTransformer.forward`."""
    return model(z, labels=labels)
