"""Shared transformer building blocks: positions, RoPE, masked attention.

Attention here is a plain matmul/softmax implementation with an optional
boolean allow-mask.  Disallowed keys receive weight exactly 0 (the score
is set to -inf before the softmax), which makes group isolation exact:
changing a value vector whose weight is 0 cannot change the output bits.
Query rows with no allowed key at all output a zero context vector.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_positions(L: int, H: int, *, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Fixed positional table: cos terms in the first half, sin in the second.

    Entry ``(i, j)`` is ``cos(i / 10000^(2j/H))`` for ``j < H/2`` and
    ``sin(i / 10000^(2j/H - 1))`` otherwise, so row 0 is ``[1,...,1,0,...,0]``.

    Raises:
        ValueError: If ``H`` is odd.
    """
    if H % 2 != 0:
        raise ValueError("sinusoidal positional encoding requires an even dimension")
    i = torch.arange(L, dtype=torch.float64).unsqueeze(1)
    j = torch.arange(H, dtype=torch.float64).unsqueeze(0)
    half = H // 2
    exponent = torch.where(j < half, 2.0 * j / H, 2.0 * j / H - 1.0)
    angles = i / torch.pow(10000.0, exponent)
    table = torch.where(j < half, torch.cos(angles), torch.sin(angles))
    return table.to(dtype)


def build_group_attention_mask(
    g_q: torch.Tensor,
    mode: str,
    g_k: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Boolean allow-matrix from group labels.

    ``same_group`` allows query i to attend key j iff ``g_i == g_j``;
    ``opposite_group`` iff ``g_i != g_j``.  The union of the two modes
    covers every (i, j) pair.

    Args:
        g_q: Query-side labels, shape ``(..., Lq)``.
        mode: ``"same_group"`` or ``"opposite_group"``.
        g_k: Key-side labels ``(..., Lk)``; defaults to ``g_q``.

    Returns:
        Bool tensor of shape ``(..., Lq, Lk)``.
    """
    if g_q.numel() == 0:
        raise ValueError("group assignment must be nonempty")
    g_k = g_q if g_k is None else g_k
    eq = g_q.unsqueeze(-1) == g_k.unsqueeze(-2)
    if mode == "same_group":
        return eq
    if mode == "opposite_group":
        return ~eq
    raise ValueError(f"unknown attention mask mode {mode!r}")


def rope_angles(positions: torch.Tensor, d_head: int, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """(cos, sin) tables for rotary embedding at the given absolute positions.

    Args:
        positions: Integer positions, shape ``(..., L)``.
        d_head: Per-head dimension (must be even).

    Returns:
        Two tensors of shape ``(..., L, d_head)``.
    """
    if d_head % 2 != 0:
        raise ValueError("rotary embedding requires an even head dimension")
    inv_freq = 1.0 / (10000.0 ** (torch.arange(0, d_head, 2, dtype=torch.float64) / d_head))
    theta = positions.to(torch.float64).unsqueeze(-1) * inv_freq
    theta = torch.cat([theta, theta], dim=-1)
    return torch.cos(theta).to(dtype), torch.sin(theta).to(dtype)


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    return torch.cat([-x[..., half:], x[..., :half]], dim=-1)


def apply_rope(x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Rotate query/key heads by their absolute positions.

    Args:
        x: ``(B, n_heads, L, d_head)``.
        positions: ``(L,)`` or ``(B, L)`` integer absolute indices.
    """
    cos, sin = rope_angles(positions, x.shape[-1], x.dtype)
    if cos.dim() == 2:  # (L, d) -> broadcast over batch and heads
        cos, sin = cos.unsqueeze(0).unsqueeze(0), sin.unsqueeze(0).unsqueeze(0)
    else:  # (B, L, d) -> broadcast over heads
        cos, sin = cos.unsqueeze(1), sin.unsqueeze(1)
    return x * cos + _rotate_half(x) * sin


def masked_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    allow: Optional[torch.Tensor],
    dropout: float = 0.0,
    training: bool = False,
) -> torch.Tensor:
    """Scaled dot-product attention with an optional boolean allow-mask.

    Args:
        q, k, v: ``(B, n_heads, Lq/Lk, d_head)``.
        allow: ``(B, 1 or n_heads, Lq, Lk)`` bool, or None for full attention.

    Returns:
        ``(B, n_heads, Lq, d_head)``; rows with no allowed key are zero.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = torch.matmul(q, k.transpose(-1, -2)) * scale
    if allow is None:
        attn = F.softmax(scores, dim=-1)
        if dropout > 0.0 and training:
            attn = F.dropout(attn, p=dropout, training=True)
        return torch.matmul(attn, v)
    neg_inf = torch.finfo(scores.dtype).min
    has_key = allow.any(dim=-1, keepdim=True)
    masked = torch.where(allow, scores, torch.full_like(scores, neg_inf))
    # Keyless rows get uniform finite scores so the softmax stays NaN-free;
    # their output is zeroed below.
    safe = torch.where(has_key, masked, torch.zeros_like(scores))
    attn = F.softmax(safe, dim=-1)
    if dropout > 0.0 and training:
        attn = F.dropout(attn, p=dropout, training=True)
    out = torch.matmul(attn, v)
    return torch.where(has_key, out, torch.zeros_like(out))


def init_linear(module: nn.Linear) -> None:
    """Truncated-normal (std 0.02) weights, zero bias."""
    nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04)
    if module.bias is not None:
        nn.init.zeros_(module.bias)


class FeedForward(nn.Module):
    """Position-wise MLP with x4 expansion and GELU."""

    def __init__(self, hidden_dim: int, dropout: float = 0.0):
        super().__init__()
        self.up = nn.Linear(hidden_dim, 4 * hidden_dim)
        self.down = nn.Linear(4 * hidden_dim, hidden_dim)
        self.dropout = dropout
        init_linear(self.up)
        init_linear(self.down)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.up(x))
        if self.dropout > 0.0 and self.training:
            h = F.dropout(h, p=self.dropout, training=True)
        return self.down(h)


class MultiHeadProjections(nn.Module):
    """The q/k/v/out projections of one attention sublayer."""

    def __init__(self, hidden_dim: int, n_heads: int, *, with_query: bool = True):
        super().__init__()
        if hidden_dim % n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = hidden_dim // n_heads
        self.q_proj = nn.Linear(hidden_dim, hidden_dim) if with_query else None
        self.k_proj = nn.Linear(hidden_dim, hidden_dim)
        self.v_proj = nn.Linear(hidden_dim, hidden_dim)
        self.out_proj = nn.Linear(hidden_dim, hidden_dim)
        for m in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            if m is not None:
                init_linear(m)

    def split_heads(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, self.d_head).transpose(1, 2)

    def merge_heads(self, x: torch.Tensor) -> torch.Tensor:
        B, h, L, d = x.shape
        return x.transpose(1, 2).reshape(B, L, h * d)
