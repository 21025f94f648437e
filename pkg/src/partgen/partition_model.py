"""The partition transformer.

Tokens carry a binary group label and the network guarantees that the
prediction at a position depends only on tokens of the *other* group:

- **Encoder**: group-wise self-attention blocks (queries attend only
  same-group keys), RoPE on queries and keys at absolute positions.
- **GroupSwap**: a cross-attention layer whose queries are built without
  looking at token values (a learned vector plus a fixed sinusoidal
  position code, layer-normed and projected), attending only
  opposite-group encoder outputs.  Optionally the queries are augmented
  with a group-wise aggregate (mean or logsumexp) of the encoder output
  of the opposite group.
- **Decoder**: cross-attention blocks over the encoder output (again
  restricted to the opposite group) with no self-attention, so at
  inference logits can be computed only at the positions being decoded.

Two entry points share the same parameters: ``forward_train`` runs every
position of a full sequence, ``predict`` runs the encoder over the clean
tokens only and the decoder over the requested target positions only.
The two agree exactly (up to float roundoff) on the rows they share.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .nn_core import (
    FeedForward,
    MultiHeadProjections,
    apply_rope,
    build_group_attention_mask,
    init_linear,
    masked_attention,
    sinusoidal_positions,
)

QUERY_MODES = ("data_independent", "logsumexp", "mean")


@dataclass
class PartitionConfig:
    """Hyperparameters of the partition transformer."""

    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    hidden_dim: int = 128
    n_heads: int = 4
    vocab_size: int = 259
    max_len: int = 64
    query_mode: str = "data_independent"
    dropout_rate: float = 0.0
    n_classes: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        if self.hidden_dim % 2 != 0:
            raise ValueError("hidden_dim must be even for the sinusoidal query table")
        if self.n_encoder_layers < 1 or self.n_decoder_layers < 1:
            raise ValueError("encoder and decoder need at least one layer each")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")


def _sinusoidal_rows(positions: torch.Tensor, H: int, dtype: torch.dtype) -> torch.Tensor:
    """Rows of the sinusoidal table gathered at arbitrary absolute positions."""
    table = sinusoidal_positions(int(positions.max().item()) + 1, H, dtype=dtype)
    return table[positions]


class EncoderBlock(nn.Module):
    """Pre-LN self-attention (group-masked) followed by a feed-forward sublayer."""

    def __init__(self, cfg: PartitionConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.ln_attn = nn.LayerNorm(H, eps=1e-5)
        self.proj = MultiHeadProjections(H, cfg.n_heads)
        self.ln_ffn = nn.LayerNorm(H, eps=1e-5)
        self.ffn = FeedForward(H, cfg.dropout_rate)
        self.dropout = cfg.dropout_rate

    def forward(self, x, positions, allow):
        h = self.ln_attn(x)
        q = apply_rope(self.proj.split_heads(self.proj.q_proj(h)), positions)
        k = apply_rope(self.proj.split_heads(self.proj.k_proj(h)), positions)
        v = self.proj.split_heads(self.proj.v_proj(h))
        ctx = masked_attention(q, k, v, allow, self.dropout, self.training)
        x = x + self.proj.out_proj(self.proj.merge_heads(ctx))
        return x + self.ffn(self.ln_ffn(x))


class CrossBlock(nn.Module):
    """Pre-LN cross-attention over the encoder output; no self-attention."""

    def __init__(self, cfg: PartitionConfig, *, with_query: bool = True):
        super().__init__()
        H = cfg.hidden_dim
        self.ln_q = nn.LayerNorm(H, eps=1e-5) if with_query else None
        self.ln_kv = nn.LayerNorm(H, eps=1e-5)
        self.proj = MultiHeadProjections(H, cfg.n_heads, with_query=with_query)
        self.ln_ffn = nn.LayerNorm(H, eps=1e-5)
        self.ffn = FeedForward(H, cfg.dropout_rate)
        self.dropout = cfg.dropout_rate

    def forward(self, stream, q_positions, enc_out, k_positions, allow, *, raw_queries=None):
        if raw_queries is None:
            q_in = self.proj.q_proj(self.ln_q(stream))
        else:
            q_in = raw_queries  # GroupSwap: the built query matrix is used directly
        q = apply_rope(self.proj.split_heads(q_in), q_positions)
        kv = self.ln_kv(enc_out)
        k = apply_rope(self.proj.split_heads(self.proj.k_proj(kv)), k_positions)
        v = self.proj.split_heads(self.proj.v_proj(kv))
        ctx = masked_attention(q, k, v, allow, self.dropout, self.training)
        out = stream + self.proj.out_proj(self.proj.merge_heads(ctx))
        return out + self.ffn(self.ln_ffn(out))


class GroupSwap(nn.Module):
    """Builds decode-stream queries and swaps information across groups."""

    def __init__(self, cfg: PartitionConfig):
        super().__init__()
        H = cfg.hidden_dim
        self.u = nn.Parameter(torch.empty(H))
        self.b = nn.Parameter(torch.zeros(H))
        self.W = nn.Linear(H, H, bias=False)
        self.ln_u = nn.LayerNorm(H, eps=1e-5, elementwise_affine=False)
        self.block = CrossBlock(cfg, with_query=False)
        self.query_mode = cfg.query_mode
        nn.init.trunc_normal_(self.u, std=0.02, a=-0.04, b=0.04)
        init_linear(self.W)

    def base_queries(self, positions: torch.Tensor) -> torch.Tensor:
        """Data-independent queries ``W [ LN(u + pos_i) + b ]``."""
        pos = _sinusoidal_rows(positions, self.u.shape[-1], self.u.dtype)
        return self.W(self.ln_u(self.u + pos) + self.b)

    @staticmethod
    def aggregate(encoder_out: torch.Tensor, member: torch.Tensor, mode: str) -> torch.Tensor:
        """Group summary vector: mean or logsumexp over member rows.

        ``member`` is a bool matrix (B, L); empty groups aggregate to zero.
        """
        B, L, H = encoder_out.shape
        counts = member.sum(dim=1, keepdim=True)
        if mode == "mean":
            total = (encoder_out * member.unsqueeze(-1)).sum(dim=1)
            return total / counts.clamp(min=1)
        if mode == "logsumexp":
            neg_inf = torch.finfo(encoder_out.dtype).min
            masked = torch.where(member.unsqueeze(-1), encoder_out, torch.full_like(encoder_out, neg_inf))
            lse = torch.logsumexp(masked, dim=1)
            return torch.where(counts > 0, lse, torch.zeros_like(lse))
        raise ValueError(f"unknown aggregation mode {mode!r}")


class PartitionTransformer(nn.Module):
    """Group-isolating encoder/GroupSwap/decoder stack over N real tokens."""

    family = "pgm"

    def __init__(self, cfg: PartitionConfig):
        super().__init__()
        self.cfg = cfg
        H = cfg.hidden_dim
        self.embed = nn.Embedding(cfg.vocab_size, H)
        nn.init.trunc_normal_(self.embed.weight, std=0.02, a=-0.04, b=0.04)
        if cfg.n_classes > 0:
            # Index n_classes is the unconditional (null) label.
            self.class_embed = nn.Embedding(cfg.n_classes + 1, H)
            nn.init.trunc_normal_(self.class_embed.weight, std=0.02, a=-0.04, b=0.04)
        else:
            self.class_embed = None
        self.encoder = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_encoder_layers))
        self.swap = GroupSwap(cfg)
        self.decoder = nn.ModuleList(CrossBlock(cfg) for _ in range(cfg.n_decoder_layers))
        self.ln_out = nn.LayerNorm(H, eps=1e-5)
        self.head = nn.Linear(H, cfg.vocab_size)
        init_linear(self.head)
        self.positions_processed = 0.0

    def reset_positions_counter(self) -> None:
        self.positions_processed = 0.0

    # ------------------------------------------------------------------
    # Shared pieces
    # ------------------------------------------------------------------

    def _embed(self, x: torch.Tensor, labels: Optional[torch.Tensor]) -> torch.Tensor:
        if torch.any(x < 0) or torch.any(x >= self.cfg.vocab_size):
            raise ValueError("token ids must lie in [0, vocab_size); no mask id exists for this model")
        h = self.embed(x)
        if self.class_embed is not None:
            if labels is None:
                labels = torch.full(x.shape[:1], self.cfg.n_classes, dtype=torch.long, device=x.device)
            h = h + self.class_embed(labels).unsqueeze(1)
        return h

    def _run_encoder(self, h, positions, allow):
        for block in self.encoder:
            h = block(h, positions, allow)
        return h

    def _decode_queries(self, q_positions, g_q, enc_out, g_enc):
        """Query matrix for the swap layer at the given target positions."""
        q = self.swap.base_queries(q_positions)
        if self.swap.query_mode != "data_independent":
            y0 = GroupSwap.aggregate(enc_out, g_enc == 0, self.swap.query_mode)
            y1 = GroupSwap.aggregate(enc_out, g_enc == 1, self.swap.query_mode)
            opposite = torch.where(g_q.unsqueeze(-1).bool(), y0.unsqueeze(1), y1.unsqueeze(1))
            q = q + opposite
        return q

    def _run_decoder(self, queries, q_positions, enc_out, k_positions, allow):
        stream = self.swap.block(stream=queries, q_positions=q_positions, enc_out=enc_out,
                                 k_positions=k_positions, allow=allow, raw_queries=queries)
        for block in self.decoder:
            stream = block(stream, q_positions, enc_out, k_positions, allow)
        return self.head(self.ln_out(stream))

    # ------------------------------------------------------------------
    # Training path: every position of a full sequence
    # ------------------------------------------------------------------

    def forward_train(
        self,
        x: torch.Tensor,
        g: torch.Tensor,
        positions: Optional[torch.Tensor] = None,
        labels: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Logits at all L positions; row i depends only on tokens with g_j != g_i.

        Args:
            x: Clean token ids ``(B, L)``.
            g: Group labels ``(B, L)`` in {0, 1}.
            positions: Absolute indices ``(B, L)`` or ``(L,)``; default arange.
            labels: Optional class labels ``(B,)``.
        """
        B, L = x.shape
        if L > self.cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        if positions is None:
            positions = torch.arange(L)
        h = self._embed(x, labels)
        same = build_group_attention_mask(g, "same_group").unsqueeze(1)
        opposite = build_group_attention_mask(g, "opposite_group").unsqueeze(1)
        enc = self._run_encoder(h, positions, same)
        queries = self._decode_queries(positions if positions.dim() > 1 else positions.unsqueeze(0).expand(B, -1),
                                       g, enc, g)
        logits = self._run_decoder(queries, positions, enc, positions, opposite)
        self.positions_processed += float(L)
        return logits

    # ------------------------------------------------------------------
    # Inference path: clean tokens in, decode-position logits out
    # ------------------------------------------------------------------

    def predict(
        self,
        x_clean: torch.Tensor,
        clean_positions: torch.Tensor,
        decode_positions: torch.Tensor,
        clean_mask: Optional[torch.Tensor] = None,
        decode_mask: Optional[torch.Tensor] = None,
        labels: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Logits at ``decode_positions`` given only the clean tokens.

        The encoder runs over the clean tokens alone (full self-attention
        among them); GroupSwap queries are built only for the decode
        positions.  Equals the matching rows of :meth:`forward_train`.

        Args:
            x_clean: Clean token ids ``(B, n_clean)``.
            clean_positions: Their absolute positions ``(B, n_clean)``.
            decode_positions: Target positions ``(B, n_decode)``.
            clean_mask: Bool ``(B, n_clean)`` marking valid entries for
                ragged batches; invalid entries are ignored entirely.
            decode_mask: Bool ``(B, n_decode)``; invalid entries are padding
                whose logits the caller discards (they are still computed,
                but the decoder has no self-attention, so they cannot leak
                into valid rows).
            labels: Optional class labels ``(B,)``.

        Returns:
            ``(B, n_decode, vocab_size)`` logits.
        """
        if decode_positions.numel() == 0 or decode_positions.shape[-1] == 0:
            raise ValueError("decode position set must be nonempty")
        if x_clean.dim() != 2 or clean_positions.shape != x_clean.shape:
            raise ValueError("x_clean and clean_positions must both be (B, n_clean)")
        B, nc = x_clean.shape
        nd = decode_positions.shape[1]
        if clean_mask is None:
            clean_mask = torch.ones(B, nc, dtype=torch.bool)
        for pos in (clean_positions, decode_positions):
            if torch.any(pos < 0) or torch.any(pos >= self.cfg.max_len):
                raise ValueError("positions must lie in [0, max_len)")
        overlap = (clean_positions.unsqueeze(2) == decode_positions.unsqueeze(1)) & clean_mask.unsqueeze(2)
        if decode_mask is not None:
            overlap = overlap & decode_mask.unsqueeze(1)
        if torch.any(overlap):
            raise ValueError("clean and decode position sets must be disjoint")

        h = self._embed(x_clean, labels)
        key_allow = clean_mask[:, None, None, :]  # every valid clean key visible
        enc = self._run_encoder(h, clean_positions, key_allow.expand(B, 1, nc, nc))

        g_dec = torch.ones(B, nd, dtype=torch.long)
        g_enc = torch.zeros(B, nc, dtype=torch.long)
        queries = self._decode_queries(decode_positions, g_dec, enc,
                                       torch.where(clean_mask, g_enc, torch.ones_like(g_enc)))
        logits = self._run_decoder(queries, decode_positions, enc, clean_positions,
                                   key_allow.expand(B, 1, nd, nc))
        self.positions_processed += float(clean_mask.sum().item()) / B + float(nd)
        return logits


def pgm_forward_train(model: PartitionTransformer, x, g, positions=None, labels=None):
    """Functional alias for :meth:`PartitionTransformer.forward_train`."""
    return model.forward_train(x, g, positions=positions, labels=labels)


def pgm_predict(model: PartitionTransformer, x_clean, clean_positions, decode_positions,
                clean_mask=None, labels=None):
    """Functional alias for :meth:`PartitionTransformer.predict`."""
    return model.predict(x_clean, clean_positions, decode_positions,
                         clean_mask=clean_mask, labels=labels)


def groupswap_queries(
    model: PartitionTransformer,
    g: torch.Tensor,
    encoder_out: Optional[torch.Tensor] = None,
    positions: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """The swap-layer query matrix for every position of a full sequence.

    In ``data_independent`` mode the result depends only on positions and
    parameters.  The data-dependent modes add the opposite group's
    aggregate of ``encoder_out`` and therefore require it.
    """
    if g.dim() == 1:
        g = g.unsqueeze(0)
    B, L = g.shape
    if positions is None:
        positions = torch.arange(L).unsqueeze(0).expand(B, -1)
    if model.swap.query_mode != "data_independent" and encoder_out is None:
        raise ValueError(f"query mode {model.swap.query_mode!r} requires encoder_out")
    if model.swap.query_mode == "data_independent":
        return model.swap.base_queries(positions)
    return model._decode_queries(positions, g, encoder_out, g)
