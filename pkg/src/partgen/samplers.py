"""Generation procedures for both model families.

- Ancestral sampling for the masked baseline (posterior unmasking).
- Partitioned sampling: a fixed-tokens-per-step sampler that consumes a
  random (or supplied) position order, and an ancestral-equivalent
  sampler whose per-step decode counts follow the same binomial law as
  the baseline's unmasking pattern.
- Confidence-ordered decoding, Halton low-discrepancy decode order,
  classifier-free guidance, nucleus filtering.

All categorical draws go through a float64 softmax with max-subtraction,
so sampling precision never silently degrades the token distribution.
Every sampler records a :class:`SampleTrace` with per-step decoded
positions, wall time, and the number of token-positions processed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from . import schedules as sched
from .mdlm_model import MdlmTransformer
from .partition_model import PartitionTransformer


class SamplingError(RuntimeError):
    """Raised when a categorical draw is impossible (no admissible token)."""


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------


def categorical_sample(logits: torch.Tensor, rng: Optional[torch.Generator] = None) -> torch.Tensor:
    """Inverse-CDF draw from a float64 stable softmax of ``logits``.

    Args:
        logits: ``(..., N)``; ``-inf`` entries are excluded. Rows that are
            entirely ``-inf`` raise :class:`SamplingError`.

    Returns:
        Integer token ids with shape ``logits.shape[:-1]``.
    """
    x = logits.detach().to(torch.float64)
    finite = torch.isfinite(x)
    if torch.any(~finite.any(dim=-1)):
        raise SamplingError("a logit row has no finite entry to sample from")
    x = torch.where(finite, x, torch.full_like(x, float("-inf")))
    x = x - x.max(dim=-1, keepdim=True).values
    probs = torch.exp(x)
    probs = probs / probs.sum(dim=-1, keepdim=True)
    cdf = probs.cumsum(dim=-1)
    u = torch.rand(x.shape[:-1] + (1,), generator=rng, dtype=torch.float64)
    u = u * cdf[..., -1:]  # guard against cumulative rounding below 1
    return torch.searchsorted(cdf, u, right=True).squeeze(-1).clamp(max=x.shape[-1] - 1)


def cfg_combine(cond: torch.Tensor, uncond: torch.Tensor, omega: float) -> torch.Tensor:
    """Guided log-probabilities ``(1 + omega) * cond - omega * uncond``."""
    if cond.shape != uncond.shape:
        raise ValueError("conditional and unconditional rows must share a shape")
    if omega < 0:
        raise ValueError("guidance weight must be nonnegative")
    return (1.0 + omega) * cond - omega * uncond


def nucleus_filter(probabilities: torch.Tensor, p: float) -> torch.Tensor:
    """Keep the top tokens up to cumulative mass ``p``; renormalize.

    Tokens are sorted by descending probability; a token is dropped once
    the cumulative mass through it exceeds ``p`` (the argmax is always
    kept).  ``p = 1`` is the identity.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError("nucleus threshold must lie in (0, 1]")
    if p >= 1.0:
        return probabilities
    sorted_probs, order = torch.sort(probabilities, dim=-1, descending=True, stable=True)
    keep = sorted_probs.cumsum(dim=-1) <= p
    keep[..., 0] = True
    kept = torch.where(keep, sorted_probs, torch.zeros_like(sorted_probs))
    out = torch.zeros_like(probabilities)
    out.scatter_(-1, order, kept)
    return out / out.sum(dim=-1, keepdim=True)


def posterior_probs(schedule: sched.NoiseSchedule, s: float, t: float,
                    x_probs: torch.Tensor, mask_id: int) -> torch.Tensor:
    """Reverse-transition rows for currently masked positions.

    ``((1 - alpha_s) * onehot(mask) + (alpha_s - alpha_t) * x_probs) / (1 - alpha_t)``
    over the mask-extended vocabulary.  Non-mask positions keep their
    token (handled by the caller; this helper covers the masked case).
    """
    a_s = float(sched.alpha_at(schedule, s))
    a_t = float(sched.alpha_at(schedule, t))
    out = torch.zeros(x_probs.shape[:-1] + (mask_id + 1,), dtype=torch.float64)
    out[..., :mask_id] = (a_s - a_t) / (1.0 - a_t) * x_probs.to(torch.float64)
    out[..., mask_id] = (1.0 - a_s) / (1.0 - a_t)
    return out


def confidence_sample_step(
    logits: torch.Tensor,
    unmask_budget: int,
    rng: Optional[torch.Generator] = None,
    temperature: float = 0.0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Propose a token per candidate row; keep the most confident ones.

    Confidence is the predicted probability of the sampled token; with
    ``temperature > 0`` Gumbel noise scaled by the temperature is added to
    the log-confidence (off by default).  Ties break toward the lowest
    row index.

    Args:
        logits: ``(m, N)`` rows for the masked candidate positions.
        unmask_budget: Number of rows to decode this step (<= m).

    Returns:
        ``(chosen_rows, tokens)``: indices into the candidate rows and the
        sampled token for each chosen row.
    """
    m = logits.shape[0]
    if unmask_budget > m:
        raise ValueError("unmask budget exceeds the number of candidate positions")
    if unmask_budget == 0:
        return torch.empty(0, dtype=torch.long), torch.empty(0, dtype=torch.long)
    tokens = categorical_sample(logits, rng)
    logp = F.log_softmax(logits.to(torch.float64), dim=-1)
    conf = logp.gather(-1, tokens.unsqueeze(-1)).squeeze(-1)
    if temperature > 0.0:
        gumbel = -torch.log(-torch.log(torch.rand(m, generator=rng, dtype=torch.float64)))
        conf = conf + temperature * gumbel
    order = torch.argsort(-conf, stable=True)
    chosen = order[:unmask_budget]
    return chosen, tokens[chosen]


# ---------------------------------------------------------------------------
# Halton decode order
# ---------------------------------------------------------------------------


def radical_inverse(i: int, b: int) -> float:
    """Digit reversal of ``i`` in base ``b``, placed after the radix point."""
    if i < 1:
        raise ValueError("radical inverse is defined for i >= 1 here")
    if b < 2:
        raise ValueError("base must be >= 2")
    result, scale = 0.0, 1.0 / b
    while i > 0:
        result += (i % b) * scale
        i //= b
        scale /= b
    return result


def halton_schedule(H: int) -> list[tuple[int, int]]:
    """Visit order of an H x H grid from the base-2/base-3 Halton pair.

    Iterates i = 1, 2, ...; the cell ``(floor(phi_2(i) * H), floor(phi_3(i) * H))``
    is appended unless already seen, until all ``H^2`` cells are listed.
    """
    if H < 1:
        raise ValueError("grid side must be >= 1")
    seen: set[tuple[int, int]] = set()
    schedule: list[tuple[int, int]] = []
    i = 1
    while len(schedule) < H * H:
        cell = (int(radical_inverse(i, 2) * H), int(radical_inverse(i, 3) * H))
        if cell not in seen:
            seen.add(cell)
            schedule.append(cell)
        i += 1
    return schedule


def halton_position_order(L: int) -> list[int]:
    """Halton visit order flattened to ``L`` sequence positions.

    Uses the smallest square grid covering ``L`` (side ``ceil(sqrt(L))``)
    and skips cells that fall outside the sequence.
    """
    side = max(1, math.isqrt(L - 1) + 1) if L > 1 else 1
    order = [r * side + c for r, c in halton_schedule(side)]
    return [p for p in order if p < L]


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    positions: list[list[int]]  # decoded positions per batch row
    tokens: list[list[int]]
    positions_processed: float  # per-sequence token-positions this step
    duration_s: float

    @property
    def n_decoded(self) -> float:
        return sum(len(p) for p in self.positions) / max(1, len(self.positions))


@dataclass
class SampleTrace:
    """Per-step record of a sampling run plus the final sequences."""

    sampler: str
    L: int
    batch_size: int
    steps: list[StepRecord] = field(default_factory=list)
    sequences: Optional[torch.Tensor] = None

    def total_positions_processed(self) -> float:
        return sum(rec.positions_processed for rec in self.steps)

    def total_duration_s(self) -> float:
        return sum(rec.duration_s for rec in self.steps)


def count_token_positions(trace: SampleTrace) -> float:
    """Token-positions processed per sequence over the whole run."""
    return trace.total_positions_processed()


def write_trace_csv(trace: SampleTrace, path) -> None:
    with open(path, "w") as f:
        f.write("step,n_decoded,positions_processed,ms\n")
        for rec in trace.steps:
            f.write(f"{rec.step},{rec.n_decoded:g},{rec.positions_processed:g},{rec.duration_s * 1e3:.3f}\n")


def write_samples(path, sequences: torch.Tensor, *, as_bytes: bool = False,
                  byte_specials: Optional[dict[str, int]] = None) -> None:
    """One sequence per line: space-separated ids, or decoded UTF-8 bytes."""
    with open(path, "w", newline="") as f:
        for row in sequences.tolist():
            if as_bytes:
                specials = byte_specials or {}
                drop = {specials.get("bos", -1), specials.get("eos", -1)}
                raw = bytes(tok for tok in row if tok < 256 and tok not in drop)
                f.write(raw.decode("utf-8", errors="replace") + "\n")
            else:
                f.write(" ".join(str(tok) for tok in row) + "\n")


# ---------------------------------------------------------------------------
# Guidance / precision plumbing
# ---------------------------------------------------------------------------


def _guided_log_probs(cond_logits, uncond_logits, omega, nucleus_p):
    lp = F.log_softmax(cond_logits.to(torch.float64), dim=-1)
    if uncond_logits is not None:
        lp_u = F.log_softmax(uncond_logits.to(torch.float64), dim=-1)
        lp = cfg_combine(lp, lp_u, omega)
    if nucleus_p is not None:
        probs = F.softmax(lp, dim=-1)
        probs = nucleus_filter(probs, nucleus_p)
        lp = torch.where(probs > 0, probs.log(), torch.full_like(probs, float("-inf")))
    return lp


def _labels_for(model, guidance, B):
    if guidance is None:
        return None, None
    if getattr(model, "class_embed", None) is None:
        raise ValueError("guidance requires a class-conditional model")
    label, _ = guidance
    cond = torch.full((B,), int(label), dtype=torch.long)
    uncond = torch.full((B,), model.cfg.n_classes, dtype=torch.long)
    return cond, uncond


# ---------------------------------------------------------------------------
# Baseline samplers
# ---------------------------------------------------------------------------


def _uniform_grid(T: int) -> list[tuple[float, float]]:
    """(t, s) pairs walking 1 -> 0 in T uniform steps."""
    return [(i / T, (i - 1) / T) for i in range(T, 0, -1)]


def mdlm_ancestral_sample(
    model: MdlmTransformer,
    L: int,
    T: int,
    rng: Optional[torch.Generator] = None,
    guidance: Optional[tuple[int, float]] = None,
    nucleus_p: Optional[float] = None,
    *,
    batch_size: int = 1,
    schedule: Optional[sched.NoiseSchedule] = None,
) -> SampleTrace:
    """Posterior unmasking from the all-mask sequence over T uniform steps.

    At each step a masked position resolves with probability
    ``(alpha_s - alpha_t) / (1 - alpha_t)``; non-mask positions copy
    themselves.  The final step (s = 0) resolves every remaining mask.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    schedule = schedule or sched.linear_schedule()
    mask_id = model.cfg.mask_id
    z = torch.full((batch_size, L), mask_id, dtype=torch.long)
    cond_labels, uncond_labels = _labels_for(model, guidance, batch_size)
    omega = guidance[1] if guidance is not None else 0.0
    trace = SampleTrace(sampler="mdlm_ancestral", L=L, batch_size=batch_size)
    model.reset_positions_counter()
    for step, (t, s) in enumerate(_uniform_grid(T)):
        tic = time.perf_counter()
        before = model.positions_processed
        with torch.no_grad():
            logits = model(z, labels=cond_labels) if cond_labels is not None else model(z)
            logits_u = model(z, labels=uncond_labels) if uncond_labels is not None else None
        lp = _guided_log_probs(logits, logits_u, omega, nucleus_p)
        a_s = float(sched.alpha_at(schedule, s))
        a_t = float(sched.alpha_at(schedule, t))
        p_unmask = (a_s - a_t) / (1.0 - a_t)
        masked = z == mask_id
        flip = masked & (torch.rand(z.shape, generator=rng, dtype=torch.float64) < p_unmask)
        if torch.any(flip):
            z[flip] = categorical_sample(lp[flip], rng)
        processed = model.positions_processed - before
        rows = [torch.nonzero(flip[b]).flatten().tolist() for b in range(batch_size)]
        toks = [z[b, flip[b]].tolist() for b in range(batch_size)]
        trace.steps.append(StepRecord(step, rows, toks, processed, time.perf_counter() - tic))
    trace.sequences = z
    return trace


def maskgit_budget_schedule(L: int, T: int) -> list[int]:
    """Per-step unmask budgets from the cosine masking schedule."""
    targets = [int(round(L * math.cos(math.pi / 2 * i / T))) for i in range(1, T + 1)]
    targets[-1] = 0
    budgets, prev = [], L
    for tgt in targets:
        budgets.append(max(0, prev - tgt))
        prev = min(prev, tgt)
    return budgets


def mdlm_confidence_sample(
    model: MdlmTransformer,
    L: int,
    T: int,
    rng: Optional[torch.Generator] = None,
    guidance: Optional[tuple[int, float]] = None,
    nucleus_p: Optional[float] = None,
    *,
    batch_size: int = 1,
    temperature: float = 0.0,
) -> SampleTrace:
    """Confidence-ordered parallel decoding with a cosine budget schedule."""
    if T < 1:
        raise ValueError("T must be >= 1")
    mask_id = model.cfg.mask_id
    z = torch.full((batch_size, L), mask_id, dtype=torch.long)
    cond_labels, uncond_labels = _labels_for(model, guidance, batch_size)
    omega = guidance[1] if guidance is not None else 0.0
    budgets = maskgit_budget_schedule(L, T)
    trace = SampleTrace(sampler="mdlm_confidence", L=L, batch_size=batch_size)
    model.reset_positions_counter()
    for step, budget in enumerate(budgets):
        tic = time.perf_counter()
        before = model.positions_processed
        with torch.no_grad():
            logits = model(z, labels=cond_labels) if cond_labels is not None else model(z)
            logits_u = model(z, labels=uncond_labels) if uncond_labels is not None else None
        lp = _guided_log_probs(logits, logits_u, omega, nucleus_p)
        rows, toks = [], []
        for b in range(batch_size):
            masked_idx = torch.nonzero(z[b] == mask_id).flatten()
            take = min(budget, len(masked_idx))
            chosen, tokens = confidence_sample_step(lp[b, masked_idx], take, rng, temperature)
            pos = masked_idx[chosen]
            z[b, pos] = tokens
            rows.append(pos.tolist())
            toks.append(tokens.tolist())
        trace.steps.append(StepRecord(step, rows, toks, model.positions_processed - before,
                                      time.perf_counter() - tic))
    trace.sequences = z
    return trace


# ---------------------------------------------------------------------------
# Partitioned samplers
# ---------------------------------------------------------------------------


def _row_permutations(batch_size: int, L: int, rng) -> torch.Tensor:
    """(B, L-1) independent permutations of positions 1..L-1."""
    keys = torch.rand(batch_size, L - 1, generator=rng)
    return 1 + torch.argsort(keys, dim=-1)


def pgm_sample_simple(
    model: PartitionTransformer,
    L: int,
    K: int,
    rng: Optional[torch.Generator] = None,
    guidance: Optional[tuple[int, float]] = None,
    nucleus_p: Optional[float] = None,
    *,
    batch_size: int = 1,
    bos_id: int,
    order: Optional[torch.Tensor] = None,
) -> SampleTrace:
    """Fixed-tokens-per-step decoding in a random (or given) position order.

    Position 0 is the BOS anchor; a permutation of positions 1..L-1 is
    consumed ``ceil((L-1)/K)`` entries per step (the final step takes the
    remainder), each step conditioning only on the tokens decoded so far.

    Args:
        order: Optional decode order, shape ``(L-1,)`` shared across rows
            or ``(B, L-1)`` per row; defaults to fresh random permutations.
    """
    if K < 1 or K > L - 1:
        raise ValueError("K must lie in [1, L-1]")
    if order is None:
        order = _row_permutations(batch_size, L, rng)
    else:
        order = torch.as_tensor(order, dtype=torch.long)
        if order.dim() == 1:
            order = order.unsqueeze(0).expand(batch_size, -1)
        if order.shape != (batch_size, L - 1):
            raise ValueError("order must cover positions 1..L-1 for every row")
    k = math.ceil((L - 1) / K)
    cond_labels, uncond_labels = _labels_for(model, guidance, batch_size)
    omega = guidance[1] if guidance is not None else 0.0
    x = torch.full((batch_size, 1), bos_id, dtype=torch.long)
    positions = torch.zeros(batch_size, 1, dtype=torch.long)
    trace = SampleTrace(sampler="pgm_simple", L=L, batch_size=batch_size)
    model.reset_positions_counter()
    consumed = 0
    for step in range(K):
        tic = time.perf_counter()
        before = model.positions_processed
        target = order[:, consumed: consumed + k]
        if target.shape[1] == 0:
            break
        consumed += target.shape[1]
        with torch.no_grad():
            logits = model.predict(x, positions, target, labels=cond_labels)
            logits_u = model.predict(x, positions, target, labels=uncond_labels) \
                if uncond_labels is not None else None
        lp = _guided_log_probs(logits, logits_u, omega, nucleus_p)
        tokens = categorical_sample(lp, rng)
        x = torch.cat([x, tokens], dim=1)
        positions = torch.cat([positions, target], dim=1)
        trace.steps.append(StepRecord(step, [r.tolist() for r in target],
                                      [r.tolist() for r in tokens],
                                      model.positions_processed - before,
                                      time.perf_counter() - tic))
    out = torch.zeros(batch_size, L, dtype=torch.long)
    out.scatter_(1, positions, x)
    trace.sequences = out
    return trace


@dataclass
class PgmSampleState:
    """Running state of the ancestral-equivalent partitioned sampler."""

    x: torch.Tensor                 # (B, cur_len) decoded token values
    clean_positions: torch.Tensor   # (B, cur_len) their absolute positions
    concrete_lengths: torch.Tensor  # (B,) valid prefix length per row
    noisy_positions: torch.Tensor   # (B, L-1) per-row queue of undecoded positions
    noisy_lengths: torch.Tensor     # (B,) remaining entries in each queue


def sample_noisy(
    noisy_positions: torch.Tensor,
    prob_denoise: float,
    noisy_lengths: torch.Tensor,
    rng: Optional[torch.Generator] = None,
):
    """Choose how many queue entries each row decodes this step.

    Each still-noisy position resolves independently with probability
    ``prob_denoise``, so the per-row count is binomial in the remaining
    queue length (and can never exceed it).  The returned position slice
    is padded to the batch maximum; padded predictions are discarded.

    Returns:
        ``(counts, slice, slice_mask)`` with ``slice`` of shape
        ``(B, max(counts))``, or ``(counts, None, None)`` when no row
        decodes anything.
    """
    if not 0.0 <= prob_denoise <= 1.0:
        raise ValueError("prob_denoise must lie in [0, 1]")
    B, W = noisy_positions.shape
    valid = torch.arange(W).unsqueeze(0) < noisy_lengths.unsqueeze(1)
    hits = (torch.rand(B, W, generator=rng, dtype=torch.float64) < prob_denoise) & valid
    counts = hits.sum(dim=1)
    width = int(counts.max().item())
    if width == 0:
        return counts, None, None
    cols = torch.arange(width).unsqueeze(0)
    slice_mask = cols < noisy_lengths.unsqueeze(1)
    padded = noisy_positions[:, :width].clone()
    padded[~slice_mask] = 0  # placeholder positions; predictions are dropped
    return counts, padded, slice_mask


def extract_predictions(
    state: PgmSampleState,
    counts: torch.Tensor,
    noisy_pos_input: torch.Tensor,
    predicted_values: torch.Tensor,
) -> PgmSampleState:
    """Append exactly ``counts[i]`` decoded tokens per row and pop queues.

    Rows needing fewer tokens than the padded slice width simply discard
    the excess predictions.  Ragged batches are padded with zeros.
    """
    if noisy_pos_input.shape != predicted_values.shape:
        raise ValueError("predictions must align with the padded position slice")
    B = state.x.shape[0]
    new_lengths = state.concrete_lengths + counts
    pad = int(new_lengths.max().item()) - state.x.shape[1]
    x, clean = state.x, state.clean_positions
    if pad > 0:
        zeros = torch.zeros(B, pad, dtype=torch.long)
        x = torch.cat([x, zeros], dim=1)
        clean = torch.cat([clean, zeros], dim=1)
    noisy = state.noisy_positions.clone()
    for i in range(B):
        c = int(counts[i].item())
        if c == 0:
            continue
        lo = int(state.concrete_lengths[i].item())
        x[i, lo: lo + c] = predicted_values[i, :c]
        clean[i, lo: lo + c] = noisy_pos_input[i, :c]
        remaining = int(state.noisy_lengths[i].item()) - c
        noisy[i, :remaining] = state.noisy_positions[i, c: c + remaining]
    return PgmSampleState(
        x=x, clean_positions=clean, concrete_lengths=new_lengths,
        noisy_positions=noisy, noisy_lengths=state.noisy_lengths - counts,
    )


def pgm_sample_mdlm_equivalent(
    model: PartitionTransformer,
    L: int,
    T: int,
    rng: Optional[torch.Generator] = None,
    guidance: Optional[tuple[int, float]] = None,
    nucleus_p: Optional[float] = None,
    *,
    batch_size: int = 1,
    bos_id: int,
    schedule: Optional[sched.NoiseSchedule] = None,
) -> SampleTrace:
    """Ancestral-equivalent partitioned sampling.

    Per step, each undecoded position resolves with the posterior
    probability ``(alpha_s - alpha_t)/(1 - alpha_t)``, exactly matching
    the unmasking law of :func:`mdlm_ancestral_sample`, but the model
    processes only the already-decoded tokens plus the chosen targets.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    schedule = schedule or sched.linear_schedule()
    cond_labels, uncond_labels = _labels_for(model, guidance, batch_size)
    omega = guidance[1] if guidance is not None else 0.0
    state = PgmSampleState(
        x=torch.full((batch_size, 1), bos_id, dtype=torch.long),
        clean_positions=torch.zeros(batch_size, 1, dtype=torch.long),
        concrete_lengths=torch.ones(batch_size, dtype=torch.long),
        noisy_positions=_row_permutations(batch_size, L, rng),
        noisy_lengths=torch.full((batch_size,), L - 1, dtype=torch.long),
    )
    trace = SampleTrace(sampler="pgm_mdlm_equivalent", L=L, batch_size=batch_size)
    model.reset_positions_counter()
    for step, (t, s) in enumerate(_uniform_grid(T)):
        tic = time.perf_counter()
        before = model.positions_processed
        a_s = float(sched.alpha_at(schedule, s))
        a_t = float(sched.alpha_at(schedule, t))
        p_step = (a_s - a_t) / (1.0 - a_t)
        counts, pos_slice, slice_mask = sample_noisy(state.noisy_positions, p_step,
                                                     state.noisy_lengths, rng)
        if pos_slice is None:
            trace.steps.append(StepRecord(step, [[] for _ in range(batch_size)],
                                          [[] for _ in range(batch_size)], 0.0,
                                          time.perf_counter() - tic))
            continue
        W = state.x.shape[1]
        clean_mask = torch.arange(W).unsqueeze(0) < state.concrete_lengths.unsqueeze(1)
        with torch.no_grad():
            logits = model.predict(state.x, state.clean_positions, pos_slice,
                                   clean_mask=clean_mask, decode_mask=slice_mask,
                                   labels=cond_labels)
            logits_u = model.predict(state.x, state.clean_positions, pos_slice,
                                     clean_mask=clean_mask, decode_mask=slice_mask,
                                     labels=uncond_labels) if uncond_labels is not None else None
        lp = _guided_log_probs(logits, logits_u, omega, nucleus_p)
        tokens = categorical_sample(lp, rng)
        rows = [pos_slice[b, :counts[b]].tolist() for b in range(batch_size)]
        toks = [tokens[b, :counts[b]].tolist() for b in range(batch_size)]
        state = extract_predictions(state, counts, pos_slice, tokens)
        trace.steps.append(StepRecord(step, rows, toks, model.positions_processed - before,
                                      time.perf_counter() - tic))
    if torch.any(state.noisy_lengths != 0):
        raise RuntimeError("sampler finished with undecoded positions")
    out = torch.zeros(batch_size, L, dtype=torch.long)
    out.scatter_(1, state.clean_positions, state.x)
    trace.sequences = out
    return trace


def pgm_sample_halton(
    model: PartitionTransformer,
    L: int,
    K: int,
    rng: Optional[torch.Generator] = None,
    guidance: Optional[tuple[int, float]] = None,
    nucleus_p: Optional[float] = None,
    *,
    batch_size: int = 1,
    bos_id: int,
) -> SampleTrace:
    """Fixed-k partitioned decoding in the Halton low-discrepancy order."""
    order = [p for p in halton_position_order(L) if p != 0]
    trace = pgm_sample_simple(model, L, K, rng, guidance, nucleus_p,
                              batch_size=batch_size, bos_id=bos_id,
                              order=torch.tensor(order, dtype=torch.long))
    trace.sampler = "pgm_halton"
    return trace


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

_SAMPLERS = {
    "mdlm_ancestral": (mdlm_ancestral_sample, False),
    "mdlm_confidence": (mdlm_confidence_sample, False),
    "pgm_simple": (pgm_sample_simple, True),
    "pgm_mdlm_equivalent": (pgm_sample_mdlm_equivalent, True),
    "pgm_halton": (pgm_sample_halton, True),
}


def sampler_names() -> list[str]:
    return sorted(_SAMPLERS)


def get_sampler(name: str):
    """Uniform-signature sampler: fn(model, L, steps, rng, **options)."""
    try:
        fn, needs_bos = _SAMPLERS[name]
    except KeyError:
        raise ValueError(f"unknown sampler {name!r}; choose from {sampler_names()}")

    def run(model, L, steps, rng=None, *, guidance=None, nucleus_p=None,
            batch_size=1, bos_id=None, **kw):
        if needs_bos:
            if bos_id is None:
                raise ValueError(f"sampler {name!r} needs a BOS token id")
            return fn(model, L, steps, rng, guidance, nucleus_p,
                      batch_size=batch_size, bos_id=bos_id, **kw)
        return fn(model, L, steps, rng, guidance, nucleus_p,
                  batch_size=batch_size, **kw)

    return run
