"""Noise schedules, loss weights, group assignment, and mask corruption.

This is the stochastic preprocessing shared by training and sampling.
A schedule is a pair ``(alpha(t), alpha_prime(t))`` with ``alpha(0) = 1``,
``alpha(1) = 0`` and ``alpha`` strictly decreasing on ``[0, 1]``.  At time
``t``, each position is independently corrupted (masked, or assigned to
group 1) with probability ``1 - alpha(t)``.

Two interchangeable corruption views are provided:

- **Masking**: corrupted positions are replaced by a reserved mask id
  (vocabulary extended from ``N`` to ``N + 1``).
- **Group assignment**: positions get a binary label ``g in {0, 1}``; no
  third token state exists.  Group 1 plays the role of the masked set.

Both views consume the underlying Bernoulli draw identically, so with a
shared seed and time they produce the same pattern (group 1 <-> masked).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch

# Times are clamped into [TIME_EPS, 1 - TIME_EPS] before weight evaluation
# to avoid the 1/t singularity of the linear-schedule loss weight.
TIME_EPS = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    """A corruption schedule ``alpha`` with its derivative.

    Attributes:
        kind: Schedule name, one of ``"linear"`` or ``"log_linear"``.
        alpha: Map ``t in [0, 1] -> alpha(t) in [0, 1]``, strictly decreasing,
            with ``alpha(0) = 1`` and ``alpha(1) = 0``.
        alpha_prime: Derivative of ``alpha`` (negative on ``(0, 1)``).
    """

    kind: str
    alpha: Callable[[torch.Tensor], torch.Tensor]
    alpha_prime: Callable[[torch.Tensor], torch.Tensor]


def linear_schedule() -> NoiseSchedule:
    """The default schedule ``alpha(t) = 1 - t`` (loss weight ``1/t``)."""
    return NoiseSchedule(
        kind="linear",
        alpha=lambda t: 1.0 - t,
        alpha_prime=lambda t: torch.full_like(torch.as_tensor(t, dtype=torch.float64), -1.0),
    )


def log_linear_schedule() -> NoiseSchedule:
    """``alpha(t) = 1 - log(1 + (e - 1) t)``: log-spaced corruption growth."""
    c = math.e - 1.0

    def alpha(t: torch.Tensor) -> torch.Tensor:
        return 1.0 - torch.log1p(c * t)

    def alpha_prime(t: torch.Tensor) -> torch.Tensor:
        return -c / (1.0 + c * t)

    return NoiseSchedule(kind="log_linear", alpha=alpha, alpha_prime=alpha_prime)


_SCHEDULES = {"linear": linear_schedule, "log_linear": log_linear_schedule}


def get_schedule(kind: str) -> NoiseSchedule:
    """Look up a schedule by name."""
    try:
        return _SCHEDULES[kind]()
    except KeyError:
        raise ValueError(f"unknown schedule kind {kind!r}; choose from {sorted(_SCHEDULES)}")


def _as_time_tensor(t) -> torch.Tensor:
    return torch.as_tensor(t, dtype=torch.float64)


def alpha_at(schedule: NoiseSchedule, t) -> torch.Tensor:
    """Evaluate ``alpha(t)``.

    Args:
        schedule: The noise schedule.
        t: Scalar or tensor of times in ``[0, 1]``.

    Returns:
        ``alpha(t)`` as a float64 tensor with the shape of ``t``.

    Raises:
        ValueError: If any time lies outside ``[0, 1]``.
    """
    t = _as_time_tensor(t)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("time must lie in [0, 1]")
    return schedule.alpha(t)


def clamp_time(t) -> torch.Tensor:
    """Clamp times into ``[TIME_EPS, 1 - TIME_EPS]``."""
    return _as_time_tensor(t).clamp(TIME_EPS, 1.0 - TIME_EPS)


def loss_weight_mgm(schedule: NoiseSchedule, t, *, clamp: bool = True) -> torch.Tensor:
    """Per-time loss weight ``|alpha'(t)| / (1 - alpha(t))``.

    For the linear schedule this is ``1/t``.  The sign convention follows
    the requirement that the minimized objective be nonnegative.

    Args:
        schedule: The noise schedule.
        t: Times in ``(0, 1]`` (``t = 0`` is only valid with clamping).
        clamp: Clamp ``t`` into ``[TIME_EPS, 1 - TIME_EPS]`` first.

    Raises:
        ValueError: If ``clamp`` is off and any ``t`` is below ``TIME_EPS``
            (the weight is singular at ``t = 0``).
    """
    t = _as_time_tensor(t)
    if clamp:
        t = clamp_time(t)
    elif torch.any(t < TIME_EPS):
        raise ValueError("loss weight is singular at t=0; enable clamping or keep t >= TIME_EPS")
    return schedule.alpha_prime(t).abs() / (1.0 - schedule.alpha(t))


def loss_weight_pgm(
    g: torch.Tensor,
    schedule: NoiseSchedule,
    t,
    *,
    convention: str = "prose",
) -> torch.Tensor:
    """Per-position loss weights for two-group training.

    Positions in group 1 (the masked-role group) receive the weight at
    time ``t``; positions in group 0 receive the weight at the mirrored
    time ``1 - t``.  ``convention="swapped"`` exchanges the two roles for
    A/B comparison.

    Args:
        g: Binary group labels, shape ``(..., L)``.
        schedule: The noise schedule.
        t: Times, broadcastable against ``g``'s leading dims (scalar or
            one per sequence).
        convention: ``"prose"`` (default) or ``"swapped"``.

    Returns:
        Float64 weight tensor shaped like ``g``.
    """
    if convention not in ("prose", "swapped"):
        raise ValueError(f"unknown weight convention {convention!r}")
    t = clamp_time(t)
    w_t = loss_weight_mgm(schedule, t)
    w_mirror = loss_weight_mgm(schedule, 1.0 - t)
    while w_t.dim() < g.dim():
        w_t = w_t.unsqueeze(-1)
        w_mirror = w_mirror.unsqueeze(-1)
    g_bool = g.bool()
    if convention == "swapped":
        g_bool = ~g_bool
    return torch.where(g_bool, w_t, w_mirror)


def _bernoulli_pattern(
    shape: tuple[int, ...],
    p: torch.Tensor,
    rng: Optional[torch.Generator],
) -> torch.Tensor:
    """Draw the shared corruption pattern: True with probability ``p``.

    ``mask_sequence`` and ``sample_group_assignment`` both route through
    this helper so that identical seeds and times yield identical patterns.
    """
    u = torch.rand(shape, generator=rng, dtype=torch.float64)
    return u < p


def _per_position_prob(schedule: NoiseSchedule, t, shape: tuple[int, ...]) -> torch.Tensor:
    t = _as_time_tensor(t)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("time must lie in [0, 1]")
    p = 1.0 - schedule.alpha(t)
    while p.dim() < len(shape):
        p = p.unsqueeze(-1)
    return p


def sample_group_assignment(
    L: int,
    t,
    rng: Optional[torch.Generator] = None,
    *,
    schedule: Optional[NoiseSchedule] = None,
    batch_size: Optional[int] = None,
) -> torch.Tensor:
    """Assign each position to group 1 with probability ``1 - alpha(t)``.

    Args:
        L: Sequence length (>= 1).
        t: Time, scalar or ``(batch_size,)`` for per-sequence times.
        rng: Seeded generator.
        schedule: Defaults to the linear schedule.
        batch_size: If given, returns ``(batch_size, L)``; else ``(L,)``.

    Returns:
        Integer group labels in ``{0, 1}``.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    schedule = schedule or linear_schedule()
    shape = (L,) if batch_size is None else (batch_size, L)
    p = _per_position_prob(schedule, t, shape)
    return _bernoulli_pattern(shape, p, rng).long()


@dataclass
class CorruptedSequence:
    """A masked view of a token batch.

    ``z`` holds the corrupted ids: ``z[i] == x[i]`` exactly where
    ``mask_flags[i]`` is False, and ``z[i] == mask_id`` where it is True.
    """

    z: torch.Tensor
    mask_flags: torch.Tensor
    mask_id: int


def mask_sequence(
    x: torch.Tensor,
    t,
    rng: Optional[torch.Generator] = None,
    *,
    mask_id: int,
    schedule: Optional[NoiseSchedule] = None,
) -> CorruptedSequence:
    """Independently replace each token by ``mask_id`` with probability ``1 - alpha(t)``.

    Args:
        x: Clean token ids, shape ``(L,)`` or ``(B, L)``.  Must not contain
            ``mask_id``.
        t: Time, scalar or ``(B,)``.
        rng: Seeded generator.
        mask_id: Reserved mask token id (== real vocabulary size ``N``).
        schedule: Defaults to linear.

    Raises:
        ValueError: If the input already contains the mask id.
    """
    if torch.any(x == mask_id):
        raise ValueError("input contains the reserved mask id; clean data required")
    schedule = schedule or linear_schedule()
    p = _per_position_prob(schedule, t, tuple(x.shape))
    flags = _bernoulli_pattern(tuple(x.shape), p, rng)
    z = torch.where(flags, torch.full_like(x, mask_id), x)
    return CorruptedSequence(z=z, mask_flags=flags, mask_id=mask_id)


def complementary_mask_pair(
    x: torch.Tensor,
    t,
    rng: Optional[torch.Generator] = None,
    *,
    mask_id: int,
    schedule: Optional[NoiseSchedule] = None,
) -> tuple[CorruptedSequence, CorruptedSequence]:
    """Two masked copies whose mask patterns are exact complements.

    Copy 1 masks each position with probability ``1 - alpha(t)``; copy 2
    masks exactly the remaining positions, so every position is masked in
    exactly one copy.
    """
    first = mask_sequence(x, t, rng, mask_id=mask_id, schedule=schedule)
    flags2 = ~first.mask_flags
    z2 = torch.where(flags2, torch.full_like(x, mask_id), x)
    return first, CorruptedSequence(z=z2, mask_flags=flags2, mask_id=mask_id)
