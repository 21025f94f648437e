"""Self-distillation through time: few-step students of multi-step teachers.

Targets are built by rolling the teacher's own sampler forward from a
corrupted sequence and recording, for every position, the predicted
log-probability row at the sub-step where that position was decoded.
The student then matches those rows in one step.  Each round distills
two teacher steps into one, halving the effective step count; rounds
reuse the student as the next teacher.

For partitioned models the corruption is a group assignment: the group-1
side receives targets while group 0 plays the clean role and is excluded
from the loss.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from . import schedules as sched
from .mdlm_model import MdlmTransformer
from .partition_model import PartitionTransformer


@dataclass
class DistillTargets:
    """Teacher rollout targets.

    ``log_probs[b, i]`` is a normalized log-probability row over the N
    real tokens, meaningful where ``valid[b, i]`` is True (positions that
    were corrupted at rollout start and got decoded during the rollout).
    """

    log_probs: torch.Tensor  # (B, L, N) float64
    valid: torch.Tensor      # (B, L) bool


def _pack_ragged(member: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad per-row True-index lists to a rectangle.

    Returns ``(indices, mask)`` of shape (B, W) where W is the largest
    row count; padded entries are 0 with mask False.
    """
    B, L = member.shape
    counts = member.sum(dim=1)
    W = max(1, int(counts.max().item()))
    order = torch.argsort((~member).long(), dim=1, stable=True)  # True indices first
    idx = order[:, :W]
    mask = torch.arange(W).unsqueeze(0) < counts.unsqueeze(1)
    return idx * mask, mask


def _noisy_row_log_probs(teacher, x: torch.Tensor, noisy: torch.Tensor) -> torch.Tensor:
    """Teacher log-probability rows at the noisy positions, (B, L, N) float64.

    ``x`` holds true/decoded values at clean positions; noisy entries are
    never read for partitioned teachers and are replaced by the mask id
    for masked teachers.
    """
    B, L = x.shape
    if teacher.family == "mdlm":
        z = torch.where(noisy, torch.full_like(x, teacher.cfg.mask_id), x)
        with torch.no_grad():
            logits = teacher(z)
        return F.log_softmax(logits.to(torch.float64), dim=-1)
    clean = ~noisy
    clean_idx, clean_mask = _pack_ragged(clean)
    dec_idx, dec_mask = _pack_ragged(noisy)
    x_clean = torch.gather(x, 1, clean_idx)
    with torch.no_grad():
        logits = teacher.predict(x_clean, clean_idx, dec_idx,
                                 clean_mask=clean_mask, decode_mask=dec_mask)
    rows = F.log_softmax(logits.to(torch.float64), dim=-1)
    out = torch.zeros(B, L, rows.shape[-1], dtype=torch.float64)
    out[torch.arange(B).unsqueeze(1).expand_as(dec_idx)[dec_mask], dec_idx[dec_mask]] = rows[dec_mask]
    return out


def build_sdtt_targets(
    teacher,
    x: torch.Tensor,
    corrupt_flags: torch.Tensor,
    t: torch.Tensor,
    steps: int,
    rng: Optional[torch.Generator] = None,
    *,
    schedule: Optional[sched.NoiseSchedule] = None,
    greedy: bool = False,
) -> DistillTargets:
    """Roll the teacher ``steps`` posterior sub-steps from time ``t`` to 0.

    The sub-grid is ``t * (1 - j/steps)``; at each sub-step every still
    corrupted position resolves with the posterior probability, and its
    teacher row is recorded at that moment.  ``steps = 1`` degenerates to
    the teacher's single-pass log-probabilities at the corrupted positions.

    Args:
        x: Clean token ids (B, L) — the data the corruption was drawn on.
        corrupt_flags: Bool (B, L); True marks the masked/group-1 side.
        t: Corruption times, scalar or (B,).
        greedy: Decode the rollout by argmax instead of sampling (the
            target rows themselves are unaffected by this choice at the
            position being recorded, only later context is).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    schedule = schedule or sched.linear_schedule()
    B, L = x.shape
    t = torch.as_tensor(t, dtype=torch.float64)
    if t.dim() == 0:
        t = t.expand(B).clone()
    flags = corrupt_flags.clone()
    work = x.clone()
    log_probs = None
    valid = torch.zeros(B, L, dtype=torch.bool)
    for j in range(steps):
        if not torch.any(flags):
            break
        t_cur = t * (1.0 - j / steps)
        t_next = t * (1.0 - (j + 1) / steps)
        a_cur = schedule.alpha(t_cur.clamp(min=sched.TIME_EPS))
        a_next = schedule.alpha(t_next)
        p = ((a_next - a_cur) / (1.0 - a_cur)).clamp(0.0, 1.0)
        rows = _noisy_row_log_probs(teacher, work, flags)
        if log_probs is None:
            log_probs = torch.zeros(B, L, rows.shape[-1], dtype=torch.float64)
        flip = flags & (torch.rand(B, L, generator=rng, dtype=torch.float64) < p.unsqueeze(-1))
        if j == steps - 1:
            flip = flags  # s = 0 resolves everything
        if torch.any(flip):
            log_probs[flip] = rows[flip]
            valid |= flip
            if greedy:
                tokens = rows.argmax(dim=-1)
            else:
                from .samplers import categorical_sample

                tokens = categorical_sample(rows.reshape(B * L, -1), rng).view(B, L)
            work = torch.where(flip, tokens, work)
            flags &= ~flip
    if log_probs is None:
        log_probs = torch.zeros(B, L, 1, dtype=torch.float64)
    return DistillTargets(log_probs=log_probs, valid=valid)


def sdtt_student_loss(
    student_logits: torch.Tensor,
    targets: DistillTargets,
    divergence: str = "kl",
) -> Optional[torch.Tensor]:
    """Mean divergence between target rows and student rows at valid positions.

    ``kl`` is forward KL (target || student); ``reverse_kl`` swaps the
    roles.  Returns None when no position is valid (skip-batch signal).
    """
    if divergence not in ("kl", "reverse_kl"):
        raise ValueError(f"unknown divergence {divergence!r}")
    if student_logits.shape[:2] != targets.valid.shape:
        raise ValueError("student logits and targets must cover the same grid")
    if not torch.any(targets.valid):
        return None
    s = F.log_softmax(student_logits.to(torch.float64), dim=-1)[targets.valid]
    tgt = targets.log_probs[targets.valid]
    if divergence == "kl":
        p, logp, logq = tgt.exp(), tgt, s
    else:
        p, logp, logq = s.exp(), s, tgt
    terms = torch.where(p > 0, p * (logp - logq), torch.zeros_like(p))
    return terms.sum(dim=-1).mean()


def _student_rows(student, x, flags):
    """Student logits over the full grid with the corrupted side predicted."""
    if student.family == "mdlm":
        z = torch.where(flags, torch.full_like(x, student.cfg.mask_id), x)
        return student(z)
    return student.forward_train(x, flags.long())


@dataclass
class DistillConfig:
    rounds: int = 1
    teacher_steps: int = 2  # rollout length distilled into one student step
    train_steps: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0
    divergence: str = "kl"


def sdtt_round(
    teacher,
    dataset: torch.Tensor,
    config: DistillConfig,
    *,
    schedule: Optional[sched.NoiseSchedule] = None,
) -> tuple[torch.nn.Module, dict]:
    """Run ``config.rounds`` distillation rounds; returns (student, metadata).

    Each round initializes the student from the current teacher, trains it
    to match ``teacher_steps``-step rollout targets in a single pass, then
    promotes it to teacher.  Metadata records the round count and the
    effective step ratio ``teacher_steps ** rounds``.
    """
    schedule = schedule or sched.linear_schedule()
    data = dataset.sequences if hasattr(dataset, "sequences") else dataset
    teacher = copy.deepcopy(teacher)
    rng = torch.Generator().manual_seed(config.seed)
    for _ in range(config.rounds):
        student = copy.deepcopy(teacher)
        student.train()
        opt = torch.optim.Adam(student.parameters(), lr=config.learning_rate,
                               betas=(0.9, 0.999), eps=1e-8)
        for _step in range(config.train_steps):
            idx = torch.randint(len(data), (config.batch_size,), generator=rng)
            x = data[idx]
            B, L = x.shape
            t = sched.clamp_time(torch.rand(B, generator=rng, dtype=torch.float64))
            p = (1.0 - schedule.alpha(t)).unsqueeze(-1)
            flags = torch.rand(B, L, generator=rng, dtype=torch.float64) < p
            teacher.eval()
            targets = build_sdtt_targets(teacher, x, flags, t, config.teacher_steps,
                                         rng, schedule=schedule)
            loss = sdtt_student_loss(_student_rows(student, x, flags), targets,
                                     config.divergence)
            if loss is None:
                continue
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        student.eval()
        teacher = student
    meta = {"distill_rounds": config.rounds,
            "effective_step_ratio": config.teacher_steps ** config.rounds}
    return teacher, meta
