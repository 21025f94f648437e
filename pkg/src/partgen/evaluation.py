"""Metrics and the throughput benchmark harness.

The likelihood bound is estimated by Monte Carlo over corruption draws;
sample quality goes through a pluggable left-to-right reference scorer
(an order-n smoothed n-gram by default, or a trained checkpoint queried
one position at a time).  The benchmark times model/sampler grids with
warmup exclusion and reports a fixed CSV schema plus the instrumented
token-position counts behind the efficiency claims.
"""

from __future__ import annotations

import math
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from . import schedules as sched
from .samplers import SampleTrace, get_sampler
from .training import mgm_loss, pgm_loss


class EvaluationError(RuntimeError):
    """Raised when a metric cannot be computed (non-finite scorer output)."""


# ---------------------------------------------------------------------------
# Reference scorers
# ---------------------------------------------------------------------------


class NgramScorer:
    """Add-1 smoothed order-n scorer fit on a training corpus.

    ``order`` is the context length: ``log p(x_i | x_{i-order..i-1})``
    with shorter contexts near the start of a sequence.
    """

    def __init__(self, vocab_size: int, order: int = 3):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.vocab_size = vocab_size
        self.order = order
        self._context: dict[tuple, int] = {}
        self._joint: dict[tuple, int] = {}

    def fit(self, sequences: torch.Tensor) -> "NgramScorer":
        for row in sequences.tolist():
            for i in range(len(row)):
                ctx = tuple(row[max(0, i - self.order): i])
                self._context[ctx] = self._context.get(ctx, 0) + 1
                key = ctx + (row[i],)
                self._joint[key] = self._joint.get(key, 0) + 1
        return self

    def conditional_log_probs(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L) log p(x_i | x_{<i}); normalized by construction."""
        out = torch.empty(x.shape, dtype=torch.float64)
        for b, row in enumerate(x.tolist()):
            for i in range(len(row)):
                ctx = tuple(row[max(0, i - self.order): i])
                joint = self._joint.get(ctx + (row[i],), 0)
                total = self._context.get(ctx, 0)
                out[b, i] = math.log((joint + 1) / (total + self.vocab_size))
        return out


class UniformScorer:
    """Assigns 1/N everywhere; handy as an analytic fixture."""

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size

    def conditional_log_probs(self, x: torch.Tensor) -> torch.Tensor:
        return torch.full(x.shape, -math.log(self.vocab_size), dtype=torch.float64)


class ModelScorer:
    """Left-to-right scoring with a trained checkpoint.

    Partitioned models answer single-position decode queries against the
    growing prefix; masked models see the prefix with everything else
    masked and are read at the next position.
    """

    def __init__(self, model):
        self.model = model
        self.vocab_size = model.cfg.vocab_size

    def conditional_log_probs(self, x: torch.Tensor) -> torch.Tensor:
        B, L = x.shape
        out = torch.empty(B, L, dtype=torch.float64)
        with torch.no_grad():
            if self.model.family == "pgm":
                # Position 0 has an empty prefix: score it against an
                # empty clean set via a masked-out dummy anchor.
                for i in range(L):
                    if i == 0:
                        clean = torch.zeros(B, 1, dtype=torch.long)
                        cmask = torch.zeros(B, 1, dtype=torch.bool)
                    else:
                        clean = x[:, :i]
                        cmask = None
                    pos = torch.arange(i if i > 0 else 1).unsqueeze(0).expand(B, -1)
                    dec = torch.full((B, 1), i, dtype=torch.long)
                    logits = self.model.predict(clean, pos, dec, clean_mask=cmask)
                    lp = F.log_softmax(logits.to(torch.float64), dim=-1)
                    out[:, i] = lp[:, 0].gather(-1, x[:, i: i + 1]).squeeze(-1)
            else:
                mask_id = self.model.cfg.mask_id
                for i in range(L):
                    z = torch.full_like(x, mask_id)
                    z[:, :i] = x[:, :i]
                    logits = self.model(z)
                    lp = F.log_softmax(logits.to(torch.float64), dim=-1)
                    out[:, i] = lp[:, i].gather(-1, x[:, i: i + 1]).squeeze(-1)
        return out


# ---------------------------------------------------------------------------
# Likelihood / sample-quality metrics
# ---------------------------------------------------------------------------


def nelbo_perplexity(
    model,
    dataset: torch.Tensor,
    n_mc: int,
    rng: Optional[torch.Generator] = None,
    *,
    schedule: Optional[sched.NoiseSchedule] = None,
    ema_state: Optional[dict] = None,
    batch_size: int = 256,
    return_stderr: bool = False,
):
    """exp(mean per-token bound) under Monte-Carlo corruption draws.

    Times are stratified across the ``n_mc`` draws (draw d uses
    ``t = (d + u)/n_mc``), which keeps the estimator unbiased while taming
    the weight's heavy tail.  With ``ema_state`` the shadow weights are
    evaluated and the raw ones restored afterwards.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    schedule = schedule or sched.linear_schedule()
    data = dataset.sequences if hasattr(dataset, "sequences") else dataset
    loss_fn = pgm_loss if model.family == "pgm" else mgm_loss
    backup = None
    if ema_state is not None:
        backup = {k: v.detach().clone() for k, v in model.state_dict().items()}
        model.load_state_dict(ema_state)
    draws, weights = [], []
    try:
        with torch.no_grad():
            for d in range(n_mc):
                for lo in range(0, len(data), batch_size):
                    batch = data[lo: lo + batch_size]
                    u = torch.rand(batch.shape[0], generator=rng, dtype=torch.float64)
                    t = (d + u) / n_mc
                    draws.append(float(loss_fn(batch, model, schedule, rng, t=t)))
                    weights.append(batch.shape[0])
    finally:
        if backup is not None:
            model.load_state_dict(backup)
    mean = sum(d * w for d, w in zip(draws, weights)) / sum(weights)
    if return_stderr:
        se = statistics.stdev(draws) / math.sqrt(len(draws)) if len(draws) > 1 else 0.0
        return math.exp(mean), se
    return math.exp(mean)


def generative_perplexity(scorer, samples: torch.Tensor) -> float:
    """Arithmetic mean over samples of exp(-mean conditional log-prob)."""
    if samples.numel() == 0:
        raise ValueError("samples must be nonempty")
    if torch.any(samples >= scorer.vocab_size):
        raise ValueError("samples contain ids outside the scorer vocabulary (mask id?)")
    lp = scorer.conditional_log_probs(samples)
    if not torch.all(torch.isfinite(lp)):
        raise EvaluationError("reference scorer returned non-finite log-probabilities")
    per_sample = torch.exp(-lp.mean(dim=1))
    return float(per_sample.mean())


def unigram_entropy(samples: torch.Tensor, vocab_size: int) -> float:
    """Mean within-sequence token-frequency entropy (nats)."""
    if samples.numel() == 0:
        raise ValueError("samples must be nonempty")
    B, L = samples.shape
    ent = torch.empty(B, dtype=torch.float64)
    for b in range(B):
        counts = torch.bincount(samples[b], minlength=vocab_size).double()
        freq = counts[counts > 0] / L
        ent[b] = -(freq * freq.log()).sum()
    return float(ent.mean())


# ---------------------------------------------------------------------------
# Continuation ranking
# ---------------------------------------------------------------------------


def _subset_bound_scores(model, xs: torch.Tensor, n_mc: int, rng) -> torch.Tensor:
    """Joint log-probability bounds via mask-count-stratified estimation.

    The continuous-time bound equals ``sum_{k=1..L} (1/k) E[sum_{i in M_k} CE_i]``
    over uniform size-k subsets; each repeat draws one subset per size,
    shared across all candidates so shared positions cancel exactly.
    Partitioned models contribute the complementary side as a second
    estimator, averaged in.

    Returns per-candidate scores (higher = more probable): minus the bound.
    """
    C, L = xs.shape
    totals = torch.zeros(C, dtype=torch.float64)
    for _rep in range(n_mc):
        flags = torch.zeros(L, L, dtype=torch.bool)
        for k in range(1, L + 1):
            perm = torch.randperm(L, generator=rng)
            flags[k - 1, perm[:k]] = True
        for k in range(1, L + 1):
            f = flags[k - 1]
            if model.family == "pgm":
                logits = model.forward_train(xs, f.long().unsqueeze(0).expand(C, -1))
            else:
                z = torch.where(f.unsqueeze(0), torch.full_like(xs, model.cfg.mask_id), xs)
                logits = model(z)
            lp = F.log_softmax(logits.to(torch.float64), dim=-1)
            ce = -lp.gather(-1, xs.unsqueeze(-1)).squeeze(-1)
            side1 = ce[:, f].sum(dim=1) / k
            if model.family == "pgm":
                side2 = ce[:, ~f].sum(dim=1) / (L - k) if k < L else side1
                totals += (side1 + side2) / 2.0
            else:
                totals += side1
    return -(totals / n_mc)


def rank_continuations(
    model,
    prefix: torch.Tensor,
    candidates: Sequence[torch.Tensor],
    n_mc: int,
    rng: Optional[torch.Generator] = None,
) -> tuple[int, torch.Tensor]:
    """Pick the continuation whose full sequence has the best joint bound.

    The bound on ``log p(prefix, candidate)`` ranks candidates because the
    shared ``log p(prefix)`` term cancels.  All candidates are scored with
    identical corruption draws; ties resolve to the lowest index.

    Returns:
        ``(best_index, scores)`` with one bound value per candidate.
    """
    if len(candidates) < 2:
        raise ValueError("need at least two candidates")
    lengths = {len(c) for c in candidates}
    if len(lengths) != 1:
        raise ValueError("candidates must share a length for paired scoring")
    xs = torch.stack([torch.cat([prefix, torch.as_tensor(c, dtype=torch.long)]) for c in candidates])
    with torch.no_grad():
        scores = _subset_bound_scores(model, xs, n_mc, rng)
    best = int(torch.argmax(scores))
    for i in range(best):  # deterministic tie-break toward the lowest index
        if float(scores[i]) == float(scores[best]):
            best = i
            break
    return best, scores


# ---------------------------------------------------------------------------
# Throughput benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchCase:
    model_name: str
    model: torch.nn.Module
    sampler: str
    steps: int
    L: int
    batch: int
    bos_id: int = 0


@dataclass
class BenchRow:
    model: str
    sampler: str
    steps: int
    L: int
    batch: int
    latency_ms_mean: float
    latency_ms_sd: float
    tok_per_s: float
    positions_processed: float


@dataclass
class BenchReport:
    environment: dict
    rows: list[BenchRow] = field(default_factory=list)
    traces: dict = field(default_factory=dict)


BENCH_COLUMNS = "model,sampler,steps,L,batch,latency_ms_mean,latency_ms_sd,tok_per_s,positions_processed"


def bench_environment() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
    }


def throughput_bench(
    cases: Sequence[BenchCase],
    warmup: int = 2,
    repeats: int = 5,
    seed: int = 0,
) -> BenchReport:
    """Time each case with warmup exclusion; one report row per case.

    ``tok_per_s`` is ``batch * L / mean latency``; ``positions_processed``
    is the instrumented per-sequence token-position total of the last
    timed run.  The last trace per case is kept for scaling analysis.
    """
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    report = BenchReport(environment=bench_environment())
    for case in cases:
        fn = get_sampler(case.sampler)
        durations = []
        trace: Optional[SampleTrace] = None
        for rep in range(warmup + repeats):
            rng = torch.Generator().manual_seed(seed + rep)
            tic = time.perf_counter()
            trace = fn(case.model, case.L, case.steps, rng,
                       batch_size=case.batch, bos_id=case.bos_id)
            elapsed = time.perf_counter() - tic
            if rep >= warmup:
                durations.append(elapsed)
        mean_s = statistics.fmean(durations)
        sd_s = statistics.stdev(durations)
        report.rows.append(BenchRow(
            model=case.model_name, sampler=case.sampler, steps=case.steps,
            L=case.L, batch=case.batch,
            latency_ms_mean=mean_s * 1e3, latency_ms_sd=sd_s * 1e3,
            tok_per_s=case.batch * case.L / mean_s,
            positions_processed=trace.total_positions_processed(),
        ))
        report.traces[(case.model_name, case.sampler, case.steps)] = trace
    return report


def write_bench_csv(report: BenchReport, path) -> None:
    with open(path, "w") as f:
        for key, value in report.environment.items():
            f.write(f"# {key}={value}\n")
        f.write(BENCH_COLUMNS + "\n")
        for r in report.rows:
            f.write(f"{r.model},{r.sampler},{r.steps},{r.L},{r.batch},"
                    f"{r.latency_ms_mean:.3f},{r.latency_ms_sd:.3f},"
                    f"{r.tok_per_s:.3f},{r.positions_processed:g}\n")


def latency_scaling(trace: SampleTrace) -> tuple[float, float, float, list[tuple[float, float]]]:
    """Regress per-step latency on the clean-token count at each step.

    Returns ``(slope, intercept, r_squared, points)`` where points are
    ``(clean_count, milliseconds)`` pairs.
    """
    points = []
    clean = 1.0  # BOS anchor
    for rec in trace.steps:
        points.append((clean, rec.duration_s * 1e3))
        clean += rec.n_decoded
    xs = torch.tensor([p[0] for p in points], dtype=torch.float64)
    ys = torch.tensor([p[1] for p in points], dtype=torch.float64)
    xm, ym = xs.mean(), ys.mean()
    sxx = ((xs - xm) ** 2).sum()
    sxy = ((xs - xm) * (ys - ym)).sum()
    slope = float(sxy / sxx)
    intercept = float(ym - slope * xm)
    pred = slope * xs + intercept
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ym) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return slope, intercept, r2, points
