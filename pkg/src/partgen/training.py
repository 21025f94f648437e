"""Training objectives and the optimizer loop.

Three objectives share a per-token scale so their values and gradient
variances are directly comparable:

- ``mgm``: weighted cross-entropy over masked positions only.
- ``mgm_complementary``: the average of the masked objective on two
  complementary masked copies (weights ``w(t)`` and ``w(1-t)``), covering
  every position exactly once at twice the forward compute.
- ``pgm``: cross-entropy at all positions of a partitioned sequence,
  weighted per group; one forward pass carries both complementary
  signals.

Losses accumulate in float64 regardless of the forward precision.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from . import schedules as sched
from .checkpoint import save_checkpoint


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite."""


@dataclass
class TrainConfig:
    batch_size: int = 64
    steps: int = 1000
    learning_rate: float = 3e-4
    warmup_steps: int = 100
    grad_clip_norm: float = 1.0
    ema_decay: float = 0.999
    objective: str = "pgm"  # mgm | mgm_complementary | pgm
    seed: int = 0
    log_every: int = 50
    eval_every: int = 0  # 0 disables periodic validation
    eval_mc: int = 4

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.warmup_steps > self.steps:
            raise ValueError("warmup_steps must not exceed steps")
        if self.objective not in ("mgm", "mgm_complementary", "pgm"):
            raise ValueError(f"unknown objective {self.objective!r}")


def _per_sequence_times(B: int, rng, t) -> torch.Tensor:
    if t is None:
        t = torch.rand(B, generator=rng, dtype=torch.float64)
    else:
        t = torch.as_tensor(t, dtype=torch.float64)
        if t.dim() == 0:
            t = t.expand(B).clone()
    return t


def _token_ce(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-position cross-entropy in float64, shape (B, L)."""
    logp = F.log_softmax(logits.to(torch.float64), dim=-1)
    return -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)


def _resolve_mask_id(model, mask_id):
    if mask_id is not None:
        return mask_id
    return model.cfg.mask_id


def mgm_loss(
    x: torch.Tensor,
    model,
    schedule: sched.NoiseSchedule,
    rng: Optional[torch.Generator] = None,
    *,
    t=None,
    mask_id: Optional[int] = None,
    labels=None,
    return_details: bool = False,
):
    """Masked-diffusion objective: weighted CE over masked positions, /L.

    Draws one time per sequence, corrupts with :func:`mask_sequence`, and
    weights masked-position cross-entropy by ``|alpha'(t)|/(1-alpha(t))``.
    """
    if x.numel() == 0:
        raise ValueError("batch must be nonempty")
    B, L = x.shape
    mask_id = _resolve_mask_id(model, mask_id)
    t = _per_sequence_times(B, rng, t)
    corrupted = sched.mask_sequence(x, t, rng, mask_id=mask_id, schedule=schedule)
    logits = model(corrupted.z, labels=labels) if labels is not None else model(corrupted.z)
    ce = _token_ce(logits, x)
    w = sched.loss_weight_mgm(schedule, t).unsqueeze(-1)
    per_seq = (ce * corrupted.mask_flags.to(ce.dtype) * w).sum(dim=-1) / L
    loss = per_seq.mean()
    if return_details:
        return loss, {"t": t, "mask_flags": corrupted.mask_flags, "ce": ce, "weights": w}
    return loss


def pgm_loss(
    x: torch.Tensor,
    model,
    schedule: sched.NoiseSchedule,
    rng: Optional[torch.Generator] = None,
    *,
    t=None,
    g=None,
    weight_convention: str = "prose",
    labels=None,
    return_details: bool = False,
):
    """Partitioned objective: weighted CE at every position, /(2L).

    Draws a time and a group assignment per sequence; group 1 carries the
    weight at ``t`` and group 0 the weight at ``1 - t``, so one forward
    evaluates the masked objective at two complementary rates.  The 1/2
    keeps the value on the same per-token scale as :func:`mgm_loss`.
    """
    if x.numel() == 0:
        raise ValueError("batch must be nonempty")
    B, L = x.shape
    t = _per_sequence_times(B, rng, t)
    if g is None:
        g = sched.sample_group_assignment(L, t, rng, schedule=schedule, batch_size=B)
    logits = model.forward_train(x, g, labels=labels)
    ce = _token_ce(logits, x)
    w = sched.loss_weight_pgm(g, schedule, t, convention=weight_convention)
    per_seq = (ce * w).sum(dim=-1) / (2 * L)
    loss = per_seq.mean()
    if return_details:
        return loss, {"t": t, "g": g, "ce": ce, "weights": w}
    return loss


def complementary_mgm_loss(
    x: torch.Tensor,
    model,
    schedule: sched.NoiseSchedule,
    rng: Optional[torch.Generator] = None,
    *,
    t=None,
    mask_id: Optional[int] = None,
    labels=None,
):
    """Average of the masked objective on two complementary copies.

    Every position contributes to exactly one copy; the pair costs two
    forward passes per sequence.
    """
    if x.numel() == 0:
        raise ValueError("batch must be nonempty")
    B, L = x.shape
    mask_id = _resolve_mask_id(model, mask_id)
    t = _per_sequence_times(B, rng, t)
    first, second = sched.complementary_mask_pair(x, t, rng, mask_id=mask_id, schedule=schedule)
    w1 = sched.loss_weight_mgm(schedule, t).unsqueeze(-1)
    w2 = sched.loss_weight_mgm(schedule, 1.0 - t).unsqueeze(-1)
    total = torch.zeros((), dtype=torch.float64)
    for corrupted, w in ((first, w1), (second, w2)):
        logits = model(corrupted.z, labels=labels) if labels is not None else model(corrupted.z)
        ce = _token_ce(logits, x)
        total = total + ((ce * corrupted.mask_flags.to(ce.dtype) * w).sum(dim=-1) / L).mean()
    return total / 2.0


_OBJECTIVES: dict[str, Callable] = {
    "mgm": mgm_loss,
    "mgm_complementary": complementary_mgm_loss,
    "pgm": pgm_loss,
}


def objective_fn(name: str) -> Callable:
    try:
        return _OBJECTIVES[name]
    except KeyError:
        raise ValueError(f"unknown objective {name!r}")


def gradient_variance_probe(
    model,
    batch: torch.Tensor,
    objective,
    n_draws: int,
    rng_seed: int,
    schedule: Optional[sched.NoiseSchedule] = None,
) -> tuple[dict[str, float], float]:
    """Trace-of-covariance of single-sample gradient estimates.

    The model stays frozen; each draw gets its own seeded generator
    (``rng_seed + draw``), so two probes with the same seed are paired
    draw-for-draw.

    Args:
        objective: An objective name or a callable
            ``(model, batch, rng) -> scalar loss``.
        n_draws: Number of independent gradient estimates (>= 2).

    Returns:
        ``(per_block, total)`` where ``per_block`` maps parameter names to
        the sum of per-element gradient variances.
    """
    if n_draws < 2:
        raise ValueError("variance estimation needs at least 2 draws")
    schedule = schedule or sched.linear_schedule()
    if isinstance(objective, str):
        base = objective_fn(objective)
        fn = lambda m, b, r: base(b, m, schedule, r)
    else:
        fn = objective
    params = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    sums = {name: torch.zeros_like(p, dtype=torch.float64) for name, p in params}
    sq_sums = {name: torch.zeros_like(p, dtype=torch.float64) for name, p in params}
    for d in range(n_draws):
        rng = torch.Generator().manual_seed(rng_seed + d)
        loss = fn(model, batch, rng)
        grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
        for (name, p), grad in zip(params, grads):
            if grad is None:
                continue
            g64 = grad.to(torch.float64)
            sums[name] += g64
            sq_sums[name] += g64 * g64
    per_block = {}
    for name, _ in params:
        mean = sums[name] / n_draws
        var = (sq_sums[name] - n_draws * mean * mean) / (n_draws - 1)
        per_block[name] = float(var.clamp(min=0.0).sum().item())
    return per_block, sum(per_block.values())


class Ema:
    """Exponential moving average of model parameters."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items()}

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        for k, v in model.state_dict().items():
            self.shadow[k].mul_(self.decay).add_(v, alpha=1.0 - self.decay)

    def copy_to(self, model: torch.nn.Module) -> None:
        model.load_state_dict(self.shadow)


@dataclass
class TrainResult:
    model: torch.nn.Module
    ema_state: dict
    metrics: list[dict] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    final_loss: float = float("nan")


METRICS_COLUMNS = ["step", "loss", "val_nelbo_ppl", "grad_norm", "wall_time_s", "loss_spike"]


def _write_metrics(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _quick_val_nelbo(model, val_data, schedule, cfg: TrainConfig, seed: int) -> float:
    rng = torch.Generator().manual_seed(seed)
    fn = objective_fn(cfg.objective if cfg.objective != "mgm_complementary" else "mgm")
    with torch.no_grad():
        vals = [float(fn(val_data, model, schedule, rng)) for _ in range(cfg.eval_mc)]
    return float(torch.tensor(vals).mean().exp())


def train(
    config: TrainConfig,
    dataset: torch.Tensor,
    model: torch.nn.Module,
    *,
    schedule: Optional[sched.NoiseSchedule] = None,
    val_dataset: Optional[torch.Tensor] = None,
    out_dir=None,
    labels: Optional[torch.Tensor] = None,
) -> TrainResult:
    """Run the optimizer loop and return the trained model plus metrics.

    Adam (betas 0.9/0.999, eps 1e-8, no weight decay) with linear warmup
    to a constant rate, global-norm clipping, and an EMA shadow of the
    weights saved alongside the raw ones.  A non-finite loss aborts with a
    diagnostic checkpoint.

    Args:
        dataset: Token ids ``(n, L)`` (or an object with ``.sequences``).
        labels: Optional per-sequence class labels aligned with ``dataset``.
    """
    schedule = schedule or sched.linear_schedule()
    data = dataset.sequences if hasattr(dataset, "sequences") else dataset
    loss_fn = objective_fn(config.objective)
    rng = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           betas=(0.9, 0.999), eps=1e-8)
    ema = Ema(model, config.ema_decay)
    metrics: list[dict] = []
    recent: list[float] = []
    start = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None

    def save(name: str, extra: Optional[dict] = None) -> Optional[Path]:
        if out_dir is None:
            return None
        meta = {"objective": config.objective, "steps": config.steps,
                "schedule": schedule.kind, "distill_rounds": 0}
        if hasattr(dataset, "bos_id"):
            meta.update({"bos_id": dataset.bos_id, "eos_id": dataset.eos_id,
                         "corpus_kind": dataset.kind})
        meta.update(extra or {})
        path = out_dir / "checkpoints" / name
        save_checkpoint(path, model, ema_state=ema.shadow, metadata=meta)
        return path

    loss_val = float("nan")
    for step in range(config.steps):
        idx = torch.randint(len(data), (config.batch_size,), generator=rng)
        batch = data[idx]
        batch_labels = labels[idx] if labels is not None else None
        if batch_labels is not None:
            loss = loss_fn(batch, model, schedule, rng, labels=batch_labels)
        else:
            loss = loss_fn(batch, model, schedule, rng)
        loss_val = float(loss.detach())
        if not torch.isfinite(loss):
            save("diagnostic.ckpt", {"diverged_at_step": step})
            raise TrainingDiverged(f"non-finite loss {loss_val} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if config.grad_clip_norm > 0:
            grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm))
        else:
            grad_norm = float(
                torch.norm(torch.stack([p.grad.norm() for p in model.parameters() if p.grad is not None]))
            )
        warm = min(1.0, (step + 1) / max(1, config.warmup_steps))
        for group in opt.param_groups:
            group["lr"] = config.learning_rate * warm
        opt.step()
        ema.update(model)

        spike = 0
        if len(recent) >= 20:
            med = statistics.median(recent[-100:])
            spike = int(loss_val > 3.0 * med)
        recent.append(loss_val)

        if config.log_every and (step % config.log_every == 0 or step == config.steps - 1):
            val_ppl = ""
            if val_dataset is not None and config.eval_every and (step % config.eval_every == 0 or step == config.steps - 1):
                val_ppl = f"{_quick_val_nelbo(model, val_dataset, schedule, config, config.seed + 7919):.6g}"
            metrics.append({
                "step": step,
                "loss": f"{loss_val:.8g}",
                "val_nelbo_ppl": val_ppl,
                "grad_norm": f"{grad_norm:.6g}",
                "wall_time_s": f"{time.perf_counter() - start:.3f}",
                "loss_spike": spike,
            })

    ckpt = save("final.ckpt")
    if out_dir is not None:
        _write_metrics(out_dir / "metrics.csv", metrics)
    return TrainResult(model=model, ema_state=ema.shadow, metrics=metrics,
                       checkpoint_path=ckpt, final_loss=loss_val)
