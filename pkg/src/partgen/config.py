"""Run configuration: JSON files plus key=value overrides, strictly parsed.

Unknown keys are rejected, and every command writes its fully resolved
configuration next to its outputs, so runs are reproducible from the
artifact directory alone.

Note: no ``from __future__ import annotations`` here — the strict parser
inspects real field types at runtime.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ModelSection:
    kind: str = "pgm"  # pgm | mdlm
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    n_layers: int = 4  # mdlm only
    hidden_dim: int = 128
    n_heads: int = 4
    query_mode: str = "data_independent"
    dropout_rate: float = 0.0
    n_classes: int = 0


@dataclass
class DataSection:
    source: str = "synth_markov"  # synth_markov | text
    path: str = ""
    L: int = 32
    markov_states: int = 16
    n_sequences: int = 4096
    n_val: int = 512


@dataclass
class TrainingSection:
    batch_size: int = 64
    steps: int = 1000
    learning_rate: float = 3e-4
    warmup_steps: int = 100
    grad_clip_norm: float = 1.0
    ema_decay: float = 0.999
    objective: str = "pgm"
    log_every: int = 50
    eval_every: int = 500
    eval_mc: int = 4


@dataclass
class SamplingSection:
    sampler: str = "pgm_simple"
    steps: int = 8
    batch_size: int = 16
    n_samples: int = 32
    nucleus_p: float = 0.0  # 0 disables
    guidance_class: int = -1  # -1 disables
    guidance_omega: float = 0.0
    checkpoint: str = ""


@dataclass
class DistillSection:
    rounds: int = 1
    teacher_steps: int = 2
    train_steps: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-4
    divergence: str = "kl"
    checkpoint: str = ""


@dataclass
class EvalSection:
    n_mc: int = 16
    scorer_order: int = 3
    n_samples: int = 64
    sample_steps: int = 8
    checkpoint: str = ""


@dataclass
class BenchSection:
    samplers: list = field(default_factory=lambda: ["mdlm_ancestral", "pgm_simple"])
    steps: list = field(default_factory=lambda: [16])
    L: int = 128
    batch_size: int = 8
    warmup: int = 2
    repeats: int = 5
    checkpoints: list = field(default_factory=list)


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    out_dir: str = "runs/default"
    schedule: str = "linear"
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    distill: DistillSection = field(default_factory=DistillSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _build(cls, values: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ValueError(f"unknown configuration key {path}{key!r}")
        f = known[key]
        if dataclasses.is_dataclass(f.type):
            if not isinstance(value, dict):
                raise ValueError(f"{path}{key} must be a table")
            kwargs[key] = _build(f.type, value, f"{path}{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(values: dict) -> RunConfig:
    return _build(RunConfig, values, "")


def load_config(path) -> RunConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def _coerce(current, raw: str):
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, list):
        return json.loads(raw)
    return raw


def apply_override(cfg: RunConfig, assignment: str) -> None:
    """Apply one ``section.key=value`` (or ``key=value``) override in place."""
    if "=" not in assignment:
        raise ValueError(f"override {assignment!r} must look like key=value")
    dotted, raw = assignment.split("=", 1)
    obj = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ValueError(f"unknown configuration key {dotted!r}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(obj) or not hasattr(obj, leaf):
        raise ValueError(f"unknown configuration key {dotted!r}")
    setattr(obj, leaf, _coerce(getattr(obj, leaf), raw))


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved"
    path.write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n")
    return path
