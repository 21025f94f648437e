"""Command-line entry points: train | sample | distill | eval | bench | halton."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import torch

from . import schedules as sched
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, apply_override, load_config, write_resolved
from .data import ingest_text, synth_markov
from .distillation import DistillConfig, sdtt_round
from .evaluation import (
    BenchCase,
    ModelScorer,
    NgramScorer,
    generative_perplexity,
    nelbo_perplexity,
    throughput_bench,
    unigram_entropy,
    write_bench_csv,
)
from .mdlm_model import MdlmConfig, MdlmTransformer
from .partition_model import PartitionConfig, PartitionTransformer
from .samplers import get_sampler, halton_schedule, write_samples, write_trace_csv
from .training import TrainConfig, train


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    torch.set_num_threads(max(1, cfg.threads))
    torch.manual_seed(cfg.seed)
    return cfg


def _build_corpus(cfg: RunConfig):
    d = cfg.data
    if d.source == "synth_markov":
        corpus, _ = synth_markov(states=d.markov_states, seed=cfg.seed,
                                 n_sequences=d.n_sequences, L=d.L)
        return corpus
    if d.source == "text":
        return ingest_text(d.path, d.L)
    raise ValueError(f"unknown data source {d.source!r}")


def _build_model(cfg: RunConfig, corpus):
    m = cfg.model
    if m.kind == "pgm":
        return PartitionTransformer(PartitionConfig(
            n_encoder_layers=m.n_encoder_layers, n_decoder_layers=m.n_decoder_layers,
            hidden_dim=m.hidden_dim, n_heads=m.n_heads, vocab_size=corpus.vocab_size,
            max_len=corpus.L, query_mode=m.query_mode, dropout_rate=m.dropout_rate,
            n_classes=m.n_classes))
    if m.kind == "mdlm":
        return MdlmTransformer(MdlmConfig(
            n_layers=m.n_layers, hidden_dim=m.hidden_dim, n_heads=m.n_heads,
            vocab_size=corpus.vocab_size, max_len=corpus.L,
            dropout_rate=m.dropout_rate, n_classes=m.n_classes))
    raise ValueError(f"unknown model kind {m.kind!r}")


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    corpus = _build_corpus(cfg)
    n_val = min(cfg.data.n_val, len(corpus) - 1)
    train_set, val_set = corpus.split(n_val)
    model = _build_model(cfg, corpus)
    t = cfg.training
    tc = TrainConfig(batch_size=t.batch_size, steps=t.steps, learning_rate=t.learning_rate,
                     warmup_steps=min(t.warmup_steps, t.steps), grad_clip_norm=t.grad_clip_norm,
                     ema_decay=t.ema_decay, objective=t.objective, seed=cfg.seed,
                     log_every=t.log_every, eval_every=t.eval_every, eval_mc=t.eval_mc)
    schedule = sched.get_schedule(cfg.schedule)
    result = train(tc, train_set, model, schedule=schedule,
                   val_dataset=val_set.sequences, out_dir=out)
    print(f"trained {cfg.model.kind} for {t.steps} steps; "
          f"final loss {result.final_loss:.4f}; checkpoint {result.checkpoint_path}")
    return 0


def _checkpoint_or_die(path: str, what: str):
    if not path:
        raise ValueError(f"{what} requires a checkpoint path")
    return load_checkpoint(path)


def cmd_sample(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    s = cfg.sampling
    model, manifest = _checkpoint_or_die(s.checkpoint or str(out / "checkpoints/final.ckpt"),
                                         "sample")
    model.eval()
    L = model.cfg.max_len
    guidance = (s.guidance_class, s.guidance_omega) if s.guidance_class >= 0 else None
    nucleus = s.nucleus_p if s.nucleus_p > 0 else None
    rng = torch.Generator().manual_seed(cfg.seed)
    fn = get_sampler(s.sampler)
    samples_dir = out / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    trace = None
    remaining = s.n_samples
    bos = manifest["metadata"].get("bos_id", model.cfg.vocab_size - 2)
    while remaining > 0:
        B = min(s.batch_size, remaining)
        trace = fn(model, L, s.steps, rng, guidance=guidance, nucleus_p=nucleus,
                   batch_size=B, bos_id=bos)
        rows.append(trace.sequences)
        remaining -= B
    sequences = torch.cat(rows)
    as_bytes = manifest["metadata"].get("corpus_kind") == "byte"
    write_samples(samples_dir / "samples.txt", sequences, as_bytes=as_bytes,
                  byte_specials={"bos": bos, "eos": bos + 1})
    write_trace_csv(trace, samples_dir / "trace.csv")
    print(f"wrote {len(sequences)} samples to {samples_dir / 'samples.txt'} "
          f"({trace.sampler}, {len(trace.steps)} model calls per batch)")
    return 0


def cmd_distill(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    d = cfg.distill
    teacher, manifest = _checkpoint_or_die(d.checkpoint, "distill")
    corpus = _build_corpus(cfg)
    dc = DistillConfig(rounds=d.rounds, teacher_steps=d.teacher_steps,
                       train_steps=d.train_steps, batch_size=d.batch_size,
                       learning_rate=d.learning_rate, seed=cfg.seed,
                       divergence=d.divergence)
    student, meta = sdtt_round(teacher, corpus, dc, schedule=sched.get_schedule(cfg.schedule))
    prior = manifest["metadata"].get("distill_rounds", 0)
    meta["distill_rounds"] += prior
    meta.update({k: v for k, v in manifest["metadata"].items()
                 if k not in meta})
    path = out / "checkpoints" / "student.ckpt"
    save_checkpoint(path, student, metadata=meta)
    print(f"distilled {d.rounds} round(s); student at {path} "
          f"(effective step ratio {meta['effective_step_ratio']})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    e = cfg.eval
    model, manifest = _checkpoint_or_die(e.checkpoint or str(out / "checkpoints/final.ckpt"),
                                         "eval")
    model.eval()
    corpus = _build_corpus(cfg)
    n_val = min(cfg.data.n_val, len(corpus) - 1)
    train_set, val_set = corpus.split(n_val)
    ema_model, _ = load_checkpoint(e.checkpoint or str(out / "checkpoints/final.ckpt"),
                                   use_ema=True)
    rng = torch.Generator().manual_seed(cfg.seed)
    ppl = nelbo_perplexity(ema_model, val_set.sequences, e.n_mc, rng)
    scorer = NgramScorer(corpus.vocab_size, e.scorer_order).fit(train_set.sequences)
    fn = get_sampler(cfg.sampling.sampler)
    trace = fn(model, corpus.L, e.sample_steps, rng,
               batch_size=e.n_samples, bos_id=corpus.bos_id)
    samples = trace.sequences
    gen_ppl = generative_perplexity(scorer, samples)
    entropy = unigram_entropy(samples, corpus.vocab_size)
    lp = scorer.conditional_log_probs(samples)
    per_sample = torch.exp(-lp.mean(dim=1)).tolist()
    metrics = {"nelbo_ppl": ppl, "gen_ppl": gen_ppl, "unigram_entropy": entropy,
               "n_mc": e.n_mc, "n_samples": e.n_samples,
               "model": manifest["kind"]}
    (out / "eval.json").write_text(json.dumps(metrics, indent=2) + "\n")
    from .reporting import render_eval_figure

    fig = render_eval_figure(metrics, per_sample, out)
    print(f"nelbo_ppl={ppl:.4f} gen_ppl={gen_ppl:.4f} entropy={entropy:.4f} "
          f"-> {out / 'eval.json'}, {fig}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_run_config(args)
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    b = cfg.bench
    cases = []
    for ckpt in b.checkpoints:
        model, manifest = load_checkpoint(ckpt)
        model.eval()
        bos = manifest["metadata"].get("bos_id", model.cfg.vocab_size - 2)
        for name in b.samplers:
            if model.family == "pgm" and not name.startswith("pgm"):
                continue
            if model.family == "mdlm" and not name.startswith("mdlm"):
                continue
            for steps in b.steps:
                cases.append(BenchCase(model_name=manifest["kind"], model=model,
                                       sampler=name, steps=steps,
                                       L=min(b.L, model.cfg.max_len),
                                       batch=b.batch_size, bos_id=bos))
    if not cases:
        print("bench: no (checkpoint, sampler) pairs to run", file=sys.stderr)
        return 1
    report = throughput_bench(cases, warmup=b.warmup, repeats=b.repeats, seed=cfg.seed)
    write_bench_csv(report, out / "bench.csv")
    from .reporting import render_bench_figures

    figures = render_bench_figures(report, out)
    print(f"wrote {out / 'bench.csv'} and {len(figures)} figure(s)")
    return 0


def cmd_halton(args) -> int:
    cells = halton_schedule(args.H)
    lines = [f"{r},{c}" for r, c in cells]
    text = "row,col\n" + "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(cells)} cells to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="path to a JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partgen",
                                     description="Partition generative models at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("sample", cmd_sample), ("distill", cmd_distill),
                     ("eval", cmd_eval), ("bench", cmd_bench)):
        p = sub.add_parser(name)
        _add_config_flags(p)
        p.set_defaults(fn=fn)
    p = sub.add_parser("halton")
    p.add_argument("--H", type=int, required=True, help="grid side length")
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.set_defaults(fn=cmd_halton)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"partgen {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
