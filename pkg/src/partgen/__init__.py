"""Partition generative models at desk scale.

Any-order parallel token generation that processes only clean tokens at
inference, alongside a masked-diffusion baseline, the samplers and
distillation recipe shared by both, and a benchmark harness for the
efficiency claims.
"""

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .data import Corpus, FactorizedDistribution, MarkovChain, ingest_text, synth_factorized, synth_markov
from .distillation import DistillConfig, DistillTargets, build_sdtt_targets, sdtt_round, sdtt_student_loss
from .evaluation import (
    BenchCase,
    BenchReport,
    ModelScorer,
    NgramScorer,
    UniformScorer,
    generative_perplexity,
    latency_scaling,
    nelbo_perplexity,
    rank_continuations,
    throughput_bench,
    unigram_entropy,
    write_bench_csv,
)
from .mdlm_model import MdlmConfig, MdlmTransformer, mdlm_forward
from .nn_core import build_group_attention_mask, sinusoidal_positions
from .partition_model import (
    PartitionConfig,
    PartitionTransformer,
    groupswap_queries,
    pgm_forward_train,
    pgm_predict,
)
from .samplers import (
    SampleTrace,
    categorical_sample,
    cfg_combine,
    confidence_sample_step,
    count_token_positions,
    extract_predictions,
    get_sampler,
    halton_position_order,
    halton_schedule,
    mdlm_ancestral_sample,
    mdlm_confidence_sample,
    nucleus_filter,
    pgm_sample_halton,
    pgm_sample_mdlm_equivalent,
    pgm_sample_simple,
    posterior_probs,
    radical_inverse,
    sample_noisy,
    write_samples,
    write_trace_csv,
)
from .schedules import (
    CorruptedSequence,
    NoiseSchedule,
    alpha_at,
    complementary_mask_pair,
    get_schedule,
    linear_schedule,
    log_linear_schedule,
    loss_weight_mgm,
    loss_weight_pgm,
    mask_sequence,
    sample_group_assignment,
)
from .training import (
    Ema,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    complementary_mgm_loss,
    gradient_variance_probe,
    mgm_loss,
    pgm_loss,
    train,
)

__version__ = "0.1.0"
