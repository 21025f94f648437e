"""Corpus ingestion and synthetic data generators.

The byte-level vocabulary keeps the artifact self-contained: 256 byte
values, BOS (256), EOS (257) — 258 real tokens — plus the reserved mask
id 258 used only by the masked baseline.

Synthetic generators come with their ground truth attached: the Markov
corpus carries its analytic entropy rate, and the factorized corpus its
exact per-position marginals, so evaluation code can be checked against
closed-form answers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

BYTE_VOCAB = 256
BYTE_BOS = 256
BYTE_EOS = 257
BYTE_N = 258  # real tokens; the mask id equals this


@dataclass
class Corpus:
    """Fixed-length token windows plus their vocabulary manifest."""

    sequences: torch.Tensor  # (n, L) int64
    vocab_size: int          # number of real tokens N (mask id == N)
    bos_id: int
    eos_id: int
    kind: str = "generic"
    meta: dict = field(default_factory=dict)

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def L(self) -> int:
        return int(self.sequences.shape[1])

    def __len__(self) -> int:
        return int(self.sequences.shape[0])

    def split(self, n_val: int) -> tuple["Corpus", "Corpus"]:
        """Deterministic tail split into (train, val)."""
        if not 0 < n_val < len(self):
            raise ValueError("n_val must leave both splits nonempty")
        train = Corpus(self.sequences[:-n_val], self.vocab_size, self.bos_id,
                       self.eos_id, self.kind, dict(self.meta))
        val = Corpus(self.sequences[-n_val:], self.vocab_size, self.bos_id,
                     self.eos_id, self.kind, dict(self.meta))
        return train, val


def ingest_text(path, L: int, vocab: str = "byte_level") -> Corpus:
    """Byte-level tokenization with document packing.

    Documents (blank-line separated) are concatenated with an EOS token
    after each; the stream is cut into windows of ``L - 1`` tokens, each
    prefixed with BOS.  A trailing partial window is padded with EOS.

    Raises:
        ValueError: On an empty file or unknown vocabulary.
    """
    if vocab != "byte_level":
        raise ValueError(f"unknown vocabulary {vocab!r}")
    raw = Path(path).read_bytes()
    if not raw:
        raise ValueError(f"{path}: empty input")
    docs = [d for d in raw.split(b"\n\n") if d]
    stream: list[int] = []
    for doc in docs:
        stream.extend(doc)
        stream.append(BYTE_EOS)
    body = L - 1
    windows = []
    for start in range(0, len(stream), body):
        chunk = stream[start: start + body]
        chunk = chunk + [BYTE_EOS] * (body - len(chunk))
        windows.append([BYTE_BOS] + chunk)
    return Corpus(
        sequences=torch.tensor(windows, dtype=torch.long),
        vocab_size=BYTE_N,
        bos_id=BYTE_BOS,
        eos_id=BYTE_EOS,
        kind="byte",
        meta={"n_documents": len(docs), "n_input_bytes": sum(len(d) for d in docs)},
    )


class MarkovChain:
    """An order-1 chain with a known transition matrix."""

    def __init__(self, transition: np.ndarray):
        transition = np.asarray(transition, dtype=np.float64)
        if transition.ndim != 2 or transition.shape[0] != transition.shape[1]:
            raise ValueError("transition matrix must be square")
        if not np.allclose(transition.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")
        self.P = transition

    @classmethod
    def random(cls, states: int, seed: int) -> "MarkovChain":
        if states < 2:
            raise ValueError("need at least 2 states")
        rows = np.random.default_rng(seed).gamma(1.0, size=(states, states))
        return cls(rows / rows.sum(axis=1, keepdims=True))

    def stationary(self) -> np.ndarray:
        """Left eigenvector of P at eigenvalue 1, normalized to a distribution."""
        w, v = np.linalg.eig(self.P.T)
        pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
        pi = np.abs(pi)
        return pi / pi.sum()

    def entropy_rate(self) -> float:
        """H = -sum_s pi_s sum_s' P(s'|s) ln P(s'|s) in nats."""
        pi = self.stationary()
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(self.P > 0, self.P * np.log(self.P), 0.0)
        return float(-(pi * plogp.sum(axis=1)).sum())

    def sample(self, n_sequences: int, length: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        S = self.P.shape[0]
        pi = self.stationary()
        out = np.empty((n_sequences, length), dtype=np.int64)
        out[:, 0] = rng.choice(S, size=n_sequences, p=pi)
        cdf = np.cumsum(self.P, axis=1)
        for j in range(1, length):
            u = rng.random(n_sequences)
            out[:, j] = (u[:, None] < cdf[out[:, j - 1]]).argmax(axis=1)
        return out


def synth_markov(
    order: int = 1,
    states: int = 16,
    seed: int = 0,
    n_sequences: int = 4096,
    L: int = 32,
) -> tuple[Corpus, float]:
    """BOS-prefixed windows from a random order-1 chain, plus its entropy rate.

    Vocabulary: the ``states`` state ids, then BOS and EOS (EOS is unused
    by the generator but reserved so the layout matches text corpora).
    """
    if order != 1:
        raise ValueError("only order-1 chains are supported")
    chain = MarkovChain.random(states, seed)
    body = chain.sample(n_sequences, L - 1, seed + 1)
    bos = states
    seqs = np.concatenate([np.full((n_sequences, 1), bos, dtype=np.int64), body], axis=1)
    corpus = Corpus(
        sequences=torch.from_numpy(seqs),
        vocab_size=states + 2,
        bos_id=bos,
        eos_id=states + 1,
        kind="markov",
        meta={"states": states, "entropy_rate": chain.entropy_rate(), "seed": seed},
    )
    return corpus, chain.entropy_rate()


class FactorizedDistribution:
    """Independent per-position categorical marginals with exact log-probs."""

    def __init__(self, marginals: np.ndarray):
        marginals = np.asarray(marginals, dtype=np.float64)
        if not np.allclose(marginals.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("marginal rows must sum to 1")
        self.marginals = marginals

    @classmethod
    def random(cls, L: int, vocab: int, seed: int, spread: float = 2.0) -> "FactorizedDistribution":
        """Marginals ``softmax(spread * N(0, 1))``; larger spread = peakier."""
        z = np.random.default_rng(seed).standard_normal((L, vocab)) * spread
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return cls(e / e.sum(axis=1, keepdims=True))

    def sample(self, n: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        L, V = self.marginals.shape
        out = np.empty((n, L), dtype=np.int64)
        for j in range(L):
            out[:, j] = rng.choice(V, size=n, p=self.marginals[j])
        return out

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        """Exact joint log-probability per sequence, shape (n,)."""
        x = np.atleast_2d(x)
        logm = np.log(self.marginals)
        return logm[np.arange(x.shape[1])[None, :], x].sum(axis=1)


def synth_factorized(
    L: int = 16,
    vocab: int = 10,
    seed: int = 0,
    n_sequences: int = 4096,
    spread: float = 2.0,
) -> tuple[Corpus, FactorizedDistribution]:
    dist = FactorizedDistribution.random(L, vocab, seed, spread)
    seqs = dist.sample(n_sequences, seed + 1)
    corpus = Corpus(
        sequences=torch.from_numpy(seqs),
        vocab_size=vocab,
        bos_id=-1,
        eos_id=-1,
        kind="factorized",
        meta={"seed": seed, "spread": spread},
    )
    return corpus, dist
