"""Seeded synthetic corpus: order-1 Markov chains, one per regime, and fleet partitioning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MarkovCorpus:
    vocab_size: int
    n_regimes: int
    seq_len: int  # tokens per sequence, including the final target
    transitions: np.ndarray  # (regimes, vocab, vocab), rows sum to 1
    initial: np.ndarray  # (regimes, vocab)

    @classmethod
    def generate(
        cls, vocab_size: int, n_regimes: int, seq_len: int, seed, concentration: float = 0.1
    ) -> "MarkovCorpus":
        rng = np.random.default_rng(seed)
        alpha = np.full(vocab_size, concentration)
        trans = rng.dirichlet(alpha, size=(n_regimes, vocab_size))
        init = rng.dirichlet(np.ones(vocab_size), size=n_regimes)
        return cls(vocab_size, n_regimes, seq_len, trans, init)

    def sample(self, n: int, regime_probs, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        probs = np.asarray(regime_probs, dtype=np.float64)
        regimes = rng.choice(self.n_regimes, size=n, p=probs / probs.sum())
        seqs = np.empty((n, self.seq_len), dtype=np.int64)
        seqs[:, 0] = _draw(self.initial[regimes], rng)
        for t in range(1, self.seq_len):
            seqs[:, t] = _draw(self.transitions[regimes, seqs[:, t - 1]], rng)
        return seqs, regimes

    def uniform_mixture(self) -> np.ndarray:
        return np.full(self.n_regimes, 1.0 / self.n_regimes)


def _draw(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(rows, axis=1)
    u = rng.random(rows.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), rows.shape[1] - 1)


@dataclass(frozen=True)
class Shard:
    device_id: int
    sequences: np.ndarray
    mixture: np.ndarray
    regimes: np.ndarray

    def __len__(self) -> int:
        return int(self.sequences.shape[0])


def partition_data(
    corpus: MarkovCorpus,
    fleet_size: int,
    n_sequences: int,
    scheme: str = "iid",
    seed=0,
    alpha: float = 1.0,
) -> list[Shard]:
    """Split ``n_sequences`` fresh sequences across the fleet.

    ``iid`` draws one uniform-mixture pool and deals it round-robin.
    ``dirichlet`` gives each device its own regime mixture ~ Dirichlet(alpha).
    """
    if fleet_size < 1:
        raise ValueError("fleet_size must be >= 1")
    if n_sequences < fleet_size:
        raise ValueError("need at least one sequence per device")
    rng = np.random.default_rng(seed)
    if scheme == "iid":
        seqs, regimes = corpus.sample(n_sequences, corpus.uniform_mixture(), rng)
        return [
            Shard(d, seqs[d::fleet_size], corpus.uniform_mixture(), regimes[d::fleet_size])
            for d in range(fleet_size)
        ]
    if scheme == "dirichlet":
        mixtures = rng.dirichlet(np.full(corpus.n_regimes, float(alpha)), size=fleet_size)
        base, extra = divmod(n_sequences, fleet_size)
        shards = []
        for d in range(fleet_size):
            seqs, regimes = corpus.sample(base + (d < extra), mixtures[d], rng)
            shards.append(Shard(d, seqs, mixtures[d], regimes))
        return shards
    raise ValueError(f"unknown data scheme {scheme!r}")
