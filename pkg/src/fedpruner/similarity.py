"""Linear-kernel HSIC / CKA between unit activations and the similarity matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateActivations, RowMismatch, TooFewSamples
from .linalg import as_dense

EPS = 1e-12


def _check_pair(a, b):
    a = as_dense(a, "a")
    b = as_dense(b, "b")
    if a.shape[0] != b.shape[0]:
        raise RowMismatch(f"row counts differ: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise TooFewSamples("need at least two rows")
    return a, b


def _center(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=0, keepdims=True)


def hsic_linear(a, b) -> float:
    """Biased empirical HSIC with linear kernels, normalised by (n-1)^2.

    Evaluated in feature space as ||a_c^T b_c||_F^2 / (n-1)^2, which equals
    tr(H a a^T H b b^T) / (n-1)^2 without forming the n x n Gram matrices.
    """
    a, b = _check_pair(a, b)
    n = a.shape[0]
    cross = _center(a).T @ _center(b)
    val = float(np.sum(cross * cross)) / (n - 1) ** 2
    return max(val, 0.0)


def cka(a, b) -> float:
    a, b = _check_pair(a, b)
    hab = hsic_linear(a, b)
    haa = hsic_linear(a, a)
    hbb = hsic_linear(b, b)
    if haa <= EPS:
        raise DegenerateActivations("first argument has constant activations")
    if hbb <= EPS:
        raise DegenerateActivations("second argument has constant activations")
    return float(min(max(hab / np.sqrt(haa * hbb), 0.0), 1.0))


@dataclass(frozen=True)
class ActivationSet:
    """Residual-stream states: index 0 is the embedding output, 1..M follow each unit."""

    unit_outputs: tuple[np.ndarray, ...]

    def __post_init__(self):
        outs = tuple(as_dense(x, "activation") for x in self.unit_outputs)
        if len(outs) < 1:
            raise ValueError("activation set is empty")
        rows = {x.shape[0] for x in outs}
        if len(rows) != 1:
            raise RowMismatch("activation matrices have differing row counts")
        if outs[0].shape[0] < 2:
            raise TooFewSamples("need at least two rows")
        object.__setattr__(self, "unit_outputs", outs)

    @property
    def n_units(self) -> int:
        return len(self.unit_outputs) - 1

    def __getitem__(self, i: int) -> np.ndarray:
        return self.unit_outputs[i]


@dataclass(frozen=True)
class SimilarityMatrix:
    """``w[i-1, j-1]`` is CKA between units i and j; ``adjacent[n-1]`` compares unit n to its input."""

    w: np.ndarray
    adjacent: np.ndarray

    @property
    def n(self) -> int:
        return self.w.shape[0]


def build_similarity(acts: ActivationSet) -> SimilarityMatrix:
    n = acts.n_units
    centered = [_center(x) for x in acts.unit_outputs]
    norms = []
    for idx, c in enumerate(centered):
        self_h = float(np.sum((c.T @ c) ** 2))
        rows = c.shape[0]
        if self_h / (rows - 1) ** 2 <= EPS:
            raise DegenerateActivations(f"unit {idx} has constant activations", unit=idx)
        norms.append(np.sqrt(self_h))

    def pair(i, j):
        cross = centered[i].T @ centered[j]
        val = float(np.sum(cross * cross)) / (norms[i] * norms[j])
        return min(max(val, 0.0), 1.0)

    w = np.eye(n)
    for i in range(1, n + 1):
        for j in range(i + 1, n + 1):
            w[i - 1, j - 1] = w[j - 1, i - 1] = pair(i, j)
    adjacent = np.array([pair(k - 1, k) for k in range(1, n + 1)])
    return SimilarityMatrix(w=w, adjacent=adjacent)


def similarity_to_csv(sim: SimilarityMatrix) -> str:
    lines = [",".join(repr(float(v)) for v in row) for row in sim.w]
    return "\n".join(lines) + "\n"
