"""Functionality-driven grouping: similarity graph -> Laplacian -> spectral embedding -> k-means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientSpectrum
from .linalg import kmeans, sym_eigen
from .similarity import SimilarityMatrix


@dataclass(frozen=True)
class Grouping:
    """Disjoint, sorted, non-empty groups of 1-based unit indices covering 1..N."""

    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        groups = tuple(tuple(sorted(int(u) for u in g)) for g in self.groups)
        groups = tuple(sorted(groups, key=lambda g: g[0] if g else 0))
        object.__setattr__(self, "groups", groups)
        self.validate()

    def validate(self, n: int | None = None) -> None:
        members = [u for g in self.groups for u in g]
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("empty group")
        if len(set(members)) != len(members):
            raise ValueError("groups overlap")
        n = len(members) if n is None else n
        if sorted(members) != list(range(1, n + 1)):
            raise ValueError("groups do not cover units 1..N")

    @property
    def k(self) -> int:
        return len(self.groups)

    def to_json(self) -> dict:
        return {"k": self.k, "groups": [list(g) for g in self.groups]}


@dataclass(frozen=True)
class SpectralEmbedding:
    e: np.ndarray
    selected_eigenvalues: np.ndarray


def _w_of(w) -> np.ndarray:
    return np.asarray(w.w if isinstance(w, SimilarityMatrix) else w, dtype=np.float64)


def laplacian(w) -> np.ndarray:
    """Unnormalised Laplacian D - W with self-loops dropped."""
    adj = _w_of(w).copy()
    np.fill_diagonal(adj, 0.0)
    return np.diag(adj.sum(axis=1)) - adj


def spectral_embed(l, k: int, zero_tol: float = 1e-9) -> SpectralEmbedding:
    """Eigenvectors of the ``k`` smallest eigenvalues above ``zero_tol * lambda_max``."""
    dec = sym_eigen(l)
    lam = dec.eigenvalues
    lam_max = float(lam[-1]) if lam.size else 0.0
    threshold = zero_tol * max(lam_max, 0.0)
    nonzero = np.flatnonzero(lam > threshold) if lam_max > 0 else np.array([], dtype=int)
    if nonzero.size < k:
        raise InsufficientSpectrum(
            f"requested {k} non-zero eigenvalues, only {nonzero.size} available"
        )
    idx = nonzero[:k]
    return SpectralEmbedding(e=dec.eigenvectors[:, idx].copy(), selected_eigenvalues=lam[idx].copy())


def partition_units(
    w, k: int, seed: int = 0, zero_tol: float = 1e-9, n_eigvecs: int | None = None
) -> Grouping:
    """Partition units 1..N into ``k`` groups by spectral clustering of ``w``.

    Rows of the embedding use ``n_eigvecs`` non-trivial eigenvectors, ``k - 1``
    by default. That matches classical unnormalised spectral clustering (the
    constant null vector carries no information for k-means) and recovers
    planted blocks reliably. Pass ``n_eigvecs=k`` to embed with ``k`` non-zero
    eigenvectors instead.
    """
    n = _w_of(w).shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if k == n:
        return Grouping(tuple((u,) for u in range(1, n + 1)))
    if k == 1:
        return Grouping((tuple(range(1, n + 1)),))
    emb = spectral_embed(laplacian(w), k - 1 if n_eigvecs is None else n_eigvecs, zero_tol)
    res = kmeans(emb.e, k, seed=seed)
    groups = [tuple(int(i) + 1 for i in np.flatnonzero(res.assignments == j)) for j in range(k)]
    grouping = Grouping(tuple(groups))
    grouping.validate(n)
    return grouping
