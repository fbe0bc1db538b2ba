"""Dense linear algebra substrate: validation, symmetric eigensolver, k-means.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Everything here
is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import KTooLarge, NotSquare, NotSymmetric


def as_dense(x, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a finite, 2-D float64 array (copying only when needed)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def inf_norm(m: np.ndarray) -> float:
    """Maximum absolute row sum."""
    if m.size == 0:
        return 0.0
    return float(np.max(np.sum(np.abs(m), axis=1)))


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # column j pairs with eigenvalues[j]

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def sym_eigen(m, tol: float = 1e-10, max_sweeps: int = 100) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    ``tol`` bounds the admissible asymmetry, relative to ``max(1, ||m||_inf)``.
    Eigenvalues come back ascending with unit-norm eigenvector columns.
    """
    a = as_dense(m)
    n, n2 = a.shape
    if n != n2:
        raise NotSquare(f"expected a square matrix, got {a.shape}")
    scale_inf = max(1.0, inf_norm(a))
    asym = float(np.max(np.abs(a - a.T))) if n else 0.0
    if asym > tol * scale_inf:
        raise NotSymmetric(f"asymmetry {asym:.3e} exceeds tolerance")

    a = 0.5 * (a + a.T)
    v = np.eye(n)
    fro = float(np.linalg.norm(a))
    for _ in range(max_sweeps):
        # direct sum; sum(a*a) - sum(diag^2) cancels and stalls near 1e-8 relative
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= 1e-15 * max(fro, 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) < 1e-18 * abs(diff):
                    t = apq / diff
                else:
                    tau = diff / (2.0 * apq)
                    t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq

    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    w = w[order]
    v = v[:, order]
    v = v / np.linalg.norm(v, axis=0, keepdims=True) if n else v
    return EigenDecomposition(eigenvalues=w, eigenvectors=v)


@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_history: tuple[float, ...] = field(default=(), repr=False)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _init_plusplus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [int(rng.integers(n))]
    closest = np.sum((points - points[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            cdf = np.cumsum(closest / total)
            idx = int(np.searchsorted(cdf, rng.random(), side="right"))
            idx = min(idx, n - 1)
        centers.append(idx)
        closest = np.minimum(closest, np.sum((points - points[idx]) ** 2, axis=1))
    return points[centers].copy()


def _repair_empty(points, assign, centroids, k):
    """Move the globally farthest point into each empty cluster."""
    for _ in range(k):
        counts = np.bincount(assign, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return assign, centroids
        target = int(empty[0])
        d = np.sum((points - centroids[assign]) ** 2, axis=1)
        # only donors that would not become empty themselves
        d = np.where(counts[assign] > 1, d, -1.0)
        idx = int(np.argmax(d))
        assign = assign.copy()
        assign[idx] = target
        centroids = centroids.copy()
        centroids[target] = points[idx]
    return assign, centroids


def _lloyd(points, centroids, k, max_iter):
    history = []
    assign = None
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new_assign = np.argmin(_sq_dists(points, centroids), axis=1)
        new_assign, centroids = _repair_empty(points, new_assign, centroids, k)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        centroids = np.stack([points[assign == j].mean(axis=0) for j in range(k)])
        history.append(float(np.sum((points - centroids[assign]) ** 2)))
    inertia = float(np.sum((points - centroids[assign]) ** 2))
    return assign, centroids, inertia, n_iter, history


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, n_init: int = 10) -> KMeansResult:
    """Lloyd's k-means with k-means++ seeding and empty-cluster repair.

    ``n_init`` independent seedings are drawn from one generator seeded by
    ``seed``; the lowest-inertia run wins (earliest on ties).
    """
    pts = as_dense(points, "points")
    n = pts.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > n:
        raise KTooLarge(f"k={k} exceeds number of points {n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = _init_plusplus(pts, k, rng)
        assign, cents, inertia, n_iter, hist = _lloyd(pts, init, k, max_iter)
        if best is None or inertia < best.inertia:
            best = KMeansResult(assign, cents, inertia, n_iter, tuple(hist))
    return best
