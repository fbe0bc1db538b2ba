"""Importance-aware selection within groups, plus heuristic pruning baselines."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import KeepTooLarge
from .macro import Grouping
from .similarity import ActivationSet, SimilarityMatrix


@dataclass(frozen=True)
class ImportanceScores:
    sigma: np.ndarray  # sigma[n-1] belongs to unit n


def importance_scores(sim: SimilarityMatrix) -> ImportanceScores:
    """One minus the CKA between a unit's input and output."""
    return ImportanceScores(sigma=1.0 - np.asarray(sim.adjacent, dtype=np.float64))


@dataclass(frozen=True)
class GroupSelection:
    members: tuple[int, ...]
    probabilities: tuple[float, ...]
    chosen: int | None = None

    def to_json(self) -> dict:
        return {
            "members": list(self.members),
            "probabilities": list(self.probabilities),
            "chosen": self.chosen,
        }


@dataclass(frozen=True)
class SelectionPlan:
    groups: tuple[GroupSelection, ...]
    mode: str = "layer"

    @property
    def chosen(self) -> list[int]:
        if any(g.chosen is None for g in self.groups):
            raise ValueError("representatives not sampled yet")
        return sorted(g.chosen for g in self.groups)

    def to_json(self) -> dict:
        return {"mode": self.mode, "groups": [g.to_json() for g in self.groups]}


def group_softmax(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    z = np.exp(v - v.max())
    return z / z.sum()


def selection_probabilities(
    sigma: ImportanceScores, grouping: Grouping, mode: str = "layer"
) -> SelectionPlan:
    s = np.asarray(sigma.sigma, dtype=np.float64)
    grouping.validate(len(s))
    groups = []
    for members in grouping.groups:
        p = group_softmax(s[[m - 1 for m in members]])
        groups.append(GroupSelection(members=members, probabilities=tuple(float(x) for x in p)))
    return SelectionPlan(groups=tuple(groups), mode=mode)


def sample_representatives(plan: SelectionPlan, seed) -> SelectionPlan:
    """Draw one member per group by inverse CDF.

    ``seed`` may be an int or a ``numpy.random.Generator`` (consumed in place).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for g in plan.groups:
        cdf = np.cumsum(g.probabilities)
        idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        idx = min(idx, len(g.members) - 1)
        out.append(replace(g, chosen=g.members[idx]))
    return replace(plan, groups=tuple(out))


class BaselineKind(str, enum.Enum):
    RANDOM = "random"
    MIDDLE = "middle"
    NORM = "norm"
    RM = "rm"
    BI = "bi"
    DEEP = "deep"


def _top_keep(scores: np.ndarray, keep: int) -> list[int]:
    # stable sort on -score: ties go to the lower unit index
    order = np.argsort(-scores, kind="stable")
    return sorted(int(i) + 1 for i in order[:keep])


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.linalg.norm(x, axis=1)


def unit_norm_scores(acts: ActivationSet) -> np.ndarray:
    return np.array([_row_norms(acts[n]).mean() for n in range(1, acts.n_units + 1)])


def relative_magnitude_scores(acts: ActivationSet) -> np.ndarray:
    """Mean over rows of ||f(x)|| / ||x + f(x)||, with f(x) the residual delta."""
    out = []
    for n in range(1, acts.n_units + 1):
        x, y = acts[n - 1], acts[n]
        out.append(np.mean(_row_norms(y - x) / np.maximum(_row_norms(y), 1e-30)))
    return np.array(out)


def block_influence_scores(acts: ActivationSet) -> np.ndarray:
    """One minus mean row-wise cosine between unit input and output."""
    out = []
    for n in range(1, acts.n_units + 1):
        x, y = acts[n - 1], acts[n]
        denom = np.maximum(_row_norms(x) * _row_norms(y), 1e-30)
        out.append(1.0 - np.mean(np.sum(x * y, axis=1) / denom))
    return np.array(out)


def baseline_select(
    kind,
    n_units: int,
    keep: int,
    acts: ActivationSet | None = None,
    sim: SimilarityMatrix | None = None,
    seed=0,
) -> list[int]:
    """Sorted list of the ``keep`` units retained by a heuristic strategy.

    ``sim`` is accepted for interface symmetry; none of the six heuristics
    needs more than the captured activations.
    """
    kind = BaselineKind(kind)
    if keep > n_units:
        raise KeepTooLarge(f"keep={keep} exceeds {n_units} units")
    if keep < 1:
        raise ValueError("keep must be >= 1")
    n_prune = n_units - keep

    if kind is BaselineKind.RANDOM:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return sorted(int(u) + 1 for u in rng.choice(n_units, size=keep, replace=False))
    if kind is BaselineKind.MIDDLE:
        center = -(-n_units // 2)
        start = center - (n_prune - 1) // 2
        start = min(max(start, 1), n_units - n_prune + 1)
        pruned = set(range(start, start + n_prune))
        return [u for u in range(1, n_units + 1) if u not in pruned]
    if kind is BaselineKind.DEEP:
        candidates = list(range(1, n_units))  # the final unit is never pruned
        pruned = set(candidates[len(candidates) - n_prune:]) if n_prune else set()
        return [u for u in range(1, n_units + 1) if u not in pruned]

    if acts is None or acts.n_units != n_units:
        raise ValueError(f"{kind.value} baseline needs activations for {n_units} units")
    if kind is BaselineKind.NORM:
        scores = unit_norm_scores(acts)
    elif kind is BaselineKind.RM:
        scores = relative_magnitude_scores(acts)
    else:
        scores = block_influence_scores(acts)
    return _top_keep(scores, keep)
