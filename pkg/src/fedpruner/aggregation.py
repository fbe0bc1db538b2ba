"""Server-side stacking aggregation of heterogeneous partial LoRA updates.

Each device uploads adapters only for the units it trained. For every target
matrix the server concatenates the data-weighted A factors vertically and the
B factors horizontally, so the stacked product equals the weighted sum of the
per-device products. The product is then folded into a dense correction on
the frozen weight and fresh rank-r adapters are issued, which keeps device
memory constant from round to round.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyList, ShapeMismatch
from .model import LoraAdapter, ToyTransformer, fresh_adapter


@dataclass(frozen=True)
class DeviceUpdate:
    device_id: int
    shard_size: int
    adapters: Mapping[str, LoraAdapter]
    units: tuple[str, ...] = ()


@dataclass
class ServerState:
    model: ToyTransformer
    round: int = 0
    history: list = field(default_factory=list, repr=False)


def data_weights(shard_sizes: Sequence[int]) -> list[float]:
    sizes = [int(s) for s in shard_sizes]
    if not sizes:
        raise EmptyList("no shard sizes given")
    if min(sizes) < 1:
        raise ValueError("shard sizes must be >= 1")
    total = sum(sizes)
    return [s / total for s in sizes]


def aggregate_unit(
    adapters: Sequence[LoraAdapter], weights: Sequence[float], prev: LoraAdapter
) -> LoraAdapter:
    """Stack one target matrix's device adapters; return ``prev`` itself when none contributed."""
    if len(adapters) != len(weights):
        raise ShapeMismatch("one weight per adapter required")
    if not adapters:
        return prev
    in_dim, out_dim = prev.a.shape[1], prev.b.shape[0]
    for ad in adapters:
        if ad.a.shape[1] != in_dim or ad.b.shape[0] != out_dim or ad.a.shape[0] != ad.b.shape[1]:
            raise ShapeMismatch(f"adapter shapes {ad.a.shape}/{ad.b.shape} incompatible")
        if ad.scaling != prev.scaling:
            raise ShapeMismatch("adapters use different scaling factors")
    a = np.concatenate([lam * ad.a for ad, lam in zip(adapters, weights)], axis=0)
    b = np.concatenate([ad.b for ad in adapters], axis=1)
    return LoraAdapter(a=a, b=b, scaling=prev.scaling)


def stack_updates(
    model: ToyTransformer, updates: Sequence[DeviceUpdate]
) -> tuple[dict[str, LoraAdapter], dict[str, list[int]]]:
    """Aggregate every target matrix touched by at least one update.

    Contributions are ordered by device id. Weights are normalised over the
    devices that touched each matrix.
    """
    ordered = sorted(updates, key=lambda u: u.device_id)
    contributors: dict[str, list[DeviceUpdate]] = {}
    for upd in ordered:
        for key in upd.adapters:
            if key not in model.adapters:
                raise ShapeMismatch(f"unknown adapter key {key!r}")
            contributors.setdefault(key, []).append(upd)
    stacks = {}
    for key, ups in contributors.items():
        lam = data_weights([u.shard_size for u in ups])
        stacks[key] = aggregate_unit([u.adapters[key] for u in ups], lam, model.adapters[key])
    return stacks, {k: [u.device_id for u in v] for k, v in contributors.items()}


def fold_and_reset(server: ServerState, stacks: Mapping[str, LoraAdapter], seed) -> ServerState:
    """Merge stacked products into the dense corrections and reissue those adapters.

    Matrices absent from ``stacks`` keep their correction and adapter objects.
    """
    model = server.model
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    delta = dict(model.delta)
    adapters = dict(model.adapters)
    for key in sorted(stacks, key=_key_order(model)):
        delta[key] = model.delta[key] + stacks[key].delta()
        adapters[key] = fresh_adapter(model.cfg, key, rng)
    return ServerState(model=model.with_delta(delta, adapters), round=server.round + 1, history=server.history)


def _key_order(model: ToyTransformer):
    order = {k: i for i, k in enumerate(model.adapters)}
    return lambda k: order[k]


def aggregate_round(server: ServerState, updates: Sequence[DeviceUpdate], seed) -> tuple[ServerState, dict]:
    stacks, contributors = stack_updates(server.model, updates)
    new_state = fold_and_reset(server, stacks, seed)
    keys = list(server.model.adapters)
    summary = {
        "updated": [k for k in keys if k in stacks],
        "persisted": [k for k in keys if k not in stacks],
        "contributors": {k: contributors[k] for k in keys if k in contributors},
    }
    return new_state, summary
