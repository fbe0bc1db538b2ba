"""Round orchestration: device fleet, per-device submodel construction, training, aggregation.

Randomness flows from one experiment seed through ``numpy.random.SeedSequence``
keyed by (stream, round, device), so results do not depend on thread timing.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

import numpy as np

from .aggregation import DeviceUpdate, ServerState, aggregate_round
from .config import ExperimentConfig, RunConfig, memory_for
from .data import MarkovCorpus, Shard, partition_data
from .errors import DeviceExcluded, NoEligibleDevices
from .macro import Grouping, partition_units
from .memory import MemoryModel, affordable_units
from .micro import (
    SelectionPlan,
    baseline_select,
    importance_scores,
    sample_representatives,
    selection_probabilities,
)
from .model import (
    Batch,
    SubmodelPlan,
    ToyTransformer,
    assemble_submodel,
    cosine_schedule,
    cross_entropy,
    forward,
    full_plan,
    init_model,
    local_finetune,
    sample_batch,
)
from .similarity import SimilarityMatrix, build_similarity

# SeedSequence stream tags
_MODEL, _DATA, _BUDGET, _PARTICIPANTS, _DEVICE, _FOLD, _EVAL = range(7)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


@dataclass(frozen=True)
class DeviceProfile:
    id: int
    memory_budget: float
    shard: Shard
    strategy: str | None = None


@dataclass(frozen=True)
class DeviceResult:
    device_id: int
    budget: float
    units_affordable: int
    grouping: Grouping | None
    selection: SelectionPlan | None
    plan: SubmodelPlan
    losses: list[float]
    memory_estimate: float
    update: DeviceUpdate
    similarity: SimilarityMatrix | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "id": self.device_id,
            "budget": self.budget,
            "k": self.units_affordable,
            "grouping": [list(g) for g in self.grouping.groups] if self.grouping else None,
            "probabilities": [list(g.probabilities) for g in self.selection.groups] if self.selection else None,
            "plan": self.plan.labels(),
            "memory_estimate": self.memory_estimate,
            "losses": self.losses,
        }


@dataclass(frozen=True)
class RoundRecord:
    round: int
    participants: list[int]
    devices: list[DeviceResult]
    aggregation: dict
    eval_loss: float
    eval_perplexity: float
    eligible: int

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "participants": self.participants,
            "eligible": self.eligible,
            "devices": [d.to_json() for d in self.devices],
            "aggregation": {
                "updated": self.aggregation["updated"],
                "persisted": self.aggregation["persisted"],
                "contributors": self.aggregation["contributors"],
            },
            "eval_loss": self.eval_loss,
            "eval_perplexity": self.eval_perplexity,
        }


def evaluate(model: ToyTransformer, eval_set, batch_size: int = 64) -> tuple[float, float]:
    """Mean token cross-entropy of the full model and its perplexity."""
    seqs = np.asarray(eval_set)
    if seqs.shape[0] == 0:
        raise ValueError("eval set is empty")
    plan = full_plan(model.cfg)
    total, count = 0.0, 0
    for start in range(0, seqs.shape[0], batch_size):
        batch = Batch.from_sequences(seqs[start : start + batch_size])
        value, _ = cross_entropy(forward(model, plan, batch), batch.targets)
        total += value * batch.targets.size
        count += batch.targets.size
    mean = total / count
    return mean, math.exp(mean)


def build_submodel(
    model: ToyTransformer,
    strategy: str,
    units: int,
    probe: Batch,
    rng: np.random.Generator,
) -> tuple[SubmodelPlan, Grouping | None, SelectionPlan | None, SimilarityMatrix | None]:
    """Choose the units a device will fine-tune this round.

    ``units`` is K in layer mode and 2K for ``fedpruner_plus``.
    """
    cfg = model.cfg
    if strategy == "full":
        return full_plan(cfg), None, None, None
    mode = "component" if strategy == "fedpruner_plus" else "layer"
    n_units = cfg.n_layers * (2 if mode == "component" else 1)
    acts = sim = None
    if strategy in ("fedpruner", "fedpruner_plus", "norm", "rm", "bi"):
        _, acts = forward(model, full_plan(cfg, mode), probe, capture=True)
    if strategy in ("fedpruner", "fedpruner_plus"):
        sim = build_similarity(acts)
        grouping = partition_units(sim, units, seed=int(rng.integers(2**31)))
        probs = selection_probabilities(importance_scores(sim), grouping, mode=mode)
        selection = sample_representatives(probs, rng)
        return assemble_submodel(selection.chosen, mode), grouping, selection, sim
    kept = baseline_select(strategy, n_units, units, acts=acts, seed=rng)
    return assemble_submodel(kept, mode), None, None, None


class Federation:
    """One experiment: fleet, server state, held-out set and the round loop."""

    def __init__(self, run: RunConfig | ExperimentConfig, memory: MemoryModel | None = None):
        if isinstance(run, ExperimentConfig):
            run = RunConfig(experiment=run, memory=memory or memory_for(run))
        self.run_cfg = run
        self.cfg: ExperimentConfig = run.experiment
        self.memory: MemoryModel = run.memory
        cfg = self.cfg
        mcfg = cfg.model
        seed = cfg.seed
        self.corpus = MarkovCorpus.generate(
            mcfg.vocab_size, cfg.n_regimes, mcfg.max_seq + 1, _rng(seed, _DATA, 0),
            concentration=cfg.transition_concentration,
        )
        shards = partition_data(
            self.corpus, cfg.fleet_size, cfg.fleet_size * cfg.sequences_per_device,
            scheme=cfg.data_scheme, seed=_rng(seed, _DATA, 1), alpha=cfg.dirichlet_alpha,
        )
        self.eval_set, _ = self.corpus.sample(cfg.eval_sequences, self.corpus.uniform_mixture(), _rng(seed, _DATA, 2))
        self.devices = [DeviceProfile(s.device_id, b, s) for s, b in zip(shards, self._budgets())]
        self.units = {}
        for dev in self.devices:
            try:
                self.units[dev.id] = affordable_units(self.memory, dev, mcfg, cfg.mode)
            except DeviceExcluded:
                pass
        self.eligible = sorted(self.units)
        self.server = ServerState(model=init_model(mcfg, int(_rng(seed, _MODEL).integers(2**31))))
        self.records: list[RoundRecord] = []

    def _budgets(self) -> list[float]:
        cfg, mm, mcfg = self.cfg, self.memory, self.cfg.model
        if cfg.strategy == "full":
            return [mm.full_model_estimate(mcfg)] * cfg.fleet_size
        if cfg.budget_units is not None:
            return [mm.budget_for_units(mcfg, cfg.budget_units)] * cfg.fleet_size
        hi = cfg.budget_units_high if cfg.budget_units_high is not None else mcfg.n_layers + 0.99
        draws = _rng(cfg.seed, _BUDGET).uniform(cfg.budget_units_low, hi, size=cfg.fleet_size)
        return [mm.budget_for_units(mcfg, float(u)) for u in draws]

    def participants(self, round_index: int) -> list[int]:
        if not self.eligible:
            raise NoEligibleDevices("no device can afford a one-unit submodel")
        m = math.ceil(self.cfg.participation * len(self.eligible) - 1e-12)
        m = min(max(m, 1), len(self.eligible))
        rng = _rng(self.cfg.seed, _PARTICIPANTS, round_index)
        return sorted(int(i) for i in rng.choice(self.eligible, size=m, replace=False))

    def _device_step(self, model: ToyTransformer, dev: DeviceProfile, round_index: int) -> DeviceResult:
        cfg = self.cfg
        rng = _rng(cfg.seed, _DEVICE, round_index, dev.id)
        strategy = dev.strategy or cfg.strategy
        shard = dev.shard.sequences
        probe = sample_batch(shard, cfg.batch_size, rng)
        units = self.units[dev.id]
        plan, grouping, selection, sim = build_submodel(model, strategy, units, probe, rng)
        schedule = cosine_schedule(
            cfg.lr_max, cfg.lr_min, cfg.rounds * cfg.local_steps, offset=round_index * cfg.local_steps
        )
        adapters, losses = local_finetune(
            model, plan, shard, cfg.local_steps, schedule, cfg.batch_size, rng, optimizer=cfg.optimizer
        )
        update = DeviceUpdate(dev.id, len(dev.shard), adapters, tuple(plan.labels()))
        return DeviceResult(
            device_id=dev.id,
            budget=dev.memory_budget,
            units_affordable=units,
            grouping=grouping,
            selection=selection,
            plan=plan,
            losses=[float(x) for x in losses],
            memory_estimate=self.memory.estimate(cfg.model, plan),
            update=update,
            similarity=sim,
        )

    def preview(self, model: ToyTransformer, device_id: int, round_index: int, units: int | None = None) -> dict:
        """Replay a device's selection step on ``model`` without training.

        Uses the same RNG stream as the real round, so with ``units=None`` the
        plan equals what that device would build in ``round_index``. The
        similarity matrix is always computed, whatever the strategy.
        """
        if device_id not in self.units:
            raise DeviceExcluded(f"device {device_id} is not eligible")
        cfg = self.cfg
        dev = self.devices[device_id]
        rng = _rng(cfg.seed, _DEVICE, round_index, dev.id)
        probe = sample_batch(dev.shard.sequences, cfg.batch_size, rng)
        k = self.units[dev.id] if units is None else int(units)
        plan, grouping, selection, sim = build_submodel(model, dev.strategy or cfg.strategy, k, probe, rng)
        if sim is None:
            _, acts = forward(model, full_plan(model.cfg, cfg.mode), probe, capture=True)
            sim = build_similarity(acts)
        if grouping is None:
            grouping = partition_units(sim, k, seed=0)
        return {"plan": plan, "grouping": grouping, "selection": selection, "similarity": sim, "units": k}

    def run_round(self, round_index: int | None = None) -> RoundRecord:
        r = len(self.records) if round_index is None else round_index
        chosen = self.participants(r)
        model = self.server.model
        devs = [self.devices[i] for i in chosen]
        if self.cfg.workers > 1 and len(devs) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.workers) as pool:
                results = list(pool.map(lambda d: self._device_step(model, d, r), devs))
        else:
            results = [self._device_step(model, d, r) for d in devs]
        results.sort(key=lambda res: res.device_id)
        self.server, summary = aggregate_round(
            self.server, [res.update for res in results], _rng(self.cfg.seed, _FOLD, r)
        )
        loss, ppl = evaluate(self.server.model, self.eval_set)
        record = RoundRecord(r, chosen, results, summary, loss, ppl, len(self.eligible))
        self.records.append(record)
        return record

    def initial_eval(self) -> tuple[float, float]:
        return evaluate(self.server.model, self.eval_set)

    def unit_labels(self) -> list[str]:
        return full_plan(self.cfg.model, self.cfg.mode).labels()

    def run(self, on_round: Callable[[RoundRecord, "Federation"], None] | None = None) -> dict:
        init_loss, init_ppl = self.initial_eval()
        for r in range(self.cfg.rounds):
            rec = self.run_round(r)
            if on_round is not None:
                on_round(rec, self)
        return self.summary(init_loss, init_ppl)

    def summary(self, init_loss: float, init_ppl: float) -> dict:
        final_loss, final_ppl = (
            (self.records[-1].eval_loss, self.records[-1].eval_perplexity) if self.records else (init_loss, init_ppl)
        )
        return {
            "strategy": self.cfg.strategy,
            "seed": self.cfg.seed,
            "rounds": len(self.records),
            "fleet_size": self.cfg.fleet_size,
            "eligible_devices": self.eligible,
            "excluded_devices": [d.id for d in self.devices if d.id not in self.units],
            "initial_eval_loss": init_loss,
            "initial_eval_perplexity": init_ppl,
            "final_eval_loss": final_loss,
            "final_eval_perplexity": final_ppl,
            "frequency": layer_frequency_report(self.records, self.unit_labels()),
        }


def run_experiment(cfg: RunConfig | ExperimentConfig, memory: MemoryModel | None = None):
    """Run all rounds; returns ``(records, summary)``."""
    fed = Federation(cfg, memory)
    summary = fed.run()
    return fed.records, summary


def layer_frequency_report(records: Iterable[RoundRecord], unit_labels: list[str] | None = None) -> dict:
    """How often each unit appeared in a participant's plan, fleet-wide and per device."""
    records = list(records)
    labels = list(unit_labels or [])
    fleet = {lab: 0 for lab in labels}
    per_device: dict[str, dict[str, int]] = {}
    for rec in records:
        for dev in rec.devices:
            row = per_device.setdefault(str(dev.device_id), {lab: 0 for lab in labels})
            for lab in dev.plan.labels():
                fleet[lab] = fleet.get(lab, 0) + 1
                row[lab] = row.get(lab, 0) + 1
    per_device = {k: per_device[k] for k in sorted(per_device, key=int)}
    return {"fleet": fleet, "per_device": per_device}


def with_strategy(cfg: RunConfig, strategy: str, seed: int | None = None) -> RunConfig:
    kwargs = {"strategy": strategy}
    if seed is not None:
        kwargs["seed"] = seed
    return replace(cfg, experiment=replace(cfg.experiment, **kwargs))
