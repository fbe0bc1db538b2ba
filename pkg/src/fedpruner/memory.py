"""Analytic training-memory model mapping a device budget to an affordable unit count."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DeviceExcluded
from .model import ModelConfig, Part, SubmodelPlan


@dataclass(frozen=True)
class MemoryModel:
    bytes_per_param: float = 4.0
    # gradient plus two Adam moments per trainable (LoRA) parameter
    optimizer_multiplier: float = 3.0
    activation_bytes: float = 4.0
    batch_size: int = 16
    seq_len: int = 32

    def __post_init__(self):
        for name in ("bytes_per_param", "optimizer_multiplier", "activation_bytes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ValueError("batch_size and seq_len must be >= 1")

    def part_params(self, cfg: ModelConfig, part: Part) -> int:
        d, f = cfg.d_model, cfg.d_ff
        if part is Part.MHA:
            return 4 * d * d + d
        if part is Part.FFN:
            return 2 * d * f + d
        return self.part_params(cfg, Part.MHA) + self.part_params(cfg, Part.FFN)

    def part_lora_params(self, cfg: ModelConfig, part: Part) -> int:
        d, f, r = cfg.d_model, cfg.d_ff, cfg.lora_rank
        if part is Part.MHA:
            return 4 * r * (d + d)
        if part is Part.FFN:
            return 2 * r * (d + f)
        return self.part_lora_params(cfg, Part.MHA) + self.part_lora_params(cfg, Part.FFN)

    def activation_bytes_per_unit(self, cfg: ModelConfig, part: Part) -> float:
        b, s, d, f = self.batch_size, self.seq_len, cfg.d_model, cfg.d_ff
        if part is Part.MHA:
            count = b * s * 5 * d + b * cfg.n_heads * s * s
        elif part is Part.FFN:
            count = b * s * (2 * d + 2 * f)
        else:
            return self.activation_bytes_per_unit(cfg, Part.MHA) + self.activation_bytes_per_unit(cfg, Part.FFN)
        return count * self.activation_bytes

    def part_cost(self, cfg: ModelConfig, part: Part) -> float:
        if part is Part.WHOLE:
            return self.part_cost(cfg, Part.MHA) + self.part_cost(cfg, Part.FFN)
        return (
            self.part_params(cfg, part) * self.bytes_per_param
            + self.part_lora_params(cfg, part) * self.bytes_per_param * self.optimizer_multiplier
            + self.activation_bytes_per_unit(cfg, part)
        )

    def fixed_cost(self, cfg: ModelConfig) -> float:
        """Embeddings, final norm, output head and the logits buffer."""
        params = 2 * cfg.vocab_size * cfg.d_model + cfg.max_seq * cfg.d_model + cfg.d_model
        logits = self.batch_size * self.seq_len * cfg.vocab_size
        return params * self.bytes_per_param + logits * self.activation_bytes

    def slot_cost(self, cfg: ModelConfig, mode: str) -> float:
        """Cost charged per affordable layer slot.

        Component mode charges two of the costlier component per slot, so any
        mix of 2K components fits the budget that admitted K slots.
        """
        if mode == "layer":
            return self.part_cost(cfg, Part.WHOLE)
        return 2 * max(self.part_cost(cfg, Part.MHA), self.part_cost(cfg, Part.FFN))

    def estimate(self, cfg: ModelConfig, plan: SubmodelPlan) -> float:
        counts = {Part.MHA: 0, Part.FFN: 0, Part.WHOLE: 0}
        for u in plan.units:
            counts[u.part] += 1
        return self.fixed_cost(cfg) + sum(n * self.part_cost(cfg, p) for p, n in counts.items() if n)

    def full_model_estimate(self, cfg: ModelConfig) -> float:
        return self.fixed_cost(cfg) + cfg.n_layers * self.part_cost(cfg, Part.WHOLE)

    def budget_for_units(self, cfg: ModelConfig, units: float) -> float:
        return self.fixed_cost(cfg) + units * self.part_cost(cfg, Part.WHOLE)


def affordable_units(mm: MemoryModel, device, cfg: ModelConfig, mode: str = "layer") -> int:
    """K for layer mode, 2K for component mode; raises DeviceExcluded when K would be 0."""
    budget = float(getattr(device, "memory_budget", device))
    if budget <= 0:
        raise ValueError("memory budget must be positive")
    fixed = mm.fixed_cost(cfg)
    slot = mm.slot_cost(cfg, mode)
    k = int(max((budget - fixed) // slot, 0)) if slot > 0 else cfg.n_layers
    k = min(k, cfg.n_layers)
    while k < cfg.n_layers and fixed + (k + 1) * slot <= budget:
        k += 1
    while k > 0 and fixed + k * slot > budget:
        k -= 1
    if k < 1:
        raise DeviceExcluded(f"budget {budget:.0f} B cannot hold a one-unit submodel")
    return k if mode == "layer" else 2 * k
