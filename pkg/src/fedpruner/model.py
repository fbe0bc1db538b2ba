"""A tiny pre-norm decoder-only transformer with frozen weights and LoRA adapters.

Only the LoRA factors train, so the backward pass below computes gradients
for adapter factors alone while still propagating through frozen weights.
Every block maps the residual stream to itself, which is what lets any plan
of layers or MHA/FFN components compose.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DuplicateUnit, EmptyShard, InvalidConfig, PlanUnitOutOfRange
from .similarity import ActivationSet

MHA_MATS = ("wq", "wk", "wv", "wo")
FFN_MATS = ("w1", "w2")
RMS_EPS = 1e-6
GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    n_layers: int = 12
    max_seq: int = 32
    lora_rank: int = 4
    lora_alpha: float = 8.0

    def __post_init__(self):
        counts = ("vocab_size", "d_model", "n_heads", "d_ff", "n_layers", "max_seq", "lora_rank")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise InvalidConfig("n_heads must divide d_model")
        if self.lora_rank > min(self.d_model, self.d_ff) / 2:
            raise InvalidConfig("lora_rank must be at most min(d_model, d_ff) / 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.lora_rank

    def mat_shape(self, mat: str) -> tuple[int, int]:
        d, f = self.d_model, self.d_ff
        return {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "w1": (f, d), "w2": (d, f)}[mat]

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class Part(str, enum.Enum):
    MHA = "mha"
    FFN = "ffn"
    WHOLE = "whole"


_PART_RANK = {Part.MHA: 0, Part.WHOLE: 0, Part.FFN: 1}


@dataclass(frozen=True)
class Unit:
    layer: int  # 1-based
    part: Part = Part.WHOLE

    @property
    def sort_key(self) -> tuple[int, int]:
        return (self.layer, _PART_RANK[self.part])

    @property
    def parts(self) -> tuple[Part, ...]:
        return (Part.MHA, Part.FFN) if self.part is Part.WHOLE else (self.part,)

    def adapter_keys(self) -> list[str]:
        keys = []
        for p in self.parts:
            mats = MHA_MATS if p is Part.MHA else FFN_MATS
            keys.extend(f"{self.layer}.{m}" for m in mats)
        return keys

    @property
    def label(self) -> str:
        return str(self.layer) if self.part is Part.WHOLE else f"{self.layer}.{self.part.value}"

    @classmethod
    def parse(cls, label: str) -> "Unit":
        if "." in label:
            layer, part = label.split(".")
            return cls(int(layer), Part(part))
        return cls(int(label))


@dataclass(frozen=True)
class SubmodelPlan:
    units: tuple[Unit, ...]

    def __post_init__(self):
        units = tuple(self.units)
        object.__setattr__(self, "units", units)
        keys = [u.sort_key for u in units]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise ValueError("plan units must be strictly ascending")
        kinds = {u.part is Part.WHOLE for u in units}
        if len(kinds) > 1:
            raise ValueError("plan mixes whole layers and components")

    @property
    def mode(self) -> str:
        if self.units and self.units[0].part is not Part.WHOLE:
            return "component"
        return "layer"

    def adapter_keys(self) -> list[str]:
        return [k for u in self.units for k in u.adapter_keys()]

    def labels(self) -> list[str]:
        return [u.label for u in self.units]

    def __len__(self) -> int:
        return len(self.units)


def decompose_components(n_layers: int) -> list[Unit]:
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    return [Unit(l, p) for l in range(1, n_layers + 1) for p in (Part.MHA, Part.FFN)]


def unit_from_index(index: int, mode: str) -> Unit:
    """Map a 1-based prunable-unit index to a Unit (components interleave MHA, FFN)."""
    if mode == "layer":
        return Unit(index)
    return Unit((index + 1) // 2, Part.MHA if index % 2 else Part.FFN)


def full_plan(cfg: ModelConfig, mode: str = "layer") -> SubmodelPlan:
    if mode == "layer":
        return SubmodelPlan(tuple(Unit(l) for l in range(1, cfg.n_layers + 1)))
    return SubmodelPlan(tuple(decompose_components(cfg.n_layers)))


def assemble_submodel(selected: Iterable, mode: str = "layer") -> SubmodelPlan:
    """Order selected units (ints or Unit objects) into a plan."""
    units = []
    for s in selected:
        units.append(s if isinstance(s, Unit) else unit_from_index(int(s), mode))
    if len(set(units)) != len(units):
        raise DuplicateUnit("selected units are not distinct")
    for u in units:
        if (mode == "layer") != (u.part is Part.WHOLE):
            raise ValueError(f"unit {u.label} does not match mode {mode!r}")
    return SubmodelPlan(tuple(sorted(units, key=lambda u: u.sort_key)))


@dataclass(frozen=True)
class LoraAdapter:
    a: np.ndarray  # rank x in
    b: np.ndarray  # out x rank
    scaling: float

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def delta(self) -> np.ndarray:
        return self.scaling * (self.b @ self.a)


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray
    targets: np.ndarray

    @classmethod
    def from_sequences(cls, seqs: np.ndarray) -> "Batch":
        seqs = np.asarray(seqs, dtype=np.int64)
        return cls(tokens=seqs[:, :-1], targets=seqs[:, 1:])


def _gauss(rng, shape, scale):
    return rng.normal(0.0, scale, size=shape)


def base_param_names(cfg: ModelConfig) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for l in range(1, cfg.n_layers + 1):
        names += [f"{l}.g1", *(f"{l}.{m}" for m in MHA_MATS), f"{l}.g2", *(f"{l}.{m}" for m in FFN_MATS)]
    return names + ["gf", "head"]


def adapter_keys(cfg: ModelConfig) -> list[str]:
    return [f"{l}.{m}" for l in range(1, cfg.n_layers + 1) for m in MHA_MATS + FFN_MATS]


def fresh_adapter(cfg: ModelConfig, key: str, rng: np.random.Generator, scale: float = 0.02) -> LoraAdapter:
    out_dim, in_dim = cfg.mat_shape(key.split(".")[1])
    return LoraAdapter(
        a=_gauss(rng, (cfg.lora_rank, in_dim), scale),
        b=np.zeros((out_dim, cfg.lora_rank)),
        scaling=cfg.scaling,
    )


@dataclass
class ToyTransformer:
    """Frozen base weights, server-folded corrections and current LoRA adapters."""

    cfg: ModelConfig
    base: dict[str, np.ndarray]
    delta: dict[str, np.ndarray]
    adapters: dict[str, LoraAdapter]
    _weight_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def weight(self, key: str) -> np.ndarray:
        w = self._weight_cache.get(key)
        if w is None:
            w = self.base[key] + self.delta[key]
            self._weight_cache[key] = w
        return w

    def with_adapters(self, updates: Mapping[str, LoraAdapter]) -> "ToyTransformer":
        adapters = dict(self.adapters)
        adapters.update(updates)
        return ToyTransformer(self.cfg, self.base, self.delta, adapters, self._weight_cache)

    def with_delta(self, delta: dict[str, np.ndarray], adapters: dict[str, LoraAdapter]) -> "ToyTransformer":
        return ToyTransformer(self.cfg, self.base, delta, adapters)


def init_model(cfg: ModelConfig, seed: int, scale: float | None = None) -> ToyTransformer:
    """Seeded Gaussian base weights (unit norm gains), zero deltas, adapters with b = 0.

    By default embeddings have unit variance and every linear map uses std
    1/sqrt(fan_in), so the frozen head can express confident predictions. A
    float ``scale`` overrides this with one std for all matrices.
    """
    if not isinstance(cfg, ModelConfig):
        raise InvalidConfig("cfg must be a ModelConfig")
    rng = np.random.default_rng(seed)
    d = cfg.d_model

    def std(fan_in):
        return scale if scale is not None else 1.0 / math.sqrt(fan_in)

    base = {}
    for name in base_param_names(cfg):
        tail = name.split(".")[-1]
        if name == "tok_emb":
            base[name] = _gauss(rng, (cfg.vocab_size, d), scale if scale is not None else 1.0)
        elif name == "pos_emb":
            base[name] = _gauss(rng, (cfg.max_seq, d), scale if scale is not None else 1.0)
        elif name == "head":
            base[name] = _gauss(rng, (cfg.vocab_size, d), std(d))
        elif tail in ("g1", "g2") or name == "gf":
            base[name] = np.ones(d)
        else:
            shape = cfg.mat_shape(tail)
            base[name] = _gauss(rng, shape, std(shape[1]))
    for arr in base.values():
        arr.setflags(write=False)
    delta = {k: np.zeros(cfg.mat_shape(k.split(".")[1])) for k in adapter_keys(cfg)}
    adapters = {k: fresh_adapter(cfg, k, rng) for k in adapter_keys(cfg)}
    return ToyTransformer(cfg, base, delta, adapters)


# ---------------------------------------------------------------- primitives


def _rmsnorm(x, g):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return g * x / r, r


def _rmsnorm_back(dy, x, r, g):
    gdy = g * dy
    d = x.shape[-1]
    return gdy / r - x * np.sum(gdy * x, axis=-1, keepdims=True) / (d * r * r * r)


def _gelu(z):
    t = np.tanh(GELU_C * (z + 0.044715 * z * z * z))
    return 0.5 * z * (1.0 + t), t


def _gelu_back(dy, z, t):
    dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * z * z)
    return dy * (0.5 * (1.0 + t) + 0.5 * z * dt)


def _linear(x, w, ad: LoraAdapter | None):
    x2 = x.reshape(-1, x.shape[-1])
    y = x2 @ w.T
    u = None
    if ad is not None:
        u = x2 @ ad.a.T
        y += ad.scaling * (u @ ad.b.T)
    return y.reshape(*x.shape[:-1], w.shape[0]), u


def _linear_back(dy, x, u, w, ad: LoraAdapter | None, grads: dict | None, key: str):
    dy2 = dy.reshape(-1, dy.shape[-1])
    dx = dy2 @ w
    if ad is not None:
        x2 = x.reshape(-1, x.shape[-1])
        du = ad.scaling * (dy2 @ ad.b)
        if grads is not None:
            grads[key] = (du.T @ x2, ad.scaling * (dy2.T @ u))
        dx += du @ ad.a
    return dx.reshape(x.shape)


def _split_heads(x, h):
    b, s, d = x.shape
    return x.reshape(b, s, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def _causal_mask(s):
    return np.tril(np.ones((s, s), dtype=bool))


# ---------------------------------------------------------------- blocks


def _mha_forward(model: ToyTransformer, layer: int, x):
    cfg = model.cfg
    g = model.base[f"{layer}.g1"]
    h, r = _rmsnorm(x, g)
    ad = model.adapters
    q, uq = _linear(h, model.weight(f"{layer}.wq"), ad.get(f"{layer}.wq"))
    k, uk = _linear(h, model.weight(f"{layer}.wk"), ad.get(f"{layer}.wk"))
    v, uv = _linear(h, model.weight(f"{layer}.wv"), ad.get(f"{layer}.wv"))
    qh, kh, vh = (_split_heads(t, cfg.n_heads) for t in (q, k, v))
    scale = 1.0 / math.sqrt(cfg.head_dim)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    mask = _causal_mask(x.shape[1])
    scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    o = _merge_heads(p @ vh)
    out, uo = _linear(o, model.weight(f"{layer}.wo"), ad.get(f"{layer}.wo"))
    cache = (x, h, r, uq, uk, uv, qh, kh, vh, p, o, uo)
    return x + out, cache


def _mha_backward(model: ToyTransformer, layer: int, dx_out, cache, grads):
    cfg = model.cfg
    x, h, r, uq, uk, uv, qh, kh, vh, p, o, uo = cache
    ad = model.adapters
    key = f"{layer}.wo"
    do = _linear_back(dx_out, o, uo, model.weight(key), ad.get(key), grads, key)
    doh = _split_heads(do, cfg.n_heads)
    dp = doh @ vh.transpose(0, 1, 3, 2)
    dvh = p.transpose(0, 1, 3, 2) @ doh
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True))
    scale = 1.0 / math.sqrt(cfg.head_dim)
    dqh = (ds @ kh) * scale
    dkh = (ds.transpose(0, 1, 3, 2) @ qh) * scale
    dh = np.zeros_like(h)
    for name, dt, u in (("wq", dqh, uq), ("wk", dkh, uk), ("wv", dvh, uv)):
        key = f"{layer}.{name}"
        dh += _linear_back(_merge_heads(dt), h, u, model.weight(key), ad.get(key), grads, key)
    return dx_out + _rmsnorm_back(dh, x, r, model.base[f"{layer}.g1"])


def _ffn_forward(model: ToyTransformer, layer: int, x):
    h, r = _rmsnorm(x, model.base[f"{layer}.g2"])
    ad = model.adapters
    z, u1 = _linear(h, model.weight(f"{layer}.w1"), ad.get(f"{layer}.w1"))
    a, t = _gelu(z)
    out, u2 = _linear(a, model.weight(f"{layer}.w2"), ad.get(f"{layer}.w2"))
    return x + out, (x, h, r, z, t, a, u1, u2)


def _ffn_backward(model: ToyTransformer, layer: int, dx_out, cache, grads):
    x, h, r, z, t, a, u1, u2 = cache
    ad = model.adapters
    key2, key1 = f"{layer}.w2", f"{layer}.w1"
    da = _linear_back(dx_out, a, u2, model.weight(key2), ad.get(key2), grads, key2)
    dz = _gelu_back(da, z, t)
    dh = _linear_back(dz, h, u1, model.weight(key1), ad.get(key1), grads, key1)
    return dx_out + _rmsnorm_back(dh, x, r, model.base[f"{layer}.g2"])


def _check_plan(model: ToyTransformer, plan: SubmodelPlan):
    for u in plan.units:
        if not 1 <= u.layer <= model.cfg.n_layers:
            raise PlanUnitOutOfRange(f"unit {u.label} outside 1..{model.cfg.n_layers}")


def _tokens_of(batch) -> np.ndarray:
    tokens = batch.tokens if isinstance(batch, Batch) else np.asarray(batch)
    return np.asarray(tokens, dtype=np.int64)


def _run(model: ToyTransformer, plan: SubmodelPlan, tokens: np.ndarray, capture: bool, keep_cache: bool):
    _check_plan(model, plan)
    cfg = model.cfg
    if tokens.ndim != 2 or tokens.shape[1] > cfg.max_seq:
        raise ValueError(f"tokens must be (batch, seq<= {cfg.max_seq}), got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token id out of range")
    x = model.base["tok_emb"][tokens] + model.base["pos_emb"][: tokens.shape[1]]
    d = cfg.d_model
    acts = [x.reshape(-1, d)] if capture else None
    caches = []
    for unit in plan.units:
        for part in unit.parts:
            if part is Part.MHA:
                x, cache = _mha_forward(model, unit.layer, x)
            else:
                x, cache = _ffn_forward(model, unit.layer, x)
            if keep_cache:
                caches.append((unit.layer, part, cache))
            if capture and unit.part is not Part.WHOLE:
                acts.append(x.reshape(-1, d))
        if capture and unit.part is Part.WHOLE:
            acts.append(x.reshape(-1, d))
    hf, rf = _rmsnorm(x, model.base["gf"])
    logits = hf @ model.base["head"].T
    return logits, acts, caches, (x, hf, rf)


def forward(model: ToyTransformer, plan: SubmodelPlan, batch, capture: bool = False):
    """Logits for ``batch``; with ``capture`` also the residual-stream ActivationSet."""
    logits, acts, _, _ = _run(model, plan, _tokens_of(batch), capture, keep_cache=False)
    if capture:
        return logits, ActivationSet(tuple(acts))
    return logits


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean token cross-entropy and its gradient with respect to the logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=-1, keepdims=True))
    logp = z - lse
    tgt = np.asarray(targets, dtype=np.int64)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    count = tgt.size
    loss = -float(np.sum(picked)) / count
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, tgt[..., None], np.take_along_axis(dlogits, tgt[..., None], axis=-1) - 1.0, axis=-1)
    return loss, dlogits / count


def loss(model: ToyTransformer, plan: SubmodelPlan, batch: Batch) -> float:
    logits = forward(model, plan, batch)
    return cross_entropy(logits, batch.targets)[0]


def loss_and_grads(model: ToyTransformer, plan: SubmodelPlan, batch: Batch):
    """Cross-entropy and ``{key: (dA, dB)}`` for every adapter of every plan unit."""
    tokens = _tokens_of(batch)
    logits, _, caches, (x, hf, rf) = _run(model, plan, tokens, capture=False, keep_cache=True)
    value, dlogits = cross_entropy(logits, batch.targets)
    dhf = dlogits @ model.base["head"]
    dx = _rmsnorm_back(dhf, x, rf, model.base["gf"])
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for layer, part, cache in reversed(caches):
        if part is Part.MHA:
            dx = _mha_backward(model, layer, dx, cache, grads)
        else:
            dx = _ffn_backward(model, layer, dx, cache, grads)
    return value, grads


# ---------------------------------------------------------------- training


def cosine_schedule(lr_max: float, lr_min: float, total_steps: int, offset: int = 0) -> Callable[[int], float]:
    """Cosine decay from ``lr_max`` to ``lr_min`` over ``total_steps`` global steps."""
    total = max(int(total_steps), 1)

    def lr_at(step: int) -> float:
        frac = min(max((offset + step) / total, 0.0), 1.0)
        return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))

    return lr_at


def sample_batch(shard: np.ndarray, batch_size: int, rng: np.random.Generator) -> Batch:
    n = shard.shape[0]
    idx = rng.choice(n, size=batch_size, replace=n < batch_size)
    return Batch.from_sequences(shard[np.sort(idx)])


def local_finetune(
    model: ToyTransformer,
    plan: SubmodelPlan,
    shard,
    steps: int,
    lr_schedule: Callable[[int], float] | float,
    batch_size: int,
    seed,
    optimizer: str = "adam",
    momentum: float = 0.9,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[dict[str, LoraAdapter], list[float]]:
    """Train the plan units' adapters; returns them with the per-step losses.

    The input model is left untouched. Adapters outside the plan are neither
    read for gradients nor returned.
    """
    shard = np.asarray(shard)
    if shard.ndim != 2 or shard.shape[0] == 0:
        raise EmptyShard("shard has no sequences")
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    schedule = lr_schedule if callable(lr_schedule) else (lambda _s, _lr=float(lr_schedule): _lr)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keys = plan.adapter_keys()
    params = {k: [model.adapters[k].a.copy(), model.adapters[k].b.copy()] for k in keys}
    scaling = {k: model.adapters[k].scaling for k in keys}
    m1 = {k: [np.zeros_like(p) for p in v] for k, v in params.items()}
    m2 = {k: [np.zeros_like(p) for p in v] for k, v in params.items()}
    losses = []
    current = model
    for step in range(steps):
        current = model.with_adapters({k: LoraAdapter(v[0], v[1], scaling[k]) for k, v in params.items()})
        batch = sample_batch(shard, batch_size, rng)
        value, grads = loss_and_grads(current, plan, batch)
        losses.append(value)
        lr = schedule(step)
        for k, (ga, gb) in grads.items():
            for i, g in enumerate((ga, gb)):
                if optimizer == "sgd":
                    m1[k][i] = momentum * m1[k][i] + g
                    params[k][i] = params[k][i] - lr * m1[k][i]
                else:
                    b1, b2 = betas
                    m1[k][i] = b1 * m1[k][i] + (1 - b1) * g
                    m2[k][i] = b2 * m2[k][i] + (1 - b2) * g * g
                    mhat = m1[k][i] / (1 - b1 ** (step + 1))
                    vhat = m2[k][i] / (1 - b2 ** (step + 1))
                    params[k][i] = params[k][i] - lr * mhat / (np.sqrt(vhat) + eps)
    return {k: LoraAdapter(v[0], v[1], scaling[k]) for k, v in params.items()}, losses
