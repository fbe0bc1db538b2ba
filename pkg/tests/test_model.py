import math

import numpy as np
import pytest

from fedpruner.errors import DuplicateUnit, EmptyShard, InvalidConfig, PlanUnitOutOfRange
from fedpruner.model import (
    Batch,
    LoraAdapter,
    ModelConfig,
    Part,
    SubmodelPlan,
    Unit,
    assemble_submodel,
    cross_entropy,
    decompose_components,
    forward,
    full_plan,
    init_model,
    local_finetune,
    loss,
    loss_and_grads,
)

from oracles import finite_difference_grads, max_relative_error

TINY = ModelConfig(vocab_size=11, d_model=8, n_heads=2, d_ff=16, n_layers=2, max_seq=6, lora_rank=2, lora_alpha=4.0)


def _randomise_adapters(model, rng, scale=0.3):
    return model.with_adapters({
        k: LoraAdapter(rng.normal(0, scale, ad.a.shape), rng.normal(0, scale, ad.b.shape), ad.scaling)
        for k, ad in model.adapters.items()
    })


def _batch(rng, cfg, b=3, s=None):
    s = s or cfg.max_seq
    return Batch.from_sequences(rng.integers(0, cfg.vocab_size, size=(b, s + 1)))


def test_config_validation():
    with pytest.raises(InvalidConfig):
        ModelConfig(d_model=8, n_heads=3)
    with pytest.raises(InvalidConfig):
        ModelConfig(d_model=8, d_ff=16, n_heads=2, lora_rank=5)
    with pytest.raises(InvalidConfig):
        ModelConfig(n_layers=0)


def test_init_deterministic_and_zero_b():
    a, b = init_model(TINY, 3), init_model(TINY, 3)
    for k in a.base:
        assert a.base[k].tobytes() == b.base[k].tobytes()
    for k, ad in a.adapters.items():
        assert ad.a.tobytes() == b.adapters[k].a.tobytes()
        assert not ad.b.any()


def test_fresh_model_equals_base_forward():
    model = init_model(TINY, 0, scale=0.3)
    tokens = _batch(np.random.default_rng(0), TINY).tokens
    plan = full_plan(TINY)
    no_lora = model.with_adapters({})
    no_lora.adapters.clear()
    np.testing.assert_allclose(forward(model, plan, tokens), forward(no_lora, plan, tokens), atol=1e-12, rtol=0)


def test_empty_plan_is_embed_norm_head():
    model = init_model(TINY, 1, scale=0.3)
    tokens = _batch(np.random.default_rng(1), TINY).tokens
    x = model.base["tok_emb"][tokens] + model.base["pos_emb"][: tokens.shape[1]]
    h = model.base["gf"] * x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)
    np.testing.assert_allclose(forward(model, SubmodelPlan(()), tokens), h @ model.base["head"].T, atol=1e-12)


def test_capture_shapes():
    model = init_model(TINY, 2)
    tokens = _batch(np.random.default_rng(2), TINY, b=4).tokens
    _, acts = forward(model, full_plan(TINY), tokens, capture=True)
    assert acts.n_units == 2 and acts[0].shape == (4 * TINY.max_seq, TINY.d_model)
    _, acts = forward(model, full_plan(TINY, "component"), tokens, capture=True)
    assert acts.n_units == 4


def test_component_plan_order_and_layer_equivalence():
    cfg = ModelConfig(vocab_size=11, d_model=8, n_heads=2, d_ff=16, n_layers=4, max_seq=5, lora_rank=2)
    model = _randomise_adapters(init_model(cfg, 0, scale=0.3), np.random.default_rng(0))
    tokens = _batch(np.random.default_rng(3), cfg).tokens
    plan = assemble_submodel([Unit(4, Part.MHA), Unit(2, Part.FFN)], "component")
    assert plan.labels() == ["2.ffn", "4.mha"]
    assert forward(model, plan, tokens).shape == (3, 5, 11)
    whole = forward(model, SubmodelPlan((Unit(1), Unit(3))), tokens)
    parts = forward(model, full_plan(cfg, "component").__class__(
        (Unit(1, Part.MHA), Unit(1, Part.FFN), Unit(3, Part.MHA), Unit(3, Part.FFN))), tokens)
    np.testing.assert_allclose(whole, parts, atol=1e-13)


def test_plan_errors():
    model = init_model(TINY, 0)
    with pytest.raises(PlanUnitOutOfRange):
        forward(model, SubmodelPlan((Unit(3),)), np.zeros((1, 2), dtype=int))
    with pytest.raises(DuplicateUnit):
        assemble_submodel([1, 1])
    with pytest.raises(ValueError):
        SubmodelPlan((Unit(2), Unit(1)))


def test_assemble_examples():
    assert assemble_submodel([8, 4, 6]).labels() == ["4", "6", "8"]
    assert assemble_submodel([3, 8, 11], "component").labels() == ["2.mha", "4.ffn", "6.mha"]
    assert assemble_submodel(range(1, 13)).labels() == full_plan(ModelConfig()).labels()


def test_decompose():
    assert decompose_components(1) == [Unit(1, Part.MHA), Unit(1, Part.FFN)]
    assert [u.label for u in decompose_components(2)] == ["1.mha", "1.ffn", "2.mha", "2.ffn"]


def test_uniform_logits_loss():
    model = init_model(TINY, 0)
    zero_head = dict(model.base)
    zero_head["head"] = np.zeros_like(model.base["head"])
    model = type(model)(model.cfg, zero_head, model.delta, model.adapters)
    batch = _batch(np.random.default_rng(0), TINY)
    assert loss(model, full_plan(TINY), batch) == pytest.approx(math.log(11), abs=1e-10)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 3, 5))
    tgt = rng.integers(0, 5, size=(2, 3))
    _, g = cross_entropy(logits, tgt)
    h = 1e-6
    for idx in [(0, 0, 0), (1, 2, 4), (0, 1, 3)]:
        lp, lm = logits.copy(), logits.copy()
        lp[idx] += h
        lm[idx] -= h
        fd = (cross_entropy(lp, tgt)[0] - cross_entropy(lm, tgt)[0]) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-6)


@pytest.mark.parametrize("plan_labels", [None, ["2"], ["1.ffn", "2.mha"], ["1.mha", "2.mha"]])
def test_gradients_match_finite_differences(plan_labels):
    rng = np.random.default_rng(5)
    model = _randomise_adapters(init_model(TINY, 1, scale=0.3), rng)
    plan = full_plan(TINY) if plan_labels is None else assemble_submodel(
        [Unit.parse(l) for l in plan_labels], "layer" if "." not in plan_labels[0] else "component")
    batch = _batch(rng, TINY)
    _, grads = loss_and_grads(model, plan, batch)
    assert set(grads) == set(plan.adapter_keys())
    used = {k: model.adapters[k] for k in plan.adapter_keys()}
    numeric = finite_difference_grads(lambda ads: loss(model.with_adapters(ads), plan, batch), used)
    assert max_relative_error(grads, numeric) <= 1e-4


def _shard(rng, cfg, n=24):
    # deterministic successor chain: learnable from one token of context
    succ = rng.permutation(cfg.vocab_size)
    seqs = np.empty((n, cfg.max_seq + 1), dtype=int)
    seqs[:, 0] = rng.integers(0, cfg.vocab_size, size=n)
    for t in range(1, cfg.max_seq + 1):
        seqs[:, t] = succ[seqs[:, t - 1]]
    return seqs


def test_finetune_freezes_everything_outside_plan():
    rng = np.random.default_rng(0)
    model = init_model(TINY, 0)
    plan = SubmodelPlan((Unit(2),))
    before_base = {k: v.tobytes() for k, v in model.base.items()}
    before_ad = {k: (v.a.tobytes(), v.b.tobytes()) for k, v in model.adapters.items()}
    adapters, losses = local_finetune(model, plan, _shard(rng, TINY), 5, 1e-2, 4, seed=1)
    assert set(adapters) == set(plan.adapter_keys())
    assert len(losses) == 5
    assert {k: v.tobytes() for k, v in model.base.items()} == before_base
    assert {k: (v.a.tobytes(), v.b.tobytes()) for k, v in model.adapters.items()} == before_ad
    assert any(ad.b.any() for ad in adapters.values())


def test_finetune_zero_steps_and_empty_shard():
    model = init_model(TINY, 0)
    plan = full_plan(TINY)
    adapters, losses = local_finetune(model, plan, _shard(np.random.default_rng(0), TINY), 0, 1e-2, 4, seed=0)
    assert losses == []
    for k, ad in adapters.items():
        assert ad.a.tobytes() == model.adapters[k].a.tobytes()
        assert ad.b.tobytes() == model.adapters[k].b.tobytes()
    with pytest.raises(EmptyShard):
        local_finetune(model, plan, np.zeros((0, 7), dtype=int), 1, 1e-2, 4, seed=0)


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_finetune_deterministic(optimizer):
    rng = np.random.default_rng(0)
    model = init_model(TINY, 0)
    shard = _shard(rng, TINY)
    a = local_finetune(model, full_plan(TINY), shard, 3, 1e-2, 4, seed=7, optimizer=optimizer)
    b = local_finetune(model, full_plan(TINY), shard, 3, 1e-2, 4, seed=7, optimizer=optimizer)
    assert a[1] == b[1]
    for k in a[0]:
        assert a[0][k].b.tobytes() == b[0][k].b.tobytes()


def test_finetune_learns():
    cfg = ModelConfig(vocab_size=16, d_model=16, n_heads=2, d_ff=32, n_layers=2, max_seq=8, lora_rank=2)
    improved = 0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        model = init_model(cfg, seed)
        shard = _shard(rng, cfg, n=32)
        _, losses = local_finetune(model, full_plan(cfg), shard, 200, 1e-2, 8, seed=seed)
        improved += np.mean(losses[-10:]) < np.mean(losses[:10])
    assert improved >= 4


def test_checkpoint_roundtrip(tmp_path):
    from fedpruner.checkpoint import load, save
    model = _randomise_adapters(init_model(TINY, 4), np.random.default_rng(4))
    path = tmp_path / "m.ckpt"
    save(path, model, meta={"round": 3})
    back, meta = load(path)
    assert meta == {"round": 3}
    assert back.cfg == model.cfg
    for k in model.base:
        assert back.base[k].tobytes() == model.base[k].tobytes()
    for k in model.adapters:
        assert back.adapters[k].b.tobytes() == model.adapters[k].b.tobytes()
    tokens = _batch(np.random.default_rng(0), TINY).tokens
    assert forward(back, full_plan(TINY), tokens).tobytes() == forward(model, full_plan(TINY), tokens).tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    from fedpruner.checkpoint import from_bytes
    from fedpruner.errors import CheckpointError
    with pytest.raises(CheckpointError):
        from_bytes(b"not a checkpoint")
