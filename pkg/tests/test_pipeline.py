import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scalecal.checkpoint import load_model
from scalecal.data import AugmentConfig, synthetic_dataset
from scalecal.models import ModelConfig, build_model
from scalecal.pipeline import (SCHEMES, NonFiniteLoss, SCTConfig, ScaleCollection, combine_losses, evaluate,
                               metrics_header, resolve_bank, scale_sample, scheme_scales, sct_forward, sct_loss,
                               train)
from scalecal.resample import ScaleSet
from scalecal.tensor import Tape, Tensor, accuracy, softmax_cross_entropy

NO_AUG = AugmentConfig(pad_crop=0, hflip_prob=0.0)


def tiny(norm="bn", scales=ScaleSet([32, 16]), seed=0, **kw):
    return build_model(ModelConfig(depth=8, norm=norm, width_multiplier=0.25, **kw),
                       scales if norm == "sbn" else None, seed=seed)


def test_schemes():
    assert [s[0] for s in scheme_scales("sct-b")] == [320, 224, 192, 128, 64]
    assert [s[0] for s in scheme_scales("sct-a")] == [320, 224, 192]
    assert set(SCHEMES) >= {"standard", "cifar-32-24", "cifar-32-28", "cifar-32-16"}
    with pytest.raises(ValueError, match="known"):
        scheme_scales("nope")


def test_config_defaults_and_validation():
    cfg = SCTConfig(scale_set=ScaleSet([32, 24, 16]))
    assert cfg.alphas == pytest.approx((1 / 3,) * 3)
    with pytest.raises(ValueError):
        SCTConfig(scale_set=ScaleSet([32, 16]), alphas=[1.0])
    with pytest.raises(ValueError):
        SCTConfig(alphas=[0.5, -0.5])
    with pytest.raises(ValueError):
        SCTConfig(schedule="linear")


# ---- sampling and forward --------------------------------------------------------------

def test_scale_sample_identity_and_constant(rng):
    x = rng.standard_normal((2, 3, 32, 32)).astype(np.float32)
    coll = scale_sample(x, ScaleSet([32]), labels=np.array([1, 2]))
    assert len(coll) == 1 and np.array_equal(coll.batches[0].data, x)
    const = np.full((2, 3, 32, 32), 0.7, dtype=np.float32)
    coll = scale_sample(const, ScaleSet([32, 16]))
    assert [b.shape for b in coll.batches] == [(2, 3, 32, 32), (2, 3, 16, 16)]
    for b in coll.batches:
        np.testing.assert_allclose(b.data, 0.7, atol=1e-6)


def test_single_scale_sct_forward_equals_plain_forward(rng):
    model = tiny()
    x = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
    (z,) = sct_forward(model, ScaleCollection([Tensor(x)], None), "eval")
    assert np.array_equal(z.data, model(Tensor(x), 0).data)


# ---- the weighted multi-scale loss ---------------------------------------------------------

@given(st.integers(0, 10_000), st.integers(2, 5))
def test_uniform_alpha_equal_losses(seed, m):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.standard_normal((6, 4)))
    y = rng.integers(0, 4, 6)
    v = softmax_cross_entropy(z, y).item()
    assert sct_loss([z] * m, y, [1.0 / m] * m).item() == pytest.approx(v, rel=1e-6)


@given(st.integers(0, 10_000), st.floats(0.0, 5.0, width=32))
def test_zero_weight_reduces_to_single_scale_bitwise(seed, a):
    rng = np.random.default_rng(seed)
    z1, z2 = Tensor(rng.standard_normal((5, 3))), Tensor(rng.standard_normal((5, 3)))
    y = rng.integers(0, 3, 5)
    got = sct_loss([z1, z2], y, [a, 0.0]).data
    assert np.array_equal(got, np.float32(a) * softmax_cross_entropy(z1, y).data)


def test_single_scale_unit_weight_is_plain_cross_entropy(rng):
    z = Tensor(rng.standard_normal((5, 3)))
    y = np.array([0, 1, 2, 1, 0])
    assert np.array_equal(sct_loss([z], y, [1.0]).data, softmax_cross_entropy(z, y).data)


def test_hand_weighted_sum():
    assert combine_losses([Tensor(1.0), Tensor(3.0)], [0.25, 0.75]).item() == 2.5
    with pytest.raises(ValueError):
        sct_loss([Tensor(np.zeros((1, 2)))], [0], [0.5, 0.5])


def _grads_after_step(model, batches, y, alphas, active=None):
    model.train()
    for p in model.parameters():
        p.grad = None
    with Tape() as tape:
        logits = sct_forward(model, ScaleCollection([Tensor(b) for b in batches], y), "train", active)
        loss = sct_loss(logits, y, alphas)
    tape.backward(loss)
    return {n: (None if p.grad is None else p.grad.copy()) for n, p in model.named_parameters()}


@pytest.mark.parametrize("forward_second", [True, False])
def test_unit_zero_alphas_match_single_scale_step(rng, forward_second):
    x32 = rng.standard_normal((4, 3, 32, 32)).astype(np.float32)
    x16 = rng.standard_normal((4, 3, 16, 16)).astype(np.float32)
    y = np.array([0, 1, 2, 3])
    multi, single = tiny("sbn", seed=3), tiny("sbn", seed=3)
    bank2_before = {n: b.copy() for n, b in multi.named_buffers() if n.endswith("scale1")}
    g_multi = _grads_after_step(multi, [x32, x16], y, [1.0, 0.0], [True, forward_second])
    g_single = _grads_after_step(single, [x32], y, [1.0])
    for name, g in g_single.items():
        if name.endswith("scale1"):
            gm = g_multi[name]
            assert gm is None or not gm.any()
        else:
            assert np.array_equal(g_multi[name], g), name
    moved = [not np.array_equal(b, dict(multi.named_buffers())[n]) for n, b in bank2_before.items()]
    assert all(moved) if forward_second else not any(moved)


# ---- training ---------------------------------------------------------------------------------

def run(tmp_path, name, **kw):
    ds = synthetic_dataset(0, 48)
    kw.setdefault("epochs", 1)
    model = tiny("sbn" if kw.pop("sbn", False) else "bn")
    cfg = SCTConfig(batch_size=16, lr0=0.05, seed=1, augment=AugmentConfig(), **kw)
    return train(model, ds, cfg, tmp_path / name)


def test_training_writes_metrics_config_and_checkpoint(tmp_path):
    model, state, ckpt = run(tmp_path, "a", epochs=2, checkpoint_every=1)
    out = tmp_path / "a"
    rows = list(csv.reader(open(out / "metrics.csv")))
    assert rows[0] == metrics_header(2) == ["epoch", "step", "lr", "loss_total", "loss_scale_0",
                                            "loss_scale_1", "acc_scale_0", "acc_scale_1"]
    assert [r[:2] for r in rows[1:]] == [["0", "3"], ["1", "6"]]
    assert (out / "sct_config.json").exists() and ckpt.exists()
    assert len(state.loss_history) == 6
    for total, per in state.loss_history:
        assert total == pytest.approx(0.5 * per[0] + 0.5 * per[1], rel=1e-6)
    assert [n for n, _ in model.named_parameters() if "fc" in n] == ["fc.weight", "fc.bias"]


def test_seeded_runs_have_identical_losses(tmp_path):
    _, a, _ = run(tmp_path, "a", epochs=4)
    _, b, _ = run(tmp_path, "b", epochs=4)
    assert len(a.loss_history) >= 10 and a.loss_history == b.loss_history


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_non_finite_loss_stops_before_update(tmp_path):
    ds = synthetic_dataset(0, 16)
    model = tiny()
    model.fc.bias.data[0] = np.inf
    before = {n: p.data.copy() for n, p in model.named_parameters() if n != "fc.bias"}
    with pytest.raises(NonFiniteLoss):
        train(model, ds, SCTConfig(batch_size=8), tmp_path / "nan")
    assert all(np.array_equal(p.data, before[n]) for n, p in model.named_parameters() if n != "fc.bias")
    assert not (tmp_path / "nan" / "model.ckpt").exists()


def test_training_rejects_inconsistent_setups():
    ds = synthetic_dataset(0, 16)
    with pytest.raises(ValueError, match="registered scales"):
        train(tiny("sbn", scales=ScaleSet([32, 24])), ds, SCTConfig())
    with pytest.raises(ValueError, match="calibration"):
        train(tiny(calibration="max"), ds, SCTConfig())


# ---- evaluation -------------------------------------------------------------------------------

def test_evaluate_is_pure_and_bank_resolution():
    ds = synthetic_dataset(5, 40, split="test")
    model = tiny("sbn")
    state = {n: a.copy() for n, a in model.state_items()}
    a, b = evaluate(model, ds, (16, 16)), evaluate(model, ds, (16, 16))
    assert a == b
    assert all(np.array_equal(a_, state[n]) for n, a_ in model.state_items())
    assert resolve_bank(model, 16) == 1 and resolve_bank(tiny(), 24) is None
    with pytest.raises(KeyError, match="32x32, 16x16"):
        evaluate(model, ds, (24, 24))
    assert resolve_bank(model, (28, 28), nearest_bank=True) == 0
    assert 0.0 <= evaluate(model, ds, (24, 24), nearest_bank=True) <= 1.0


@given(st.integers(0, 10_000))
def test_random_logits_accuracy_near_chance(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, 1000)
    assert 0.06 <= accuracy(rng.standard_normal((1000, 10)), labels) <= 0.14


def test_memorized_training_set_scores_one(tmp_path):
    ds = synthetic_dataset(2, 20)
    model = tiny(seed=2)
    cfg = SCTConfig(scale_set=ScaleSet([32]), epochs=30, batch_size=10, lr0=0.05, schedule="cosine",
                    weight_decay=0.0, augment=NO_AUG)
    train(model, ds, cfg)
    assert evaluate(model, ds, (32, 32), NO_AUG) == 1.0


def test_checkpoint_round_trip_reproduces_accuracy(tmp_path):
    model, _, ckpt = run(tmp_path, "c", sbn=True)
    test = synthetic_dataset(9, 60, split="test")
    again = load_model(ckpt)
    for size in (32, 16):
        assert evaluate(model, test, (size, size)) == evaluate(again, test, (size, size))
