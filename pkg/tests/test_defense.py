import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from honeypot import defense
from honeypot.data import DatasetSpec, generate
from honeypot.defense import (BloConfig, Trigger, apply_trigger, finetune_step, init_honeypot,
                              init_trigger, load_protected, load_trigger, patch_mask, run_blo,
                              save_protected, save_trigger, sign_step, simulate_extraction_step,
                              trigger_bytes, trigger_from_bytes, trigger_update_step)
from honeypot.errors import CodecError, ConfigError, NumericError, TrainingError, UsageError
from honeypot.nn import Network, parse_layers, softmax
from honeypot.victim import arch_text

SHAPE = (1, 16, 16)


@pytest.fixture(scope="module")
def shadow_set():
    return generate(DatasetSpec(num_classes=40, family="shadow_ood",
                                samples_per_split={"train": 64}), 7, "train")


@pytest.fixture(scope="module")
def small_blo(tiny_victim, shadow_set, tiny_data):
    cfg = BloConfig(blo_iterations=2, samples_per_iter=64, epochs_per_step=1, seed=3)
    return run_blo(tiny_victim, shadow_set, tiny_data["verify"], cfg)


def stub_trigger(delta0, alpha, eps, size=2):
    mask = patch_mask(SHAPE, size, 4, 4)
    return Trigger(np.where(mask == 0, delta0, 0.0), mask, 9, eps, alpha, (size, 4, 4))


# -- trigger ---------------------------------------------------------------

def test_mask_has_patch_zeros():
    m = patch_mask(SHAPE, 6, 4, 4)
    assert (m == 0).sum() == 36 and not m[0, 4:10, 4:10].any() and m[0, 3, 4] == 1
    with pytest.raises(ConfigError):
        patch_mask(SHAPE, 6, 12, 4)


def test_apply_trigger_replacement_semantics():
    x = np.full((2, *SHAPE), 0.4)
    t = stub_trigger(0.7, 0.9, 0.1)
    y = apply_trigger(x, t)
    assert (y[:, 0, 4:6, 4:6] == 0.7).all() and (y[t.mask.astype(bool)[None].repeat(2, 0)] == 0.4).all()
    zero = stub_trigger(0.0, 0.9, 0.1, size=6)
    assert (apply_trigger(x, zero)[:, 0, 4:10, 4:10] == 0.0).all()
    empty = Trigger(np.zeros(SHAPE), np.ones(SHAPE), 9)
    assert np.array_equal(apply_trigger(x, empty), x) and empty.is_empty


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), d=st.floats(-2, 2))
def test_unmasked_pixels_are_bit_identical_and_range_is_kept(seed, d):
    x = np.random.default_rng(seed).uniform(size=(3, *SHAPE))
    t = stub_trigger(d, 0.9, 0.1, size=4)
    y = apply_trigger(x, t)
    keep = np.broadcast_to(t.mask.astype(bool), y.shape)
    assert np.array_equal(y[keep], x[keep]) and y.min() >= 0 and y.max() <= 1


def test_apply_trigger_shape_mismatch():
    with pytest.raises(UsageError):
        apply_trigger(np.zeros((1, 1, 8, 8)), stub_trigger(0.5, 0.9, 0.1))


def test_init_trigger_range_and_confinement():
    t = init_trigger(SHAPE, 9, rng=np.random.default_rng(0))
    inside = t.delta[t.mask == 0]
    assert inside.min() >= 0.25 and inside.max() <= 0.75 and not t.delta[t.mask == 1].any()


# -- recurrence -------------------------------------------------------------

def test_scalar_toy_recurrence():
    t = stub_trigger(0.5, 0.9, 0.1)
    t1 = sign_step(t, np.ones(SHAPE))
    t2 = sign_step(t1, np.ones(SHAPE))
    assert t1.delta[0, 4, 4] == pytest.approx(0.44, abs=1e-15)
    assert t2.delta[0, 4, 4] == pytest.approx(0.386, abs=1e-15)


def test_alpha_boundaries():
    t = stub_trigger(0.5, 1.0, 0.1)
    assert np.array_equal(sign_step(t, np.ones(SHAPE)).delta, t.delta)
    t0 = stub_trigger(0.0, 0.0, 0.03)
    out = sign_step(t0, np.ones(SHAPE)).delta
    assert (out[t0.mask == 0] == -0.03).all() and not out[t0.mask == 1].any()


def test_update_step_uses_stubbed_gradient_and_stays_confined(tiny_data):
    t = init_trigger(SHAPE, 9, epsilon=0.1, alpha=0.9, rng=np.random.default_rng(1))
    signs = np.random.default_rng(2).choice([-1.0, 1.0], size=SHAPE)
    out = trigger_update_step(None, t, tiny_data["verify"], 7, grad_fn=lambda _: signs)
    expect = t.delta.copy()
    for _ in range(7):
        expect = np.where(t.mask == 1, 0.0, 0.9 * expect - 0.01 * signs)
    np.testing.assert_allclose(out.delta, expect, atol=1e-12)
    init_mag = np.abs(t.delta).max()
    assert np.abs(out.delta).max() <= 0.1 / (1 - 0.9) + init_mag


def test_update_step_rejects_empty_verification_set(tiny_data):
    with pytest.raises(UsageError):
        trigger_update_step(None, stub_trigger(0.5, 0.9, 0.1), tiny_data["verify"].subset([]), 1,
                            grad_fn=lambda _: np.ones(SHAPE))


def test_real_trigger_gradient_is_confined(tiny_victim, tiny_data):
    t = init_trigger(SHAPE, 9, rng=np.random.default_rng(0))
    g = defense.trigger_gradient(tiny_victim.net, t, tiny_data["verify"].inputs)
    assert not g[t.mask == 1].any() and g[t.mask == 0].any()


# -- honeypot and steps -----------------------------------------------------

def test_honeypot_starts_as_victim_head(tiny_victim, tiny_data):
    hp = init_honeypot(tiny_victim)
    x = tiny_data["test"].inputs[:30]
    assert hp.num_params == 10 * 64 + 10
    assert np.array_equal(hp.logits(tiny_victim.backbone.logits(x)), tiny_victim.logits(x))


def test_extraction_step_with_zero_epochs_is_noop(tiny_victim, shadow_set):
    shadow = Network(SHAPE, parse_layers(arch_text("victim", 10)), seed=1)
    before = shadow.flat_params().copy()
    hp = init_honeypot(tiny_victim)
    feats = tiny_victim.backbone.logits(shadow_set.inputs)
    assert simulate_extraction_step(hp, feats, shadow_set.inputs, shadow, 0, 0.1,
                                    "cross_entropy_soft", np.random.default_rng(0)) == []
    assert np.array_equal(before, shadow.flat_params())


def test_shadow_learns_a_constant_teacher(tiny_victim, shadow_set):
    hp = init_honeypot(tiny_victim)
    hp.params[0][0][...] = 0.0
    hp.params[0][1][...] = np.eye(10)[4] * 20.0  # teacher says class 4 for everything
    shadow = Network(SHAPE, parse_layers(arch_text("victim", 10)), seed=1)
    feats = tiny_victim.backbone.logits(shadow_set.inputs)
    losses = simulate_extraction_step(hp, feats, shadow_set.inputs, shadow, 5, 0.1,
                                      "cross_entropy_soft", np.random.default_rng(0))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_finetune_without_trigger_term_keeps_the_optimum(tiny_victim, shadow_set):
    hp = init_honeypot(tiny_victim)
    before = hp.flat_params().copy()
    feats = tiny_victim.backbone.logits(shadow_set.inputs)
    soft = softmax(tiny_victim.logits(shadow_set.inputs))
    finetune_step(hp, feats, None, soft, 9, 3, 0.02, np.random.default_rng(0))
    assert np.abs(hp.flat_params() - before).max() < 1e-9


# -- BLO loop ---------------------------------------------------------------

def test_zero_iterations_returns_the_victim(tiny_victim, shadow_set, tiny_data):
    cfg = BloConfig(blo_iterations=0, seed=3)
    pm = run_blo(tiny_victim, shadow_set, tiny_data["verify"], cfg)
    x = tiny_data["test"].inputs
    assert pm.history == []
    assert np.array_equal(pm.predict(x), tiny_victim.predict(x))
    assert np.array_equal(pm.predict(x, "hard"), tiny_victim.logits(x).argmax(1))
    expect = init_trigger(SHAPE, 9, rng=defense.make_rng(3, "blo/trigger"))
    assert np.array_equal(pm.trigger.delta, expect.delta)


def test_history_structure(small_blo):
    assert [h["iteration"] for h in small_blo.history] == [0, 1]
    for h in small_blo.history:
        assert {"shadow_train_loss", "trigger_success_on_shadow", "honeypot_clean_acc"} <= set(h)


def test_blo_is_deterministic(small_blo, tiny_victim, shadow_set, tiny_data):
    cfg = BloConfig(blo_iterations=2, samples_per_iter=64, epochs_per_step=1, seed=3)
    again = run_blo(tiny_victim, shadow_set, tiny_data["verify"], cfg)
    assert np.array_equal(again.honeypot.flat_params(), small_blo.honeypot.flat_params())
    assert trigger_bytes(again.trigger) == trigger_bytes(small_blo.trigger)


def test_backbone_is_frozen(small_blo, tiny_victim):
    assert np.array_equal(small_blo.backbone.flat_params(), tiny_victim.backbone.flat_params())


def test_inner_abort_names_iteration_and_step(monkeypatch, tiny_victim, shadow_set, tiny_data):
    def broken(*args, **kwargs):
        raise NumericError("trigger gradient is not finite")
    monkeypatch.setattr(defense, "trigger_gradient", broken)
    cfg = BloConfig(blo_iterations=1, samples_per_iter=64, epochs_per_step=1, seed=3)
    with pytest.raises(TrainingError) as info:
        run_blo(tiny_victim, shadow_set, tiny_data["verify"], cfg)
    assert info.value.step == 0 and info.value.stage == "trigger-generation"
    assert "iteration 0" in str(info.value)


def test_blo_config_validation():
    with pytest.raises(ConfigError):
        BloConfig(finetune_lr=0.0)
    with pytest.raises(ConfigError):
        BloConfig(label_loss="mse")


# -- oracle surface -----------------------------------------------------------

def test_predict_contract(small_blo, tiny_data):
    x = tiny_data["test"].inputs[:100]
    p = small_blo.predict(x)
    assert np.abs(p.sum(1) - 1).max() < 1e-12
    assert np.array_equal(small_blo.predict(x), p)
    probes = np.random.default_rng(0).uniform(size=(1000, *SHAPE))
    assert np.array_equal(small_blo.predict(probes, "hard"), small_blo.predict(probes).argmax(1))
    with pytest.raises(UsageError):
        small_blo.predict(x - 0.5)
    with pytest.raises(UsageError):
        small_blo.predict(x, "logits")


# -- codec ------------------------------------------------------------------

def test_trigger_round_trip(tmp_path, small_blo):
    path = tmp_path / "t.hptr"
    save_trigger(small_blo.trigger, path)
    back = load_trigger(path)
    assert trigger_bytes(back) == path.read_bytes()
    assert np.array_equal(back.delta, small_blo.trigger.delta) and back.patch == (6, 4, 4)
    assert path.stat().st_size == 52 + 9 * 256  # header, u8 mask, f64 delta


def test_trigger_codec_errors(small_blo):
    raw = trigger_bytes(small_blo.trigger)
    with pytest.raises(CodecError, match="magic"):
        trigger_from_bytes(b"HPNT" + raw[4:])
    with pytest.raises(CodecError, match="size mismatch"):
        trigger_from_bytes(raw[:-1])
    bad_mask = bytearray(raw)
    bad_mask[52] = 7
    with pytest.raises(CodecError, match="invalid trigger"):
        trigger_from_bytes(bytes(bad_mask))


def test_protected_round_trip(tmp_path, small_blo, tiny_data):
    paths = [tmp_path / n for n in ("b.hpnt", "h.hpnt", "t.hptr")]
    save_protected(small_blo, *paths)
    back = load_protected(*paths)
    x = tiny_data["test"].inputs
    assert np.array_equal(back.predict(x), small_blo.predict(x))
    with pytest.raises(CodecError, match="roles"):
        load_protected(paths[1], paths[0], paths[2])


@pytest.mark.slow
def test_default_blo_plants_the_trigger_in_its_shadow(default_run):
    history = json.loads((default_run[0] / "protected" / "history.json").read_text())
    assert len(history) == 30
    assert history[-1]["trigger_success_on_shadow"] > history[0]["trigger_success_on_shadow"]
