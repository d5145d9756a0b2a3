import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iap.attack import (
    AttackConfig, AttackError, QueryBudgetExceeded, QueryModel, iap_attack, iap_attack_batch, lavan_style_attack,
    lavan_style_attack_batch, localize, mpgd_attack, nes_gradient, total_loss, update_step,
)
from iap.engine import EngineError, Layer, backward_to_input, forward, softmax_cross_entropy
from iap.localization import empty_region, make_mask
from iap.model import VictimModel
from iap.perceptibility import SensitivityMap, sensitivity_map

import oracles

SIDE = 8


def tiny_model(seed=0, classes=4, relu=True, gain=1.0):
    rng = np.random.default_rng(seed)
    layers = [Layer.conv3x3(3, 3, rng)]
    if relu:
        layers.append(Layer("relu"))
    layers += [Layer.conv3x3(3, 2, rng), Layer("flatten"), Layer.dense(SIDE * SIDE * 2, classes, rng)]
    for layer in layers:
        if layer.bias is not None:
            layer.bias[:] = rng.uniform(0.05, 0.2, size=layer.bias.shape)
    layers[-1].weight *= gain
    return VictimModel(layers, classes, len(layers) - 3)


def sample(seed, model):
    x = np.random.default_rng(seed).uniform(0.05, 0.95, size=(SIDE, SIDE, 3)).astype(np.float32)
    y = int(model.predict(x))
    return x, y, (y + 1) % model.class_count


def cfg(**kw):
    base = dict(patch_w=3, patch_h=3, T=30, reinit_limit=1, eta=0.5, w2=0.0, w3=1.0)
    base.update(kw)
    return AttackConfig(**base)


# -- total loss --------------------------------------------------------------------------


def test_weight_collapse_gives_targeted_ce():
    m = tiny_model()
    x, y, t = sample(0, m)
    region = make_mask((1, 1), 3, 3, x.shape)
    sens = sensitivity_map(x)
    xa = x.copy()
    xa[2, 2] = 0.9
    loss, _ = total_loss(m, x, xa, y, t, region, sens, (1.0, 0.0, 0.0))
    ce, _ = softmax_cross_entropy(m.logits(xa), t)
    assert abs(loss - float(ce)) < 1e-6


def test_distance_term_zero_at_identity():
    m = tiny_model()
    x, y, t = sample(1, m)
    region = make_mask((1, 1), 3, 3, x.shape)
    sens = sensitivity_map(x)
    a, _ = total_loss(m, x, x, y, t, region, sens, (1.0, 1.0, 7.0))
    b, _ = total_loss(m, x, x, y, t, region, sens, (1.0, 1.0, 0.0))
    assert a == b


def test_total_loss_class_range():
    m = tiny_model()
    x, y, _ = sample(2, m)
    region = make_mask((0, 0), 2, 2, x.shape)
    with pytest.raises(EngineError):
        total_loss(m, x, x, y, 4, region, sensitivity_map(x))


def _ref_total(m, x, xa, y, t, mask, sens, w):
    z = oracles.forward(m.layers, xa)
    return (w[0] * oracles.cross_entropy(z, t) - w[1] * oracles.cross_entropy(z, y)
            + w[2] * oracles.perceptual_distance(x, xa, mask, sens))


@pytest.mark.parametrize("seed", range(10))
def test_total_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = tiny_model(seed)
    x, y, t = sample(seed, m)
    region = make_mask((2, 3), 4, 4, x.shape)
    sens = SensitivityMap(rng.uniform(1, 10, size=(SIDE, SIDE)), 1e-4, 1)
    xa = x.astype(np.float64).copy()
    xa[region.mask] += rng.choice([-1, 1], size=(16, 3)) * rng.uniform(0.05, 0.2, size=(16, 3))
    xa = np.clip(xa, 0.01, 0.99)
    w = (1.0, 1.0, 7.0)
    _, g = total_loss(m, x, xa.astype(np.float32), y, t, region, sens, w)
    assert not g[~region.mask].any()
    f0 = _ref_total(m, x, xa, y, t, region.mask, sens.values, w)
    h = 1e-4
    got, est = [], []
    pix = list(zip(*np.nonzero(region.mask)))
    for k in rng.permutation(len(pix))[:20]:
        i, j = pix[k]
        c = int(rng.integers(3))
        p, q = xa.copy(), xa.copy()
        p[i, j, c] += h
        q[i, j, c] -= h
        fp = _ref_total(m, x, p, y, t, region.mask, sens.values, w)
        fm = _ref_total(m, x, q, y, t, region.mask, sens.values, w)
        if abs(fp - 2 * f0 + fm) > 1e-9:
            continue
        got.append(g[i, j, c])
        est.append((fp - fm) / (2 * h))
    assert len(got) >= 15
    got, est = np.array(got), np.array(est)
    assert np.abs(got - est).max() / np.abs(est).max() < 1e-3


# -- update rule -------------------------------------------------------------------------


def test_update_step_examples():
    d = np.array([[[0.2, 0.4, 0.6]]], np.float32)
    assert np.array_equal(update_step(d, np.zeros_like(d), np.ones((1, 1)), 0.1), d)
    out = update_step(d, np.ones_like(d), np.full((1, 1), 2.0), 0.1)
    np.testing.assert_allclose(out, [[[0.19, 0.38, 0.57]]], rtol=1e-6)


def test_update_step_errors():
    d = np.full((2, 2, 3), 0.5, np.float32)
    with pytest.raises(AttackError):
        update_step(d, d, np.zeros((2, 2)), 0.1)
    with pytest.raises(AttackError):
        update_step(d, d[:1], np.ones((2, 2)), 0.1)


def test_update_step_clips():
    d = np.full((1, 2, 3), 0.5, np.float32)
    g = np.array([[[-100.0] * 3, [100.0] * 3]], np.float32)
    out = update_step(d, g, np.ones((1, 2)), 1.0)
    assert out[0, 0].tolist() == [1.0] * 3 and out[0, 1].tolist() == [0.0] * 3


def test_hue_ratio_preserved_over_many_steps():
    rng = np.random.default_rng(0)
    d = rng.uniform(0.2, 0.5, size=(6, 6, 3)).astype(np.float32)
    sens = rng.uniform(1, 100, size=(6, 6))
    for _ in range(1000):
        g = rng.normal(0, 1, size=d.shape).astype(np.float32)
        new = update_step(d, g, sens, 0.01)
        assert new.max() < 1 and new.min() > 0  # no clipping in this regime
        r_old = d[..., :2] / d[..., 2:]
        r_new = new[..., :2] / new[..., 2:]
        assert (np.abs(r_new - r_old) / r_old).max() < 1e-6
        d = new


# -- IAP loop ----------------------------------------------------------------------------


def test_config_validation():
    for bad in (dict(eta=0), dict(s=0), dict(s=1.5), dict(T=0), dict(reinit_limit=-1), dict(stride=0),
                dict(update_rule="sgd")):
        with pytest.raises(AttackError):
            AttackConfig(**bad).validate()


def test_input_checks():
    m = tiny_model()
    x, y, t = sample(3, m)
    with pytest.raises(AttackError, match="differ"):
        iap_attack(m, x, y, y, cfg())
    with pytest.raises(AttackError, match="not classified"):
        iap_attack(m, x, (y + 2) % 4, t, cfg())
    with pytest.raises(AttackError, match="range"):
        iap_attack(m, x, y, 7, cfg())


def test_tiny_threshold_still_steps_at_least_once():
    m = tiny_model()
    x, y, t = sample(4, m)
    out = iap_attack(m, x, y, t, cfg(s=1e-9))
    assert out.iterations_used >= 1


def test_empty_mask_cannot_succeed():
    m = tiny_model()
    x, y, t = sample(5, m)
    out = iap_attack(m, x, y, t, cfg(), region=empty_region(x.shape))
    assert not out.success and out.reinits_used == 0
    assert np.array_equal(out.adversarial, x)


def _attack_many(seed, gain=1.0, **kw):
    m = tiny_model(seed, gain=gain)
    rng = np.random.default_rng(seed)
    xs = rng.uniform(0.05, 0.95, size=(6, SIDE, SIDE, 3)).astype(np.float32)
    ys = m.predict(xs)
    ts = (ys + 1) % m.class_count
    return m, xs, ys, ts, iap_attack_batch(m, xs, ys, ts, cfg(**kw))


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["iap", "adam"]), st.sampled_from(["rect", "circle"]))
def test_outcome_invariants(seed, rule, shape):
    m, xs, ys, ts, outs = _attack_many(seed, update_rule=rule, shape=shape, patch_w=4, patch_h=4)
    for x, t, o in zip(xs, ts, outs):
        assert np.array_equal(o.adversarial[~o.region.mask], x[~o.region.mask])
        assert o.adversarial.min() >= 0 and o.adversarial.max() <= 1
        p = m.probabilities(o.adversarial)
        gate = p[t] >= 0.9 and int(p.argmax()) == t
        assert o.success == gate
        assert abs(o.final_confidence - p[t]) < 1e-6
        assert o.region.area == (16 if shape == "rect" else int(o.region.mask.sum()))


def test_attack_is_deterministic():
    a = _attack_many(11)[-1]
    b = _attack_many(11)[-1]
    for p, q in zip(a, b):
        assert p.adversarial.tobytes() == q.adversarial.tobytes()
        assert (p.success, p.iterations_used, p.reinits_used, p.anchor) == (q.success, q.iterations_used,
                                                                             q.reinits_used, q.anchor)


def test_no_change_after_gate():
    m, xs, ys, ts, outs = _attack_many(13, gain=10.0, reinit_limit=0, T=200)
    longer = _attack_many(13, gain=10.0, reinit_limit=0, T=400)[-1]
    wins = [k for k, o in enumerate(outs) if o.success]
    assert len(wins) >= 2
    for k in wins:
        assert longer[k].success and longer[k].iterations_used == outs[k].iterations_used
        assert longer[k].adversarial.tobytes() == outs[k].adversarial.tobytes()


def test_reinit_halves_and_resets():
    m, xs, ys, ts, outs = _attack_many(14, T=1, reinit_limit=2, eta=1e-6)
    for o in outs:
        assert not o.success
        assert o.reinits_used == 2 and o.iterations_used == 3


def test_black_pixels_are_lifted():
    m = tiny_model(15)
    x, y, t = sample(15, m)
    region = make_mask((2, 2), 3, 3, x.shape)
    x[3, 3] = 0
    y = int(m.predict(x))
    t = (y + 1) % 4
    o = iap_attack(m, x, y, t, cfg(T=1, reinit_limit=0, eta=1e-9), region=region)
    assert np.all(o.adversarial[3, 3] > 0)


def test_localize_uses_priority_argmax():
    from iap.localization import find_optimal_location
    m = tiny_model(16)
    x, y, _ = sample(16, m)
    c = cfg(patch_w=4, patch_h=2, stride=2)
    region, sens, field = localize(m, x, y, c)
    assert region.anchor == find_optimal_location(field, 2)
    assert (region.w, region.h) == (4, 2) and region.area == 8
    assert np.array_equal(sens.values, sensitivity_map(x).values)


# -- baselines ---------------------------------------------------------------------------


def test_mpgd_zero_epsilon_and_bound():
    m = tiny_model(20)
    x, y, t = sample(20, m)
    region = make_mask((1, 1), 4, 4, x.shape)
    o = mpgd_attack(m, x, y, t, region, epsilon=0.0, steps=20)
    assert np.array_equal(o.adversarial, x)
    o = mpgd_attack(m, x, y, t, region, steps=50, step_size=4 / 255)
    diff = np.abs(o.adversarial.astype(np.float64) - x)
    assert diff[region.mask].max() <= 16 / 255 + 1e-7 and not diff[~region.mask].any()


def test_mpgd_single_step_closed_form_on_linear_model():
    m = tiny_model(21, relu=False)
    x, y, t = sample(21, m)
    region = make_mask((2, 2), 3, 3, x.shape)
    # linear model: logits = A x + b, with A recovered column by column
    b = oracles.forward(m.layers, np.zeros_like(x))
    A = np.stack([oracles.forward(m.layers, e.reshape(x.shape)) - b for e in np.eye(x.size)], axis=1)
    z = A @ x.reshape(-1).astype(np.float64) + b
    p = np.exp(z - z.max())
    p /= p.sum()
    grad = (A.T @ (p - np.eye(4)[t])).reshape(x.shape)
    step = 2 / 255
    want = np.where(region.mask[..., None], np.clip(x - step * np.sign(grad), 0, 1), x)
    o = mpgd_attack(m, x, y, t, region, steps=1, step_size=step, s=1.0)
    np.testing.assert_allclose(o.adversarial, want, atol=1e-7)


def test_lavan_init_and_confinement():
    m = tiny_model(22)
    x, y, t = sample(22, m)
    region = make_mask((1, 2), 4, 4, x.shape)
    o = lavan_style_attack(m, x, y, t, region, steps=0)
    assert np.all(o.adversarial[region.mask] != x[region.mask])
    o = lavan_style_attack(m, x, y, t, region, steps=20, step_size=0.5)
    assert np.array_equal(o.adversarial[~region.mask], x[~region.mask])
    again = lavan_style_attack(m, x, y, t, region, steps=20, step_size=0.5)
    assert o.adversarial.tobytes() == again.adversarial.tobytes()
    assert o.adversarial.min() >= 0 and o.adversarial.max() <= 1


def test_baselines_judge_final_iterate():
    m = tiny_model(23)
    rng = np.random.default_rng(23)
    xs = rng.uniform(0.05, 0.95, size=(4, SIDE, SIDE, 3)).astype(np.float32)
    ys = m.predict(xs)
    ts = (ys + 1) % 4
    regions = [make_mask((0, 0), 5, 5, xs[0].shape)] * 4
    for o, t in zip(lavan_style_attack_batch(m, xs, ys, ts, regions, steps=30), ts):
        p = m.probabilities(o.adversarial)
        assert o.success == (p[t] >= 0.9 and int(p.argmax()) == t)


# -- NES ---------------------------------------------------------------------------------


def test_nes_query_count_and_budget():
    m = tiny_model(30)
    x, _, t = sample(30, m)
    q = QueryModel(m)
    nes_gradient(q, x, t, n_samples=7)
    assert q.count == 14
    q = QueryModel(m, budget=10)
    with pytest.raises(QueryBudgetExceeded):
        nes_gradient(q, x, t, n_samples=6)
    with pytest.raises(AttackError):
        nes_gradient(QueryModel(m), x, t, sigma=0)


def test_nes_antithetic_symmetry():
    m = tiny_model(31)
    x, _, t = sample(31, m)
    noise = np.random.default_rng(0).standard_normal((10,) + x.shape)
    a = nes_gradient(QueryModel(m), x, t, noise=noise, n_samples=10)
    b = nes_gradient(QueryModel(m), x, t, noise=-noise, n_samples=10)
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-9)


def test_nes_constant_model_gives_zero():
    def const(batch):
        return np.full((len(batch), 4), 0.25)

    g = nes_gradient(const, np.full((4, 4, 3), 0.5), 1, n_samples=8)
    assert not g.any()


def test_nes_mask_confines_estimate():
    m = tiny_model(32)
    x, _, t = sample(32, m)
    region = make_mask((2, 2), 3, 3, x.shape)
    g = nes_gradient(QueryModel(m), x, t, mask=region.mask, n_samples=20)
    assert not g[~region.mask].any() and g[region.mask].any()


def test_nes_aligns_with_white_box_gradient():
    m = tiny_model(33)
    x, _, t = sample(33, m)
    region = make_mask((1, 1), 4, 4, x.shape)
    logits, cache = forward(m.layers, x)
    _, up = softmax_cross_entropy(logits, t)
    wb = backward_to_input(m.layers, cache, up)[region.mask].ravel()
    est = nes_gradient(QueryModel(m), x, t, sigma=0.01, n_samples=200, mask=region.mask)[region.mask].ravel()
    assert wb @ est / (np.linalg.norm(wb) * np.linalg.norm(est)) > 0.5


def test_nes_survives_float32_underflow():
    m = tiny_model(34, gain=400.0)
    x, _, _ = sample(34, m)
    logits = m.logits(x[None])[0].astype(np.float64)
    t = int(np.argmin(logits))
    assert logits.max() - logits[t] > 110  # float32 softmax gives exactly 0 here
    assert m.probabilities(x[None])[0, t] == 0.0
    assert QueryModel(m)(x[None])[0, t] > 0.0
    region = make_mask((1, 1), 4, 4, x.shape)
    assert nes_gradient(QueryModel(m), x, t, n_samples=20, mask=region.mask)[region.mask].any()


def test_untargeted_nes_descends_logit_margin_when_saturated():
    m = tiny_model(35, gain=50.0)
    x, y, _ = sample(35, m)
    assert m.probabilities(x[None])[0, y] > 0.999

    def margin(img):
        z = m.logits(img[None])[0].astype(np.float64)
        return z[y] - np.delete(z, y).max()

    g = nes_gradient(QueryModel(m), x, y, sigma=0.01, n_samples=200, targeted=False).astype(np.float64)
    step = x - 0.05 * g / np.abs(g).max()
    assert margin(step) < margin(x)
