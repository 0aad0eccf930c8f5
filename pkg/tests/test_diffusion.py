from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from combo import diffusion as dm
from combo import tinynet as tn
from combo.cli import oracle_suite

# cumulative product of (1 - beta) for 100 linear steps in [1e-4, 0.02], computed
# with 50-digit arithmetic
ALPHA_BAR_100 = 0.36356324805549191545


class OracleModel:
    """Stands in for a denoiser: recovers the true noise from the clean target."""

    def __init__(self, target, sched, offsets=None):
        self.target, self.sched, self.offsets = target, sched, offsets

    def eps(self, x_t, t, cond, action=None):
        reps = x_t.shape[0] // self.target.shape[0]
        x0 = np.repeat(self.target, reps, axis=0)
        out = dm.eps_from_start(x_t, t, x0, self.sched)
        if self.offsets is not None:
            out = out + np.tile(self.offsets, (self.target.shape[0],) + (1,) * (out.ndim - 1))
        return tn.Tensor(out, requires_grad=True)


class ZeroModel:
    def eps(self, x_t, t, cond, action=None):
        return tn.Tensor(np.zeros_like(x_t), requires_grad=True)


def small_model(seed=0, cells=4, ch=2, cond_ch=3, vec=5):
    net = tn.Network({"kind": "cell", "cells": cells, "x_ch": ch, "cond_ch": cond_ch,
                      "vec_dim": vec, "hidden": 8, "emb": 6, "t_dim": 4, "depth": 1,
                      "act": "tanh"}, seed=seed)
    return dm.DenoiserModel(net)


# -- schedule ---------------------------------------------------------------

def test_single_step_schedule_uses_beta_min():
    s = dm.linear_schedule(1, 1e-3, 0.5)
    assert s.T == 1 and s.betas[0] == 1e-3


def test_alpha_bar_matches_high_precision_product():
    s = dm.linear_schedule(100, 1e-4, 0.02)
    assert s.abar(100) == pytest.approx(ALPHA_BAR_100, rel=1e-13)
    assert s.alpha_bars[0] == 1.0


@settings(max_examples=50)
@given(T=st.integers(1, 400), lo=st.floats(1e-6, 0.3), span=st.floats(0.0, 0.6))
def test_schedule_is_monotone_and_finite(T, lo, span):
    hi = min(lo + span, 0.99)
    s = dm.linear_schedule(T, lo, hi)
    assert np.all(np.diff(s.betas) >= 0)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert 0 < s.abar(T) < 1
    assert np.all(np.isfinite(s.sigmas))


def test_invalid_bounds_are_rejected():
    for lo, hi in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0)]:
        with pytest.raises(dm.ScheduleError):
            dm.linear_schedule(10, lo, hi)


# -- forward noising --------------------------------------------------------

def test_forward_noise_with_zero_noise_scales_the_input():
    s = dm.linear_schedule()
    x0 = np.array([[1.0, -2.0]])
    assert np.allclose(dm.forward_noise(x0, 40, np.zeros_like(x0), s), np.sqrt(s.abar(40)) * x0)


def test_forward_noise_near_zero_time_is_nearly_clean():
    s = dm.linear_schedule(10, 1e-8, 1e-8)
    x0 = np.array([0.3, 0.7])
    assert np.allclose(dm.forward_noise(x0, 1, np.ones(2), s), x0, atol=1e-3)


def test_forward_noise_is_the_affine_combination():
    s = dm.linear_schedule()
    ab = s.abar(10)
    got = dm.forward_noise(np.array([2.0]), 10, np.array([-1.0]), s)
    assert got[0] == pytest.approx(2.0 * ab ** 0.5 - (1 - ab) ** 0.5)


def test_forward_noise_rejects_bad_steps():
    s = dm.linear_schedule()
    for t in (0, 101):
        with pytest.raises(dm.ScheduleError):
            dm.forward_noise(np.zeros(2), t, np.zeros(2), s)


def test_start_and_noise_predictions_invert_each_other():
    s = dm.linear_schedule()
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    t = np.array([1, 50, 100])
    x_t = dm.forward_noise(x0, t, eps, s)
    assert np.allclose(dm.predict_start(x_t, t, eps, s), x0)
    assert np.allclose(dm.eps_from_start(x_t, t, x0, s), eps)


# -- composition ------------------------------------------------------------

def test_one_condition_at_unit_weight_is_exact():
    rng = np.random.default_rng(1)
    u, c = rng.standard_normal(6), rng.standard_normal(6)
    assert np.array_equal(dm.compose_noise(u, [c], 1.0), c)


@settings(max_examples=50)
@given(omega=st.floats(0.01, 20), n=st.integers(1, 5))
def test_identical_conditions_leave_the_unconditional(omega, n):
    u = np.linspace(-1, 1, 5)
    assert np.allclose(dm.compose_noise(u, [u.copy()] * n, omega), u)


def test_opposite_conditions_cancel():
    assert np.allclose(dm.compose_noise(np.zeros(3), [np.ones(3), -np.ones(3)], 5.0), 0.0)


def test_composition_needs_conditions_and_positive_weight():
    with pytest.raises(dm.CompositionError):
        dm.compose_noise(np.zeros(2), [], 1.0)
    with pytest.raises(dm.CompositionError):
        dm.compose_noise(np.zeros(2), [np.ones(2)], 0.0)


def test_guided_eps_matches_manual_composition():
    model = small_model()
    rng = np.random.default_rng(2)
    cond = rng.standard_normal((2, 4, 3))
    acts = rng.standard_normal((2, 3, 5))
    x = rng.standard_normal((2, 4, 2))
    got = dm.guided_eps_fn(model, cond, acts, omega=2.5)(x, 17)
    u = model.eps_np(x, 17, cond, None)
    conds = [model.eps_np(x, 17, cond, acts[:, i]) for i in range(3)]
    assert np.allclose(got, dm.compose_noise(u, conds, 2.5))


# -- sampling ---------------------------------------------------------------

def test_single_gaussian_factor_is_recovered():
    s = dm.linear_schedule(200, 1e-4, 0.05)
    f = dm.GaussianFactor([1.5, -0.5], [0.5, 2.0])
    x = dm.sample(lambda x_t, t: dm.gaussian_eps(f, x_t, t, s), (20000, 2), s,
                  sampler="ddpm", rng=np.random.default_rng(3))
    assert np.all(np.abs(x.mean(0) - f.mean) < 0.05)
    assert np.all(np.abs(x.var(0) / f.var - 1) < 0.10)


def test_deterministic_ddim_is_reproducible():
    s = dm.linear_schedule()
    f = dm.GaussianFactor([0.2], [0.3])
    fn = lambda x_t, t: dm.gaussian_eps(f, x_t, t, s)
    a = dm.sample(fn, (50, 1), s, sampler="ddim", ddim_steps=100, rng=np.random.default_rng(4))
    b = dm.sample(fn, (50, 1), s, sampler="ddim", ddim_steps=100, rng=np.random.default_rng(4))
    assert np.array_equal(a, b)


def test_ddim_timesteps_cover_the_range():
    assert dm.ddim_timesteps(100, 25)[-1] == 100
    assert dm.ddim_timesteps(100, 100) == list(range(1, 101))
    with pytest.raises(dm.ScheduleError):
        dm.ddim_timesteps(10, 11)


def test_composed_gaussian_samples_match_the_product():
    res = oracle_suite(n_samples=20000, seed=0)
    assert res["max_mean_error"] < 0.05
    assert res["max_var_rel_error"] < 0.10


def test_clipping_bounds_the_start_estimate():
    s = dm.linear_schedule()
    f = dm.GaussianFactor([3.0], [0.1])
    x = dm.sample(lambda x_t, t: dm.gaussian_eps(f, x_t, t, s), (200, 1), s,
                  sampler="ddim", ddim_steps=25, rng=np.random.default_rng(5), clip=1.0)
    assert np.all(np.abs(x) <= 1.0 + 1e-9)


# -- product of Gaussians ---------------------------------------------------

def test_single_factor_product_is_the_factor():
    f = dm.GaussianFactor([1.0, 2.0], [0.5, 3.0])
    g = dm.product_of_gaussians(dm.GaussianFactor([0.0, 0.0], [4.0, 4.0]), [f])
    assert np.allclose(g.mean, f.mean) and np.allclose(g.var, f.var)


def test_identical_factors_with_flat_prior_halve_the_variance():
    f = dm.GaussianFactor([0.7], [1.8])
    g = dm.product_of_gaussians(None, [f, f])
    assert g.mean[0] == pytest.approx(0.7) and g.var[0] == pytest.approx(0.9)


def test_opposite_factors_under_a_broad_prior():
    prior = dm.GaussianFactor([0.0], [4.0])
    g = dm.product_of_gaussians(prior, [dm.GaussianFactor([1.0], [1.0]),
                                        dm.GaussianFactor([-1.0], [1.0])])
    # precision 1/4 + 2 * (1 - 1/4) = 7/4
    assert g.mean[0] == pytest.approx(0.0, abs=1e-15)
    assert g.var[0] == pytest.approx(4 / 7)


def test_improper_product_is_rejected():
    prior = dm.GaussianFactor([0.0], [0.1])
    with pytest.raises(dm.CompositionError):
        dm.product_of_gaussians(prior, [dm.GaussianFactor([0.0], [1.0])] * 2)


# -- single loss ------------------------------------------------------------

def _batch(rng, b=3, n=4, k=2):
    return {"target": rng.standard_normal((b, n, k)), "cond": rng.standard_normal((b, n, 3)),
            "action": rng.standard_normal((b, 5)), "agent": np.array([0, 1, 0])[:b]}


def test_perfect_prediction_gives_zero_single_loss():
    s = dm.linear_schedule()
    batch = _batch(np.random.default_rng(6))
    loss = dm.single_loss_tensor(OracleModel(batch["target"], s), batch, None, s,
                                 np.random.default_rng(7))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-20)


def test_unit_scale_matrix_is_the_plain_loss():
    s = dm.linear_schedule()
    batch = _batch(np.random.default_rng(8))
    model = small_model()
    plain = dm.single_loss_tensor(model, batch, None, s, np.random.default_rng(9))
    unit = dm.single_loss_tensor(model, batch, dm.LossScaleMatrix.uniform(2, 4), s,
                                 np.random.default_rng(9))
    assert float(plain.data) == float(unit.data)


def test_doubled_region_adds_its_own_error_once_more():
    s = dm.linear_schedule()
    batch = _batch(np.random.default_rng(10))
    region = [[1, 2], [3]]
    scale = dm.LossScaleMatrix.from_regions(4, region, inside=2.0)
    got = float(dm.single_loss_tensor(ZeroModel(), batch, scale, s,
                                      np.random.default_rng(11)).data)
    rng = np.random.default_rng(11)
    rng.integers(1, s.T + 1, size=3)
    eps = rng.standard_normal(batch["target"].shape)
    sq = eps ** 2
    extra = sum(sq[r, region[a]].sum() for r, a in enumerate(batch["agent"]))
    assert got == pytest.approx(sq.mean() + extra / sq.size)


def test_loss_scale_matrix_must_be_positive():
    with pytest.raises(ValueError):
        dm.LossScaleMatrix(np.array([[1.0, 0.0]]))


def test_null_dropout_zeroes_some_actions():
    s = dm.linear_schedule()
    seen = []

    class Spy(ZeroModel):
        def eps(self, x_t, t, cond, action=None):
            seen.append(np.asarray(action).copy())
            return super().eps(x_t, t, cond, action)

    batch = _batch(np.random.default_rng(12), b=3)
    batch["target"] = np.zeros((400, 4, 2))
    batch["cond"] = np.zeros((400, 4, 3))
    batch["action"] = np.ones((400, 5))
    batch["agent"] = np.zeros(400, dtype=int)
    dm.single_loss_tensor(Spy(), batch, None, s, np.random.default_rng(13), p_null=0.1)
    dropped = np.mean(np.all(seen[0] == 0, axis=1))
    assert 0.05 < dropped < 0.15


# -- composed loss ----------------------------------------------------------

def test_composed_loss_needs_two_agents():
    s = dm.linear_schedule()
    rng = np.random.default_rng(14)
    batch = {"target": rng.standard_normal((2, 4, 2)), "cond": rng.standard_normal((2, 4, 3)),
             "actions": rng.standard_normal((2, 1, 5))}
    with pytest.raises(dm.CompositionError):
        dm.composed_loss_tensor(small_model(), batch, s, rng)


def _joint_batch(rng, n=2):
    return {"target": rng.standard_normal((3, 4, 2)), "cond": rng.standard_normal((3, 4, 3)),
            "actions": rng.standard_normal((3, n, 5))}


def test_true_noise_in_every_branch_gives_zero():
    s = dm.linear_schedule()
    batch = _joint_batch(np.random.default_rng(15), n=3)
    loss = dm.composed_loss_tensor(OracleModel(batch["target"], s), batch, s,
                                   np.random.default_rng(16))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-20)


def test_opposite_branch_errors_cancel():
    s = dm.linear_schedule()
    batch = _joint_batch(np.random.default_rng(17), n=2)
    delta = np.random.default_rng(18).standard_normal((2, 4, 2))
    offsets = np.stack([delta[0], -delta[0]])
    loss = dm.composed_loss_tensor(OracleModel(batch["target"], s, offsets), batch, s,
                                   np.random.default_rng(19))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-20)


def test_composed_loss_equals_naive_recomputation():
    s = dm.linear_schedule()
    model = small_model()
    batch = _joint_batch(np.random.default_rng(20), n=3)
    got = float(dm.composed_loss_tensor(model, batch, s, np.random.default_rng(21)).data)
    rng = np.random.default_rng(21)
    t = rng.integers(1, s.T + 1, size=3)
    eps = rng.standard_normal(batch["target"].shape)
    x_t = dm.forward_noise(batch["target"], t, eps, s)
    preds = [np.stack([model.eps_np(x_t[b:b + 1], t[b], batch["cond"][b:b + 1],
                                    batch["actions"][b:b + 1, i]) [0]
                       for b in range(3)]) for i in range(3)]
    naive = np.mean((np.mean(preds, axis=0) - eps) ** 2)
    assert got == pytest.approx(naive, rel=1e-12)


def test_guided_composite_equals_naive_recomputation():
    s = dm.linear_schedule()
    model = small_model()
    batch = _joint_batch(np.random.default_rng(26), n=3)
    got = float(dm.composed_loss_tensor(model, batch, s, np.random.default_rng(27),
                                        form="guided").data)
    rng = np.random.default_rng(27)
    t = rng.integers(1, s.T + 1, size=3)
    eps = rng.standard_normal(batch["target"].shape)
    x_t = dm.forward_noise(batch["target"], t, eps, s)
    acts = np.concatenate([batch["actions"], np.zeros((3, 1, 5))], axis=1)
    preds = [np.stack([model.eps_np(x_t[b:b + 1], t[b], batch["cond"][b:b + 1],
                                    acts[b:b + 1, i])[0]
                       for b in range(3)]) for i in range(4)]
    composite = dm.compose_noise(preds[3], preds[:3], 1.0)
    assert got == pytest.approx(np.mean((composite - eps) ** 2), rel=1e-10)


def test_guided_composite_is_zero_when_every_branch_is_exact():
    s = dm.linear_schedule()
    batch = _joint_batch(np.random.default_rng(28), n=2)
    loss = dm.composed_loss_tensor(OracleModel(batch["target"], s), batch, s,
                                   np.random.default_rng(29), form="guided")
    assert float(loss.data) == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        dm.composed_loss_tensor(OracleModel(batch["target"], s), batch, s,
                                np.random.default_rng(29), form="median")


@pytest.mark.parametrize("which", ["single", "composed", "guided"])
def test_loss_gradients_pass_grad_check(which):
    s = dm.linear_schedule()
    model = small_model(seed=3)
    data_rng = np.random.default_rng(22)
    if which == "single":
        batch = _batch(data_rng)
        scale = dm.LossScaleMatrix.from_regions(4, [[0, 1], [2]])
        fn = lambda net: dm.single_loss_tensor(model, batch, scale, s, np.random.default_rng(23))
    else:
        batch = _joint_batch(data_rng, n=2)
        form = "guided" if which == "guided" else "mean"
        fn = lambda net: dm.composed_loss_tensor(model, batch, s, np.random.default_rng(23), form)
    assert tn.grad_check(model.net, fn, tolerance=1e-4).passed


def test_loss_functions_return_gradients_for_every_parameter():
    s = dm.linear_schedule()
    model = small_model()
    loss, grads = dm.loss_composed(model, _joint_batch(np.random.default_rng(24)), s,
                                   np.random.default_rng(25))
    assert loss > 0 and set(grads) == set(model.net.params)
