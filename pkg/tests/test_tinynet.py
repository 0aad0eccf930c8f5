from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from combo import tinynet as tn


def mlp(hidden=(4,), n_in=3, n_out=2, act="tanh", seed=0, **kw):
    return tn.Network({"kind": "mlp", "in": n_in, "hidden": list(hidden), "out": n_out,
                       "act": act, **kw}, seed=seed)


def denoiser(kind="cell", seed=0, **kw):
    arch = {"kind": kind, "cells": 5, "x_ch": 3, "cond_ch": 2, "vec_dim": 4, "hidden": 8,
            "emb": 6, "t_dim": 4, "depth": 2, "act": "tanh", **kw}
    return tn.Network(arch, seed=seed)


def denoiser_batch(rng, b=2):
    return {"x": rng.standard_normal((b, 5, 3)), "t": np.arange(1, b + 1) * 3,
            "cond": rng.standard_normal((b, 5, 2)), "vec": rng.standard_normal((b, 4))}


def set_params(net, **values):
    for k, v in values.items():
        net.params[k].data = np.array(v, dtype=float)


# -- forward ----------------------------------------------------------------

def test_zero_weights_give_the_final_bias():
    net = mlp(hidden=(4,), act="silu")
    for p in net.params.values():
        p.data[...] = 0.0
    net.params["l1.b"].data[...] = [0.5, -2.0]
    out = net.forward(x=np.ones((3, 3))).numpy()
    assert np.array_equal(out, np.tile([0.5, -2.0], (3, 1)))


def test_identity_dense_layer_is_identity():
    net = mlp(hidden=(), n_in=3, n_out=3)
    set_params(net, **{"l0.w": np.eye(3), "l0.b": np.zeros(3)})
    x = np.array([[1.0, -2.0, 3.5]])
    assert np.array_equal(net.forward(x=x).numpy(), x)


def test_two_layer_net_matches_hand_computation():
    net = mlp(hidden=(2,), n_in=2, n_out=1, act="relu")
    set_params(net, **{"l0.w": [[1.0, -1.0], [2.0, 0.5]], "l0.b": [0.5, -0.25],
                       "l1.w": [[3.0], [-2.0]], "l1.b": [0.1]})
    # hidden pre-activations: [1 + 4 + 0.5, -1 + 1 - 0.25] = [5.5, -0.25] -> relu [5.5, 0]
    out = net.forward(x=np.array([[1.0, 2.0]])).numpy()
    assert out[0, 0] == pytest.approx(5.5 * 3.0 + 0.1)


def test_shape_mismatch_names_the_layer():
    with pytest.raises(tn.ShapeError, match="l0"):
        mlp().forward(x=np.ones((2, 5)))
    rng = np.random.default_rng(0)
    b = denoiser_batch(rng)
    b["cond"] = np.ones((2, 5, 3))
    with pytest.raises(tn.ShapeError, match="inp"):
        denoiser().forward(**b)


def test_sum_pooling_is_permutation_invariant():
    net = mlp(pool="sum")
    x = np.random.default_rng(1).standard_normal((2, 5, 3))
    a = net.forward(x=x).numpy()
    b = net.forward(x=x[:, ::-1]).numpy()
    assert a.shape == (2, 2)
    assert np.allclose(a, b)


def test_forward_is_pure():
    net = denoiser()
    b = denoiser_batch(np.random.default_rng(2))
    before = net.get_flat().copy()
    first = net.forward(**b).numpy()
    second = net.forward(**b).numpy()
    assert np.array_equal(first, second)
    assert np.array_equal(net.get_flat(), before)


def test_sinusoidal_embedding_layout():
    emb = tn.sinusoidal_embedding([0.0, 3.0], 6)
    assert emb.shape == (2, 6)
    assert np.array_equal(emb[0], [1, 1, 1, 0, 0, 0])
    assert emb[1, 0] == pytest.approx(np.cos(3.0))
    assert emb[1, 3] == pytest.approx(np.sin(3.0))


# -- backward ---------------------------------------------------------------

def test_backward_before_forward_is_a_usage_error():
    with pytest.raises(tn.UsageError):
        mlp().backward(np.ones((1, 2)))


def test_unused_parameter_has_exactly_zero_gradient():
    net = mlp(hidden=(4,))
    net.params["l1.w"].data[:, 1] = 0.0
    x = np.random.default_rng(3).standard_normal((5, 3))
    out = net.forward(x=x)
    # the loss only reads output 0, so output 1's bias never matters
    grads = net.backward(np.stack([np.ones(5), np.zeros(5)], axis=1))
    assert grads["l1.b"][1] == 0.0
    assert np.all(grads["l1.w"][:, 1] == 0.0)
    assert out.shape == (5, 2)


def test_linear_squared_loss_gradient_is_closed_form():
    rng = np.random.default_rng(4)
    X, Y = rng.standard_normal((10, 3)), rng.standard_normal((10, 2))
    net = mlp(hidden=(), n_in=3, n_out=2)
    W, b = net.params["l0.w"].data.copy(), net.params["l0.b"].data.copy()
    net.zero_grad()
    tn.mse(net.forward(x=X), Y).backward()
    resid = X @ W + b - Y
    n = resid.size
    assert np.allclose(net.grads()["l0.w"], 2 * X.T @ resid / n, atol=1e-12)
    assert np.allclose(net.grads()["l0.b"], 2 * resid.sum(0) / n, atol=1e-12)


def test_weighted_mse_weights_each_entry():
    pred = tn.Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    loss = tn.mse(pred, np.zeros((1, 2)), weight=np.array([[2.0, 1.0]]))
    assert float(loss.data) == pytest.approx((2 * 1 + 1 * 4) / 2)


def test_cross_entropy_matches_log_softmax():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 3.0]])
    labels = np.array([1, 2])
    t = tn.Tensor(logits, requires_grad=True)
    loss = tn.cross_entropy(t, labels)
    expect = -np.mean([tn.log_softmax(logits)[0, 1], tn.log_softmax(logits)[1, 2]])
    assert float(loss.data) == pytest.approx(expect)
    loss.backward()
    p = np.exp(tn.log_softmax(logits))
    p[[0, 1], labels] -= 1
    assert np.allclose(t.grad, p / 2)


@pytest.mark.parametrize("kind", ["mlp", "cell", "flat"])
def test_fresh_networks_pass_grad_check(kind):
    rng = np.random.default_rng(5)
    if kind == "mlp":
        net, x, y = mlp(hidden=(7, 6), n_in=5, n_out=3), rng.standard_normal((4, 5)), rng.standard_normal((4, 3))
        rep = tn.grad_check(net, lambda n: tn.mse(n.forward(x=x), y))
    else:
        b, y = denoiser_batch(rng), rng.standard_normal((2, 5, 3))
        rep = tn.grad_check(denoiser(kind), lambda n: tn.mse(n.forward(**b), y))
    assert rep.passed, rep.per_param


def test_grad_check_catches_a_broken_backward_rule(monkeypatch):
    def bad_tanh(a):
        return tn._make(np.tanh(a.data), (a,), lambda g: (g,))     # drops the 1 - tanh^2 factor
    monkeypatch.setitem(tn.ACTIVATIONS, "tanh", bad_tanh)
    rng = np.random.default_rng(6)
    x, y = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    rep = tn.grad_check(mlp(hidden=(5,)), lambda n: tn.mse(n.forward(x=x), y))
    assert not rep.passed


def test_grad_check_with_zero_inputs():
    net = mlp(hidden=(4,))
    rep = tn.grad_check(net, lambda n: tn.mse(n.forward(x=np.zeros((2, 3))), np.ones((2, 2))))
    assert rep.passed


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), kind=st.sampled_from(["mlp", "cell", "flat"]))
def test_random_networks_match_finite_differences(seed, kind):
    rng = np.random.default_rng(seed)
    if kind == "mlp":
        hidden = [int(h) for h in rng.integers(2, 7, size=int(rng.integers(1, 3)))]
        act = ["tanh", "silu", "sigmoid"][int(rng.integers(3))]
        net = mlp(hidden=hidden, n_in=4, n_out=3, act=act, seed=seed)
        x, y = rng.standard_normal((3, 4)), rng.standard_normal((3, 3))
        fn = lambda n: tn.mse(n.forward(x=x), y)
    else:
        net = denoiser(kind, seed=seed)
        b, y = denoiser_batch(rng), rng.standard_normal((2, 5, 3))
        fn = lambda n: tn.mse(n.forward(**b), y)
    assert tn.grad_check(net, fn, tolerance=1e-4).passed


# -- optimizer --------------------------------------------------------------

def test_zero_gradient_leaves_parameters_alone():
    net = mlp()
    before = net.get_flat().copy()
    tn.Adam().step(net.params, {k: np.zeros_like(p.data) for k, p in net.params.items()})
    assert np.array_equal(net.get_flat(), before)


def test_first_update_has_learning_rate_magnitude():
    net = mlp()
    before = {k: p.data.copy() for k, p in net.params.items()}
    grads = {k: np.full_like(p.data, 0.37) for k, p in net.params.items()}
    tn.Adam(lr=1e-3).step(net.params, grads)
    for k, p in net.params.items():
        # bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps)
        assert np.allclose(before[k] - p.data, 1e-3 * 0.37 / (0.37 + 1e-8), rtol=1e-12)


def test_non_finite_gradient_reports_the_step():
    net = mlp()
    opt = tn.Adam()
    grads = {k: np.zeros_like(p.data) for k, p in net.params.items()}
    opt.step(net.params, grads)
    grads["l0.w"][0, 0] = np.nan
    with pytest.raises(tn.TrainingError, match="step 2"):
        opt.step(net.params, grads)


def _train(seed):
    rng = np.random.default_rng(seed)
    net = mlp(hidden=(6,), seed=seed)
    opt = tn.Adam(lr=1e-2)
    x, y = rng.standard_normal((16, 3)), rng.standard_normal((16, 2))
    for _ in range(20):
        net.zero_grad()
        tn.mse(net.forward(x=x), y).backward()
        opt.step(net.params, net.grads())
    return net.get_flat()


def test_training_is_reproducible():
    assert np.array_equal(_train(7), _train(7))


def test_training_reduces_loss():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((32, 3))
    y = np.stack([x[:, 0] * x[:, 1], np.sin(x[:, 2])], 1)
    net, opt = mlp(hidden=(16,)), tn.Adam(lr=1e-2)
    first = None
    for _ in range(300):
        net.zero_grad()
        loss = tn.mse(net.forward(x=x), y)
        loss.backward()
        opt.step(net.params, net.grads())
        first = first if first is not None else float(loss.data)
    assert float(loss.data) < 0.3 * first


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = denoiser()
    b = denoiser_batch(np.random.default_rng(9))
    path = tmp_path / "net.ckpt"
    tn.save_file(net, path)
    back = tn.load_file(path)
    assert back.arch == net.arch
    assert np.array_equal(back.get_flat(), net.get_flat())
    assert np.array_equal(back.forward(**b).numpy(), net.forward(**b).numpy())


def test_truncated_checkpoint_is_an_error():
    blob = tn.save(mlp())
    for cut in (3, len(blob) // 2, len(blob) - 1):
        with pytest.raises(tn.CheckpointError):
            tn.load(blob[:cut])


def test_version_mismatch_is_an_error():
    blob = bytearray(tn.save(mlp()))
    blob[len(tn.CHECKPOINT_MAGIC)] = tn.CHECKPOINT_VERSION + 1
    with pytest.raises(tn.CheckpointError, match="version"):
        tn.load(bytes(blob))


def test_no_grad_skips_the_tape():
    net = mlp()
    with tn.no_grad():
        net.forward(x=np.ones((1, 3)))
    with pytest.raises(tn.UsageError):
        net.backward(np.ones((1, 2)))
