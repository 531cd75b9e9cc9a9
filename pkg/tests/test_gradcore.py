from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ce_mean, fd_input_grad, fd_param_grads, mininet_logits, rel_err
from robust_transfer.gradcore import (Batch, BlockSpec, Network, NetworkSpec, checkpoint_bytes, forward,
                                      grad_input, grad_params, init_network, load_checkpoint, loss_and_grads,
                                      loss_ce, minimal_spec, param_shapes, save_checkpoint)


def zero_net(spec):
    return Network(spec, {k: np.zeros(s) for k, s in param_shapes(spec).items()})


def identity_net(d, num_labels, num_blocks=1):
    """stem = I, identity blocks, head = I: logits equal relu(x)."""
    net = zero_net(minimal_spec((d,), num_blocks, d, num_labels))
    net.params["stem.weight"] = np.eye(d)
    net.params["head.weight"] = np.eye(num_labels, d)
    return net


def small_net(kind, seed=0, blocks=2):
    shape = (2, 4, 4) if kind == "conv" else (6,)
    net = init_network(minimal_spec(shape, blocks, 3, 3, kind), seed)
    rng = np.random.default_rng(seed + 100)
    for name in net.params:
        # nonzero biases exercise every term of the backward pass
        if name.endswith(".bias"):
            net.params[name] = rng.normal(0, 0.1, net.params[name].shape)
    x = rng.random((4,) + shape)
    y = rng.integers(0, 3, size=4)
    return net, x, y


# forward ---------------------------------------------------------------------

def test_zero_parameters_give_zero_logits():
    net = zero_net(minimal_spec((1, 5, 5), 2, 4, 3, "conv"))
    logits, _ = forward(net, np.random.default_rng(0).random((3, 1, 5, 5)))
    assert np.array_equal(logits, np.zeros((3, 3)))


def test_identity_layer_maps_basis_vector_to_itself():
    net = identity_net(4, 4)
    logits, pen = forward(net, np.eye(4)[:1])
    assert np.array_equal(logits, np.eye(4)[:1])
    assert np.array_equal(pen, np.eye(4)[:1])


@pytest.mark.parametrize("kind", ["dense", "conv"])
def test_forward_matches_straight_line_recomputation(kind):
    net, x, _ = small_net(kind, seed=3)
    logits, pen = forward(net, x)
    want_logits, want_pen = mininet_logits(net.params, x, net.spec.input_shape, kind, net.spec.num_blocks)
    assert rel_err(logits, want_logits) < 1e-12
    assert rel_err(pen, want_pen) < 1e-12


def test_shape_mismatch_names_the_stem_layer():
    net = init_network(minimal_spec((6,), 1, 3, 3), 0)
    with pytest.raises(ValueError, match="stem"):
        forward(net, np.zeros((2, 5)))


def test_zero_branch_block_is_identity():
    spec = minimal_spec((1, 4, 4), 3, 2, 3, "conv")
    net = init_network(spec, 1)
    one_block = Network(minimal_spec((1, 4, 4), 1, 2, 3, "conv"),
                        {k: v for k, v in net.params.items() if not k.startswith(("block2", "block3"))})
    for i in (2, 3):
        for name in [n for n in net.params if n.startswith(f"block{i}.")]:
            net.params[name] = np.zeros_like(net.params[name])
    x = np.random.default_rng(2).random((3, 1, 4, 4))
    assert np.array_equal(forward(net, x)[0], forward(one_block, x)[0])


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec((4,), (), 3)
    with pytest.raises(ValueError):
        NetworkSpec((4,), (BlockSpec("dense", 3),), 1)
    with pytest.raises(ValueError, match="block2"):
        NetworkSpec((4,), (BlockSpec("dense", 3), BlockSpec("dense", 5)), 3)
    with pytest.raises(ValueError):
        NetworkSpec((4,), (BlockSpec("conv", 3),), 3)
    spec = minimal_spec((1, 8, 8), 3, 5, 7, "conv")
    assert NetworkSpec.from_string(spec.to_string()) == spec


# loss -----------------------------------------------------------------------

def test_uniform_logits_give_log_c():
    assert loss_ce(np.zeros((5, 7)), np.arange(5)) == pytest.approx(math.log(7), abs=1e-15)


def test_saturated_correct_logits_give_zero_loss():
    logits = np.eye(4) * 1e6
    assert loss_ce(logits, np.arange(4)) == pytest.approx(0.0, abs=1e-12)


def test_loss_matches_direct_summation():
    logits = np.random.default_rng(0).normal(size=(3, 4))
    labels = np.array([0, 3, 1])
    direct = -np.mean([logits[i, labels[i]] - np.log(np.exp(logits[i]).sum()) for i in range(3)])
    assert loss_ce(logits, labels) == pytest.approx(direct, rel=1e-14)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        loss_ce(np.zeros((2, 3)), np.array([0, 3]))


# gradients ------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["dense", "conv"])
def test_param_grads_match_finite_differences(kind):
    net, x, y = small_net(kind)
    got = grad_params(net, Batch(x, y))
    params = {k: v.copy() for k, v in net.params.items()}

    def loss(p):
        return ce_mean(mininet_logits(p, x, net.spec.input_shape, kind, net.spec.num_blocks)[0], y)

    want = fd_param_grads(loss, params)
    for name in net.params:
        assert rel_err(got[name], want[name]) < 1e-4, name


@pytest.mark.parametrize("kind", ["dense", "conv"])
def test_input_grad_matches_finite_differences(kind):
    net, x, y = small_net(kind, seed=5)
    got = grad_input(net, Batch(x, y))
    want = fd_input_grad(lambda v: ce_mean(forward(net, v)[0], y), x)
    assert rel_err(got, want) < 1e-4


def test_saturated_predictions_have_vanishing_gradients():
    net = identity_net(3, 3)
    net.params["head.weight"] *= 1e3
    x = np.eye(3)
    grads = grad_params(net, Batch(x, np.arange(3)))
    assert max(np.abs(g).max() for g in grads.values()) < 1e-8


def test_linear_softmax_gradient_closed_form():
    # positive inputs pass the identity stem untouched, so the head sees x
    rng = np.random.default_rng(4)
    x = rng.uniform(0.1, 1.0, size=(4, 3))
    y = np.array([0, 1, 2, 1])
    net = identity_net(3, 3)
    net.params["head.weight"] = rng.normal(size=(3, 3))
    logits = x @ net.params["head.weight"].T
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    resid = p - np.eye(3)[y]
    grads = grad_params(net, Batch(x, y))
    assert rel_err(grads["head.weight"], resid.T @ x / 4) < 1e-12
    assert rel_err(grads["head.bias"], resid.mean(axis=0)) < 1e-12
    assert rel_err(grad_input(net, Batch(x, y)), resid @ net.params["head.weight"] / 4) < 1e-12


def test_constant_network_has_zero_input_gradient():
    net = init_network(minimal_spec((5,), 2, 4, 3), 0)
    net.params["head.weight"] = np.zeros_like(net.params["head.weight"])
    g = grad_input(net, Batch(np.random.default_rng(0).random((3, 5)), np.array([0, 1, 2])))
    assert np.array_equal(g, np.zeros((3, 5)))


def test_partial_gradients_are_bit_identical():
    net, x, y = small_net("dense", blocks=3)
    full = loss_and_grads(net, x, y)[1]
    subset = ["block3.fc1.weight", "head.weight"]
    part = loss_and_grads(net, x, y, params=subset)[1]
    assert set(part) == set(subset)
    for name in subset:
        assert np.array_equal(part[name], full[name])


# properties -----------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["dense", "conv"]))
def test_outputs_are_deterministic_and_finite(seed, kind):
    net, x, y = small_net(kind, seed)
    a = loss_and_grads(net, x, y, inputs=True)
    b = loss_and_grads(net.copy(), x.copy(), y.copy(), inputs=True)
    assert a[0] == b[0]
    assert all(np.array_equal(a[1][k], b[1][k]) for k in a[1])
    assert np.array_equal(a[2], b[2])
    assert np.isfinite(a[0]) and all(np.isfinite(g).all() for g in a[1].values())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["dense", "conv"]))
def test_row_permutation_equivariance(seed, kind):
    net, x, y = small_net(kind, seed)
    perm = np.random.default_rng(seed).permutation(len(y))
    logits, _ = forward(net, x)
    logits_p, _ = forward(net, x[perm])
    assert np.allclose(logits_p, logits[perm], rtol=0, atol=1e-13)
    assert loss_ce(logits_p, y[perm]) == pytest.approx(loss_ce(logits, y), rel=1e-13)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["dense", "conv"]))
def test_checkpoint_round_trip_is_bit_exact(seed, kind, tmp_path_factory):
    net, _, _ = small_net(kind, seed)
    path = tmp_path_factory.mktemp("ckpt") / "net.ckpt"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.spec == net.spec
    assert checkpoint_bytes(back) == checkpoint_bytes(net)
    assert all(np.array_equal(back.params[k], net.params[k]) for k in net.params)


def test_checkpoint_header_and_corruption(tmp_path):
    net, _, _ = small_net("dense")
    raw = checkpoint_bytes(net)
    assert raw.startswith(b"MININET v1 input=6;blocks=dense:3,dense:3;labels=3\nstem.weight 3x6\n")
    (tmp_path / "short.ckpt").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE\n")
    with pytest.raises(ValueError, match="not a MiniNet"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_init_is_seeded():
    spec = minimal_spec((1, 4, 4), 2, 3, 3, "conv")
    a, b, c = init_network(spec, 1), init_network(spec, 1), init_network(spec, 2)
    assert checkpoint_bytes(a) == checkpoint_bytes(b) != checkpoint_bytes(c)
