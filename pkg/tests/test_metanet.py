import numpy as np
import pytest

from revar import metanet as mn
from revar import nets
from revar.numkit import make_rng

from conftest import fd_grad, rel_err


def test_zero_last_layer_gives_half(rng):
    meta = mn.init_metanet(5, rng)
    w = mn.weights(meta, rng.standard_normal((10, 5)))
    assert np.all(w == 0.5)


def test_weights_in_open_interval(rng):
    meta = mn.init_metanet(4, rng, zero_last=False)
    meta = meta.with_params(meta.params * 50)
    w = mn.weights(meta, rng.standard_normal((500, 4)) * 100)
    assert np.all(w > 0) and np.all(w < 1)


def test_identical_inputs_identical_weights(rng):
    meta = mn.init_metanet(3, rng, zero_last=False)
    x = rng.standard_normal(3)
    assert mn.weight_of(meta, x) == mn.weight_of(meta, x.copy())


def test_dimension_mismatch(rng):
    meta = mn.init_metanet(3, rng)
    with pytest.raises(ValueError):
        mn.weight_of(meta, np.zeros(4))


@pytest.mark.parametrize("seed", range(25))
def test_grad_weight_matches_finite_differences(seed):
    r = make_rng(100 + seed)
    cond = "loss_scalar" if seed % 5 == 0 else "instance"
    meta = mn.init_metanet(3, r, hidden=(4, 3), conditioning=cond, zero_last=False)
    meta = meta.with_params(meta.params + 0.3 * r.standard_normal(meta.params.size))
    x = np.abs(r.standard_normal(1)) if cond == "loss_scalar" else r.standard_normal(3)
    numeric = fd_grad(lambda p: mn.weight_of(meta.with_params(p), x), meta.params)
    assert rel_err(mn.grad_weight(meta, x), numeric) <= 1e-5


def test_saturated_head_has_tiny_gradient(rng):
    meta = mn.init_metanet(2, rng, hidden=(3,))
    for bias in (20.0, -20.0):
        p = meta.params.copy()
        p[-1] = bias
        sat = meta.with_params(p)
        assert np.linalg.norm(mn.grad_weight(sat, rng.standard_normal(2))) <= 1e-6


def test_zero_input_zero_first_layer_gradient(rng):
    meta = mn.init_metanet(3, rng, hidden=(4,), zero_last=False)
    g = mn.grad_weight(meta, np.zeros(3))
    assert np.all(g[: 3 * 4] == 0.0)


def test_weights_vjp_is_weighted_sum(rng):
    meta = mn.init_metanet(3, rng, hidden=(5,), zero_last=False)
    X = rng.standard_normal((6, 3))
    a = rng.standard_normal(6)
    ref = sum(a[i] * mn.grad_weight(meta, X[i]) for i in range(6))
    np.testing.assert_allclose(mn.weights_vjp(meta, X, a), ref, atol=1e-14)


def test_loss_conditioned_needs_scalar_input(rng):
    net = nets.init_net((2, 3, 1), rng, "sigmoid")
    with pytest.raises(ValueError):
        mn.MetaNet(net, "loss_scalar")
