import numpy as np
import pytest

from hyvic.layers import BETA_MIN, GDN, gdn_forward, gdn_gradcheck
from hyvic.tensor import ShapeError, Tape, Tensor, backward, mean, mul, no_record, square


def direct_gdn(x, beta, gamma, inverse=False):
    """Per-pixel loop over the normalization formula."""
    out = np.empty_like(x)
    B, C, H, W = x.shape
    for b in range(B):
        for i in range(H):
            for j in range(W):
                v = x[b, :, i, j]
                d = np.sqrt(beta + gamma @ (v * v))
                out[b, :, i, j] = v * d if inverse else v / d
    return out


def test_matches_direct_formula():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4, 5))
    beta = rng.uniform(0.5, 2.0, 3)
    gamma = rng.uniform(0.0, 0.5, (3, 3))
    for inverse in (False, True):
        out = gdn_forward(Tensor(x), Tensor(beta), Tensor(gamma), inverse).data
        np.testing.assert_allclose(out, direct_gdn(x, beta, gamma, inverse), rtol=1e-13)


def test_unit_beta_zero_gamma_is_identity():
    x = np.random.default_rng(1).normal(size=(1, 4, 3, 3))
    out = gdn_forward(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros((4, 4))))
    np.testing.assert_array_equal(out.data, x)


def test_floor_beta_single_channel():
    out = gdn_forward(Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor([BETA_MIN]), Tensor([[1.0]]))
    assert out.item() == pytest.approx(3.0 / np.sqrt(1e-6 + 9.0), rel=1e-15)
    assert out.item() == pytest.approx(1.0, abs=1e-7)


def test_identical_divisor_round_trip():
    rng = np.random.default_rng(2)
    beta = rng.uniform(0.5, 2.0, 5)
    gamma = rng.uniform(0.0, 0.5, (5, 5))
    x = rng.normal(scale=3.0, size=(2, 5, 4, 4))
    y = gdn_forward(Tensor(x), Tensor(beta), Tensor(gamma)).data
    d = np.sqrt(beta[None, :, None, None] + np.einsum("ij,bjhw->bihw", gamma, x * x))
    np.testing.assert_allclose(y * d, x, rtol=0, atol=1e-10)


def test_canonical_igdn_is_approximate_inverse():
    # IGDN recomputes the divisor from its own input, so the round trip is
    # exact only as the coupling vanishes
    rng = np.random.default_rng(3)
    beta = np.ones(4)
    x = rng.normal(size=(1, 4, 3, 3))
    errs = []
    for g in (1e-2, 1e-4, 0.0):
        gamma = np.full((4, 4), g)
        y = gdn_forward(Tensor(x), Tensor(beta), Tensor(gamma))
        back = gdn_forward(y, Tensor(beta), Tensor(gamma), inverse=True).data
        errs.append(np.max(np.abs(back - x)))
    assert errs[0] > errs[1] > errs[2] and errs[2] == 0.0


def test_output_bounded_by_beta_floor():
    rng = np.random.default_rng(3)
    layer = GDN(3)
    layer.beta_sqrt.data[:] = 0.0
    layer.gamma_sqrt.data[:] = rng.uniform(0.0, 1.0, (3, 3))
    x = rng.normal(size=(1, 3, 6, 6))
    out = layer(Tensor(x)).data
    assert np.all(np.abs(out) <= np.abs(x) / np.sqrt(BETA_MIN))


def test_initialization_near_identity():
    layer = GDN(4)
    np.testing.assert_allclose(layer.beta().data, 1.0, rtol=1e-15)
    g = layer.gamma().data
    np.testing.assert_allclose(np.diag(g), 0.1, rtol=1e-15)
    assert np.all(g[~np.eye(4, dtype=bool)] < 1e-10)


def test_constraints_hold_after_large_steps():
    rng = np.random.default_rng(4)
    layer = GDN(3)
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    for _ in range(5):
        with Tape() as tape:
            loss = mean(square(layer(x)))
        backward(loss, tape)
        for p in layer.parameters():
            p.data -= 50.0 * p.grad
            p.grad = None
        assert np.all(layer.beta().data >= BETA_MIN)
        assert np.all(layer.gamma().data >= 0.0)


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        GDN(3)(Tensor(np.zeros((1, 4, 2, 2))))


@pytest.mark.parametrize("inverse", [False, True])
def test_gradcheck_random_input(inverse):
    rng = np.random.default_rng(5)
    layer = GDN(2, inverse=inverse)
    layer.gamma_sqrt.data[:] = rng.uniform(0.1, 0.6, (2, 2))
    assert gdn_gradcheck(layer, Tensor(rng.normal(size=(1, 2, 3, 3)))) < 1e-4


def test_gradcheck_zero_input():
    layer = GDN(3)
    x = Tensor(np.zeros((1, 3, 2, 2)))
    assert gdn_gradcheck(layer, x) < 1e-4
    # at x = 0 the Jacobian is diagonal with entries 1/sqrt(beta)
    x.requires_grad = True
    x.grad = None
    w = np.random.default_rng(6).normal(size=x.shape)
    with Tape() as tape:
        loss = mean(mul(layer(x), Tensor(w)))
    backward(loss, tape)
    beta = layer.beta().data
    np.testing.assert_allclose(x.grad, w / x.data.size / np.sqrt(beta)[None, :, None, None], rtol=1e-12)


def test_gradients_reach_stored_parameters():
    rng = np.random.default_rng(7)
    layer = GDN(3)
    x = Tensor(rng.normal(size=(1, 3, 4, 4)))
    with Tape() as tape:
        loss = mean(square(layer(x)))
    backward(loss, tape)
    assert layer.beta_sqrt.grad is not None and np.all(np.isfinite(layer.beta_sqrt.grad))
    off = layer.gamma_sqrt.grad[~np.eye(3, dtype=bool)]
    assert np.all(off != 0.0)
