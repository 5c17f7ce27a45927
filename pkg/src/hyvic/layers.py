"""Generalized divisive normalization (GDN) and its inverse."""

from __future__ import annotations

import numpy as np

from .gradcheck import check_gradients
from .tensor import Parameter, ShapeError, Tensor, add_scalar, make_op, mean, mul, no_record, square

BETA_MIN = 1e-6
# Off-diagonal gamma storage starts at sqrt(2**-36) instead of 0 so the squared
# parameterization still receives gradient there.
_GAMMA_SEED = 2.0**-18


class GDN:
    """Channel-coupled divisive normalization.

    ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij * x_j**2)``; the inverse layer
    multiplies by the same divisor instead.  ``beta`` and ``gamma`` are stored
    through square roots, so ``beta = b**2 + BETA_MIN >= BETA_MIN`` and
    ``gamma = g**2 >= 0`` hold after any update of ``b`` and ``g``.
    """

    def __init__(self, channels: int, inverse: bool = False, name: str = "gdn"):
        self.channels = channels
        self.inverse = inverse
        self.name = name
        self.beta_sqrt = Parameter(np.full(channels, np.sqrt(1.0 - BETA_MIN)), f"{name}.beta_sqrt")
        g = np.full((channels, channels), _GAMMA_SEED)
        np.fill_diagonal(g, np.sqrt(0.1))
        self.gamma_sqrt = Parameter(g, f"{name}.gamma_sqrt")

    def parameters(self) -> list[Parameter]:
        return [self.beta_sqrt, self.gamma_sqrt]

    def beta(self) -> Tensor:
        return add_scalar(square(self.beta_sqrt), BETA_MIN)

    def gamma(self) -> Tensor:
        return square(self.gamma_sqrt)

    def __call__(self, x: Tensor) -> Tensor:
        return gdn_forward(x, self.beta(), self.gamma(), self.inverse)


def gdn_forward(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool = False) -> Tensor:
    """GDN (or IGDN when ``inverse``) with effective ``beta`` and ``gamma``."""
    if x.ndim != 4:
        raise ShapeError(f"gdn: input must be rank 4, got shape {x.shape}")
    c = x.shape[1]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise ShapeError(
            f"gdn: input has {c} channels but layer has beta {beta.shape}, gamma {gamma.shape}"
        )
    xd, bd, gd = x.data, beta.data, gamma.data
    x2 = xd * xd
    d = np.sqrt(bd[None, :, None, None] + np.einsum("ij,bjhw->bihw", gd, x2))
    out = xd * d if inverse else xd / d

    def bwd(g):
        if inverse:
            # d(x_i d_i)/d(d_i^2) = x_i / (2 d_i)
            s = g * xd / (2.0 * d)
            gx_direct = g * d
        else:
            # d(x_i / d_i)/d(d_i^2) = -x_i / (2 d_i^3)
            s = -g * xd / (2.0 * d**3)
            gx_direct = g / d
        gx = gx_direct + 2.0 * xd * np.einsum("ij,bihw->bjhw", gd, s)
        gb = s.sum(axis=(0, 2, 3))
        gg = np.einsum("bihw,bjhw->ij", s, x2)
        return gx, gb, gg

    return make_op(out, (x, beta, gamma), bwd)


def gdn_gradcheck(layer: GDN, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error of analytic vs numeric gradients for x, beta, gamma.

    beta and gamma are checked as effective (post-reparameterization) values.
    """
    with no_record():
        beta = Tensor(layer.beta().data.copy())
        gamma = Tensor(layer.gamma().data.copy())
    weights = Tensor(np.random.default_rng(0).normal(size=x.shape))

    def loss():
        return mean(mul(gdn_forward(x, beta, gamma, layer.inverse), weights))

    return check_gradients(loss, [x, beta, gamma], h=h)
