"""Entropy models for the latent (Gaussian conditional) and hyperlatent
(learned fully-factorized prior), plus their quantized coding tables."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .rans import TOTAL, EntropyTable
from .tensor import Parameter, ShapeError, Tensor, make_op

LIKELIHOOD_FLOOR = 2.0**-64
SCALE_MIN = 0.11
SCALE_MAX = 256.0
NUM_SCALES = 64
TAIL_MASS = 1e-9

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _normal_pdf(x: np.ndarray) -> np.ndarray:
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def quantize_pmf(pmf: np.ndarray, total: int = TOTAL) -> np.ndarray:
    """Integer frequencies summing to ``total`` with every entry >= 1.

    Entries whose share of ``total`` is below one get frequency 1; the rest
    of the budget is split proportionally by the largest-remainder method,
    ties broken by lower index.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.size
    if n > total:
        raise ValueError(f"{n} symbols cannot each receive a slot out of {total}")
    if not np.all(np.isfinite(pmf)) or np.any(pmf < 0) or pmf.sum() <= 0:
        raise ValueError("pmf must be finite, non-negative and not all zero")
    forced = np.zeros(n, dtype=bool)
    while True:
        budget = total - int(forced.sum())
        free = ~forced
        ideal = np.zeros(n)
        ideal[free] = budget * pmf[free] / pmf[free].sum()
        newly = free & (ideal < 1.0)
        if not newly.any():
            break
        forced |= newly
    freqs = np.where(forced, 1, np.floor(ideal)).astype(np.int64)
    leftover = total - int(freqs.sum())
    if leftover:
        rem = np.where(forced, -1.0, ideal - np.floor(ideal))
        order = np.argsort(-rem, kind="stable")
        freqs[order[:leftover]] += 1
    return freqs


def _table_from_pmf(offset: int, pmf: np.ndarray) -> EntropyTable:
    inside = float(pmf.sum())
    if not inside > 0.0:
        raise ValueError("degenerate pmf: all probability mass falls in the escape slot")
    escape = max(1.0 - inside, 0.0)
    return EntropyTable.from_frequencies(offset, quantize_pmf(np.append(pmf, escape)))


# Gaussian conditional -----------------------------------------------------------


class GaussianConditional:
    """Per-element Gaussian convolved with U(-1/2, 1/2)."""

    def __init__(self, scale_min: float = SCALE_MIN, scale_max: float = SCALE_MAX,
                 num_scales: int = NUM_SCALES, tail_mass: float = TAIL_MASS):
        table = np.exp(np.linspace(math.log(scale_min), math.log(scale_max), num_scales))
        table[0], table[-1] = scale_min, scale_max
        self.scale_table = table
        self.tail_mass = tail_mass
        self._tables: list[EntropyTable] | None = None

    def radius(self, scale: float) -> int:
        """Smallest r with mass outside [-r, r] at most ``tail_mass``."""
        r = math.ceil(-ndtri(self.tail_mass / 2.0) * scale - 0.5)
        return max(r, 0)

    def pmf(self, scale: float, radius: int | None = None) -> np.ndarray:
        r = self.radius(scale) if radius is None else radius
        v = np.abs(np.arange(-r, r + 1, dtype=np.float64))
        return ndtr((0.5 - v) / scale) - ndtr((-0.5 - v) / scale)

    def build_tables(self) -> list[EntropyTable]:
        if self._tables is None:
            self._tables = [
                _table_from_pmf(-self.radius(s), self.pmf(s)) for s in self.scale_table
            ]
        return self._tables

    def scale_indices(self, sigma: np.ndarray) -> np.ndarray:
        """Index of the smallest table scale >= sigma (last entry if none)."""
        idx = np.searchsorted(self.scale_table, sigma, side="left")
        return np.minimum(idx, len(self.scale_table) - 1)


def gaussian_likelihood(y_hat: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """P(y_hat) under N(mu, sigma^2) * U(-1/2, 1/2), floored at 2**-64."""
    if not (y_hat.shape == mu.shape == sigma.shape):
        raise ShapeError(f"gaussian_likelihood: shapes {y_hat.shape}, {mu.shape}, {sigma.shape} differ")
    sd = sigma.data
    if np.any(sd < SCALE_MIN):
        raise ValueError(f"sigma below the {SCALE_MIN} floor (min {sd.min():.6g}); clamp upstream")
    d = y_hat.data - mu.data
    v = np.abs(d)
    p = ndtr((0.5 - v) / sd) - ndtr((-0.5 - v) / sd)
    live = p > LIKELIHOOD_FLOOR
    out = np.where(live, p, LIKELIHOOD_FLOOR)

    def bwd(g):
        u = (d + 0.5) / sd
        lo = (d - 0.5) / sd
        pu, pl = _normal_pdf(u), _normal_pdf(lo)
        gd = np.where(live, g * (pu - pl) / sd, 0.0)
        gs = np.where(live, -g * (pu * u - pl * lo) / sd, 0.0)
        return gd, -gd, gs

    return make_op(out, (y_hat, mu, sigma), bwd)


# Factorized prior ---------------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


class FactorizedPrior:
    """Per-channel learned CDF built from K = 4 monotone stages.

    Stage k maps ``h -> softplus(H_k) @ h + b_k``, followed (except at the
    last stage) by ``h + tanh(a_k) * tanh(h)``.  The CDF is the sigmoid of
    the final scalar.  Widths are 1 -> 3 -> 3 -> 3 -> 1.
    """

    def __init__(self, channels: int, filters: Sequence[int] = (3, 3, 3), init_scale: float = 10.0,
                 tail_mass: float = TAIL_MASS, seed: int = 0, name: str = "prior"):
        self.channels = channels
        self.tail_mass = tail_mass
        self.name = name
        dims = (1, *filters, 1)
        rng = np.random.default_rng(seed)
        stage_scale = init_scale ** (1.0 / (len(filters) + 1))
        self.matrices: list[Parameter] = []
        self.biases: list[Parameter] = []
        self.factors: list[Parameter] = []
        for k in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / stage_scale / dims[k + 1]))
            self.matrices.append(
                Parameter(np.full((channels, dims[k + 1], dims[k]), init), f"{name}.matrix{k}")
            )
            self.biases.append(
                Parameter(rng.uniform(-0.5, 0.5, size=(channels, dims[k + 1], 1)), f"{name}.bias{k}")
            )
            if k < len(dims) - 2:
                self.factors.append(Parameter(np.zeros((channels, dims[k + 1], 1)), f"{name}.factor{k}"))
        self.quantiles = Parameter(np.zeros((channels, 1, 3)), f"{name}.quantiles")
        self.reset_quantiles()

    # parameters

    def network_parameters(self) -> list[Parameter]:
        return [*self.matrices, *self.biases, *self.factors]

    def parameters(self) -> list[Parameter]:
        return [*self.network_parameters(), self.quantiles]

    @property
    def target_logit(self) -> float:
        return math.log(2.0 / self.tail_mass - 1.0)

    # raw network evaluation on (N, 1, L) arrays

    def _forward(self, x: np.ndarray):
        cache = []
        h = x
        last = len(self.matrices) - 1
        for k, (m, b) in enumerate(zip(self.matrices, self.biases)):
            hm = _softplus(m.data)
            pre = hm @ h + b.data
            if k < last:
                a = np.tanh(self.factors[k].data)
                t = np.tanh(pre)
                cache.append((h, hm, pre, a, t))
                h = pre + a * t
            else:
                cache.append((h, hm, pre, None, None))
                h = pre
        return h, cache

    def _backward(self, cache, g: np.ndarray):
        """Gradients w.r.t. the input and every network parameter."""
        gm = [None] * len(self.matrices)
        gb = [None] * len(self.biases)
        gf = [None] * len(self.factors)
        for k in range(len(cache) - 1, -1, -1):
            h_in, hm, pre, a, t = cache[k]
            if a is not None:
                gf[k] = (g * t).sum(axis=2, keepdims=True) * (1.0 - a * a)
                g = g * (1.0 + a * (1.0 - t * t))
            gb[k] = g.sum(axis=2, keepdims=True)
            gm[k] = (g @ np.swapaxes(h_in, 1, 2)) * expit(self.matrices[k].data)
            g = np.swapaxes(hm, 1, 2) @ g
        return g, gm, gb, gf

    def logits(self, values: np.ndarray) -> np.ndarray:
        """CDF logits for an (N, 1, L) array."""
        return self._forward(values)[0]

    def cdf(self, values: np.ndarray) -> np.ndarray:
        return expit(self.logits(values))

    def reset_quantiles(self) -> None:
        """Place quantiles at the current network's tail and median points."""
        t = self.target_logit
        targets = np.array([-t, 0.0, t])
        q = np.empty((self.channels, 1, 3))
        for j, target in enumerate(targets):
            lo = np.full((self.channels, 1, 1), -1.0)
            hi = np.full((self.channels, 1, 1), 1.0)
            while np.any(self.logits(lo) > target):
                lo = np.where(self.logits(lo) > target, lo * 2.0, lo)
            while np.any(self.logits(hi) < target):
                hi = np.where(self.logits(hi) < target, hi * 2.0, hi)
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                above = self.logits(mid) > target
                hi = np.where(above, mid, hi)
                lo = np.where(above, lo, mid)
            q[:, :, j] = (0.5 * (lo + hi))[:, :, 0]
        self.quantiles.data[...] = q

    def symbol_range(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel integer support [lo, hi] spanned by the tail quantiles."""
        q = self.quantiles.data[:, 0, :]
        return np.floor(q[:, 0]).astype(np.int64), np.ceil(q[:, 2]).astype(np.int64)

    def pmf(self, channel: int, lo: int, hi: int) -> np.ndarray:
        v = np.arange(lo, hi + 1, dtype=np.float64)
        full = np.zeros((self.channels, 1, v.size))
        full[channel, 0] = v
        upper = self.logits(full + 0.5)[channel, 0]
        lower = self.logits(full - 0.5)[channel, 0]
        return _logit_interval(upper, lower)

    def build_tables(self) -> list[EntropyTable]:
        lo, hi = self.symbol_range()
        return [
            _table_from_pmf(int(lo[c]), self.pmf(c, int(lo[c]), int(hi[c]))) for c in range(self.channels)
        ]


def _logit_interval(upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """sigmoid(upper) - sigmoid(lower), evaluated on the side with less cancellation."""
    sign = -np.sign(upper + lower)
    sign[sign == 0] = 1.0
    return np.abs(expit(sign * upper) - expit(sign * lower))


def _to_channel_rows(x: np.ndarray) -> np.ndarray:
    b, n, h, w = x.shape
    return np.transpose(x, (1, 0, 2, 3)).reshape(n, 1, b * h * w)


def _from_channel_rows(x: np.ndarray, shape) -> np.ndarray:
    b, n, h, w = shape
    return np.transpose(x.reshape(n, b, h, w), (1, 0, 2, 3))


def factorized_likelihood(z_hat: Tensor, prior: FactorizedPrior) -> Tensor:
    """P(z_hat) = CDF_c(z + 1/2) - CDF_c(z - 1/2), floored at 2**-64."""
    if z_hat.ndim != 4 or z_hat.shape[1] != prior.channels:
        raise ShapeError(
            f"factorized_likelihood: input shape {z_hat.shape} does not have {prior.channels} channels"
        )
    shape = z_hat.shape
    rows = _to_channel_rows(z_hat.data)
    upper, cache_u = prior._forward(rows + 0.5)
    lower, cache_l = prior._forward(rows - 0.5)
    p = _logit_interval(upper, lower)
    live = p > LIKELIHOOD_FLOOR
    out = _from_channel_rows(np.where(live, p, LIKELIHOOD_FLOOR), shape)
    params = prior.network_parameters()
    nm, nb = len(prior.matrices), len(prior.biases)

    def bwd(g):
        g = np.where(live, _to_channel_rows(g), 0.0)
        su, sl = expit(upper), expit(lower)
        gx_u, gm_u, gb_u, gf_u = prior._backward(cache_u, g * su * (1.0 - su))
        gx_l, gm_l, gb_l, gf_l = prior._backward(cache_l, -g * sl * (1.0 - sl))
        gz = _from_channel_rows(gx_u + gx_l, shape)
        grads = [a + b for a, b in zip(gm_u + gb_u + gf_u, gm_l + gb_l + gf_l)]
        assert len(grads) == nm + nb + len(prior.factors)
        return (gz, *grads)

    return make_op(out, (z_hat, *params), bwd)


def aux_loss(prior: FactorizedPrior) -> Tensor:
    """Misplacement of the quantiles, measured in CDF-logit space.

    Sum over channels of |logit(q_left) + t| + |logit(q_median)| +
    |logit(q_right) - t| with t = log(2 / tail_mass - 1).  Only the
    quantiles receive gradient.
    """
    t = prior.target_logit
    target = np.array([-t, 0.0, t]).reshape(1, 1, 3)
    q = prior.quantiles.data
    logits, cache = prior._forward(q.reshape(prior.channels, 1, 3))
    diff = logits - target
    loss = np.abs(diff).sum()

    def bwd(g):
        gq, *_ = prior._backward(cache, float(np.asarray(g).reshape(-1)[0]) * np.sign(diff))
        return (gq,)

    return make_op(np.array(loss), (prior.quantiles,), bwd)
