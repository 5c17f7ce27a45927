"""HyVIC transforms: encoder, hyperencoder, hyperdecoder, decoder.

Data layout is (batch, channels, rows, cols).  The encoder's 1x1 convs
mix spectra per pixel; each of its S spatial stages halves rows and cols.
The hyperprior adds two more halvings, so inputs must be divisible by
2**(S + 2) for the full pipeline.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .entropy import SCALE_MIN, FactorizedPrior, GaussianConditional, factorized_likelihood, gaussian_likelihood
from .layers import GDN
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    channel_slice,
    clamp_min,
    conv2d,
    conv_transpose2d,
    exp,
    leaky_relu,
)

LEAKY_SLOPE = 0.01
CHANNEL_PAIRS = ((384, 230), (768, 460), (1024, 614), (1280, 768))
KERNEL_SIZES = (3, 5, 7)

CHECKPOINT_MAGIC = b"HVWT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HyvicConfig:
    """Architecture hyperparameters.

    C: spectral bands, N: feature / hyperlatent channels, M: latent
    channels, S: number of stride-2 spatial stages, k: spatial kernel size.
    """

    C: int
    N: int = 768
    M: int = 1280
    S: int = 2
    k: int = 3

    def __post_init__(self):
        for field_name in ("C", "N", "M"):
            if getattr(self, field_name) < 1:
                raise ConfigError(f"{field_name} must be positive, got {getattr(self, field_name)}")
        if self.M % 2:
            raise ConfigError(f"M must be even so that 3M/2 is an integer, got {self.M}")
        if not 0 <= self.S <= 4:
            raise ConfigError(f"S must lie in 0..4, got {self.S}")
        if self.k not in KERNEL_SIZES:
            raise ConfigError(f"k must be one of {KERNEL_SIZES}, got {self.k}")

    @classmethod
    def from_latent(cls, C: int, M: int, S: int = 2, k: int = 3) -> "HyvicConfig":
        """Config with the hyperlatent width tied to the latent: N = floor(3M/5)."""
        return cls(C=C, N=(3 * M) // 5, M=M, S=S, k=k)

    @property
    def divisor(self) -> int:
        return 2 ** (self.S + 2)

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        self.check_input(h, w)
        f = 2**self.S
        return self.M, h // f, w // f

    def hyperlatent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        self.check_input(h, w)
        f = self.divisor
        return self.N, h // f, w // f

    def check_input(self, h: int, w: int) -> None:
        if h % self.divisor or w % self.divisor or h < 1 or w < 1:
            raise ShapeError(
                f"input extent {h}x{w} must be divisible by 2**(S+2) = {self.divisor} for S = {self.S}"
            )


def parameter_shapes(cfg: HyvicConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map for every stored parameter."""
    C, N, M, S, k = cfg.C, cfg.N, cfg.M, cfg.S, cfg.k
    m3 = 3 * M // 2
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, out_ch, in_ch, ks):
        shapes[f"{name}.weight"] = (out_ch, in_ch, ks, ks)
        shapes[f"{name}.bias"] = (out_ch,)

    def deconv(name, in_ch, out_ch, ks):
        shapes[f"{name}.weight"] = (in_ch, out_ch, ks, ks)
        shapes[f"{name}.bias"] = (out_ch,)

    def gdn(name, ch):
        shapes[f"{name}.beta_sqrt"] = (ch,)
        shapes[f"{name}.gamma_sqrt"] = (ch, ch)

    conv("enc.conv_in", N, C, 1)
    gdn("enc.gdn_in", N)
    for i in range(S):
        conv(f"enc.stage{i}.conv", N, N, k)
        gdn(f"enc.stage{i}.gdn", N)
    conv("enc.conv_out", M, N, 1)

    conv("henc.conv_in", N, M, 1)
    conv("henc.down0", N, N, k)
    conv("henc.down1", N, N, k)

    deconv("hdec.up0", N, M, k)
    deconv("hdec.up1", M, m3, k)
    conv("hdec.conv_out", 2 * M, m3, 1)

    conv("dec.conv_in", N, M, 1)
    gdn("dec.igdn_in", N)
    for i in range(S):
        deconv(f"dec.stage{i}.deconv", N, N, k)
        gdn(f"dec.stage{i}.igdn", N)
    conv("dec.conv_out", C, N, 1)

    dims = (1, 3, 3, 3, 1)
    for j in range(4):
        shapes[f"prior.matrix{j}"] = (N, dims[j + 1], dims[j])
    for j in range(4):
        shapes[f"prior.bias{j}"] = (N, dims[j + 1], 1)
    for j in range(3):
        shapes[f"prior.factor{j}"] = (N, dims[j + 1], 1)
    shapes["prior.quantiles"] = (N, 1, 3)
    return shapes


def parameter_count(cfg: HyvicConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


class ModelParams:
    """All trainable state of one HyVIC model, keyed by unique names."""

    def __init__(self, config: HyvicConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        shapes = parameter_shapes(config)
        self.params: dict[str, Parameter] = {}
        self.gdn: dict[str, GDN] = {}
        for name, shape in shapes.items():
            if name.startswith("prior.") or name.endswith(("beta_sqrt", "gamma_sqrt")):
                continue
            if name.endswith(".weight"):
                ks = shape[2]
                # transposed-conv weights are (in, out, k, k)
                fan_in = (shape[0] if ".up" in name or ".deconv" in name else shape[1]) * ks * ks
                bound = 1.0 / np.sqrt(fan_in)
                self.params[name] = Parameter(rng.uniform(-bound, bound, size=shape), name)
                bias_name = name[: -len("weight")] + "bias"
                self.params[bias_name] = Parameter(
                    rng.uniform(-bound, bound, size=shapes[bias_name]), bias_name
                )
        for name, shape in shapes.items():
            if name.endswith(".beta_sqrt"):
                layer_name = name[: -len(".beta_sqrt")]
                layer = GDN(shape[0], inverse="igdn" in layer_name, name=layer_name)
                self.gdn[layer_name] = layer
                for p in layer.parameters():
                    self.params[p.name] = p
        self.prior = FactorizedPrior(config.N, seed=int(rng.integers(2**31)), name="prior")
        for p in self.prior.parameters():
            self.params[p.name] = p
        self.params = {name: self.params[name] for name in shapes}
        self.gaussian = GaussianConditional()

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def aux_parameters(self) -> list[Parameter]:
        return [self.prior.quantiles]

    def main_parameters(self) -> list[Parameter]:
        aux = {id(p) for p in self.aux_parameters()}
        return [p for p in self.params.values() if id(p) not in aux]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # checkpoint ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        c = self.config
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<H5I", CHECKPOINT_VERSION, c.C, c.N, c.M, c.S, c.k))
        for name, p in self.params.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", p.data.ndim))
            buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            buf.write(p.data.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        if data[:4] != CHECKPOINT_MAGIC:
            raise ValueError("not a HyVIC checkpoint (bad magic)")
        if len(data) < 26:
            raise ValueError("checkpoint truncated in header")
        version, C, N, M, S, k = struct.unpack_from("<H5I", data, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        model = cls(HyvicConfig(C=C, N=N, M=M, S=S, k=k))
        pos, seen = 26, set()
        try:
            while pos < len(data):
                (n,) = struct.unpack_from("<H", data, pos)
                name = data[pos + 2 : pos + 2 + n].decode("utf-8")
                pos += 2 + n
                (rank,) = struct.unpack_from("<B", data, pos)
                shape = struct.unpack_from(f"<{rank}I", data, pos + 1)
                pos += 1 + 4 * rank
                size = int(np.prod(shape)) if rank else 1
                if pos + 8 * size > len(data):
                    raise ValueError(f"checkpoint truncated inside {name!r}")
                values = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
                pos += 8 * size
                if name not in model.params or model.params[name].shape != tuple(shape):
                    raise ValueError(f"checkpoint entry {name!r} {tuple(shape)} does not match the architecture")
                model.params[name].data[...] = values
                seen.add(name)
        except struct.error as exc:
            raise ValueError(f"checkpoint truncated: {exc}") from exc
        missing = set(model.params) - seen
        if missing:
            raise ValueError(f"checkpoint lacks {len(missing)} parameters, e.g. {sorted(missing)[0]!r}")
        return model

    def save(self, path) -> bytes:
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        return data

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def digest(self) -> bytes:
        """SHA-256 of the serialized checkpoint."""
        return hashlib.sha256(self.to_bytes()).digest()


# transforms -------------------------------------------------------------------


def _conv(x: Tensor, params: ModelParams, name: str, stride: int = 1) -> Tensor:
    w = params[f"{name}.weight"]
    return conv2d(x, w, params[f"{name}.bias"], stride=stride, padding=w.shape[2] // 2)


def _deconv(x: Tensor, params: ModelParams, name: str) -> Tensor:
    w = params[f"{name}.weight"]
    return conv_transpose2d(
        x, w, params[f"{name}.bias"], stride=2, padding=w.shape[2] // 2, output_padding=1
    )


def _check_rank4(x: Tensor, channels: int, what: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{what}: expected a (B,C,H,W) tensor, got shape {x.shape}")
    if x.shape[1] != channels:
        raise ShapeError(f"{what}: expected {channels} channels, got {x.shape[1]}")


def encode(x: Tensor, params: ModelParams) -> Tensor:
    """Analysis transform X -> Y."""
    cfg = params.config
    _check_rank4(x, cfg.C, "encode")
    f = 2**cfg.S
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeError(f"encode: input extent {x.shape[2]}x{x.shape[3]} not divisible by 2**S = {f}")
    h = params.gdn["enc.gdn_in"](_conv(x, params, "enc.conv_in"))
    for i in range(cfg.S):
        h = params.gdn[f"enc.stage{i}.gdn"](_conv(h, params, f"enc.stage{i}.conv", stride=2))
    return _conv(h, params, "enc.conv_out")


def hyper_encode(y: Tensor, params: ModelParams) -> Tensor:
    """Y -> Z with two stride-2 reductions."""
    _check_rank4(y, params.config.M, "hyper_encode")
    if y.shape[2] % 4 or y.shape[3] % 4:
        raise ShapeError(f"hyper_encode: latent extent {y.shape[2]}x{y.shape[3]} not divisible by 4")
    h = leaky_relu(_conv(y, params, "henc.conv_in"), LEAKY_SLOPE)
    h = leaky_relu(_conv(h, params, "henc.down0", stride=2), LEAKY_SLOPE)
    return _conv(h, params, "henc.down1", stride=2)


def hyper_decode(z_hat: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Z_hat -> (mu, sigma), each with M channels on the latent grid."""
    M = params.config.M
    _check_rank4(z_hat, params.config.N, "hyper_decode")
    h = leaky_relu(_deconv(z_hat, params, "hdec.up0"), LEAKY_SLOPE)
    h = leaky_relu(_deconv(h, params, "hdec.up1"), LEAKY_SLOPE)
    h = _conv(h, params, "hdec.conv_out")
    mu = channel_slice(h, 0, M)
    sigma = clamp_min(exp(channel_slice(h, M, 2 * M)), SCALE_MIN)
    return mu, sigma


def decode(y_hat: Tensor, params: ModelParams) -> Tensor:
    """Synthesis transform Y_hat -> X_hat."""
    cfg = params.config
    _check_rank4(y_hat, cfg.M, "decode")
    h = params.gdn["dec.igdn_in"](_conv(y_hat, params, "dec.conv_in"))
    for i in range(cfg.S):
        h = params.gdn[f"dec.stage{i}.igdn"](_deconv(h, params, f"dec.stage{i}.deconv"))
    return _conv(h, params, "dec.conv_out")


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(
    y: Tensor,
    mode: str = "eval",
    offset: Tensor | np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Rounding (``eval``) or additive U(-1/2, 1/2) noise (``train``).

    In eval mode ``offset`` is removed before rounding and added back.
    """
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode quantization needs a random generator")
        return add(y, Tensor(rng.uniform(-0.5, 0.5, size=y.shape)))
    if mode != "eval":
        raise ValueError(f"unknown quantization mode {mode!r}")
    if offset is None:
        return Tensor(round_half_away(y.data))
    o = offset.data if isinstance(offset, Tensor) else np.asarray(offset, dtype=np.float64)
    if o.shape != y.shape:
        raise ShapeError(f"quantize: offset shape {o.shape} differs from input {y.shape}")
    return Tensor(round_half_away(y.data - o) + o)


def forward(
    x: Tensor,
    params: ModelParams,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    mean_removed: bool = True,
) -> dict[str, Tensor]:
    """Full pipeline with likelihoods; returns named intermediates in order."""
    out: dict[str, Tensor] = {"x": x}
    out["y"] = encode(x, params)
    out["z"] = hyper_encode(out["y"], params)
    out["z_hat"] = quantize(out["z"], mode, rng=rng)
    out["mu"], out["sigma"] = hyper_decode(out["z_hat"], params)
    if mode == "train":
        out["y_hat"] = quantize(out["y"], "train", rng=rng)
    else:
        out["y_hat"] = quantize(out["y"], "eval", offset=out["mu"] if mean_removed else None)
    out["x_hat"] = decode(out["y_hat"], params)
    out["p_y"] = gaussian_likelihood(out["y_hat"], out["mu"], out["sigma"])
    out["p_z"] = factorized_likelihood(out["z_hat"], params.prior)
    return out


def first_nonfinite(tensors: dict[str, Tensor] | Iterable[tuple[str, Tensor]]) -> str | None:
    items = tensors.items() if isinstance(tensors, dict) else tensors
    for name, t in items:
        if not np.all(np.isfinite(t.data)):
            return name
    return None
