"""Compress/decompress pipelines and the HVIC bitstream container.

HVIC layout (little-endian)::

    magic  b"HVIC"
    u16    version (1)
    u8     bit depth N_b
    u32    C, H, W
    u32    S, M, N, k
    32 B   SHA-256 of the checkpoint the stream was made with
    u64    hyperlatent payload length in bytes
    u64    latent payload length in bytes
    ...    hyperlatent rANS payload, then latent rANS payload
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from .model import HyvicConfig, ModelParams, decode, encode, hyper_decode, hyper_encode, round_half_away
from .rans import CorruptStreamError, EntropyTable, ideal_code_length, rans_decode, rans_encode
from .tensor import ShapeError, Tensor, no_record

HVIC_MAGIC = b"HVIC"
HVIC_VERSION = 1
_HEADER = struct.Struct("<4sHB3I4I32sQQ")
HEADER_BYTES = _HEADER.size


class BitstreamError(ValueError):
    """Malformed or truncated container."""


class HashMismatchError(ValueError):
    """The stream was produced with different model weights."""


@dataclass(frozen=True)
class Bitstream:
    bit_depth: int
    C: int
    H: int
    W: int
    S: int
    M: int
    N: int
    k: int
    checkpoint_hash: bytes
    hyper_payload: bytes
    latent_payload: bytes
    version: int = HVIC_VERSION

    def __post_init__(self):
        if len(self.checkpoint_hash) != 32:
            raise BitstreamError("checkpoint hash must be 32 bytes")
        if not 1 <= self.bit_depth <= 255:
            raise BitstreamError(f"bit depth {self.bit_depth} does not fit in a u8")

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            HVIC_MAGIC, self.version, self.bit_depth, self.C, self.H, self.W,
            self.S, self.M, self.N, self.k, self.checkpoint_hash,
            len(self.hyper_payload), len(self.latent_payload),
        )
        return header + self.hyper_payload + self.latent_payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < HEADER_BYTES:
            raise BitstreamError(f"truncated header: {len(data)} of {HEADER_BYTES} bytes")
        magic, version, nb, C, H, W, S, M, N, k, digest, lz, ly = _HEADER.unpack_from(data)
        if magic != HVIC_MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != HVIC_VERSION:
            raise BitstreamError(f"unsupported HVIC version {version}")
        if len(data) != HEADER_BYTES + lz + ly:
            raise BitstreamError(
                f"payload length mismatch: header announces {HEADER_BYTES + lz + ly} bytes, file has {len(data)}"
            )
        hyper = data[HEADER_BYTES : HEADER_BYTES + lz]
        latent = data[HEADER_BYTES + lz :]
        return cls(nb, C, H, W, S, M, N, k, digest, hyper, latent, version)

    @property
    def config(self) -> HyvicConfig:
        return HyvicConfig(C=self.C, N=self.N, M=self.M, S=self.S, k=self.k)

    @property
    def total_bits(self) -> int:
        return 8 * (HEADER_BYTES + len(self.hyper_payload) + len(self.latent_payload))

    @property
    def payload_bits(self) -> int:
        return 8 * (len(self.hyper_payload) + len(self.latent_payload))


def compression_ratio(b: Bitstream) -> float:
    """N_b * H * W * C over the total file size in bits."""
    return metrics.compression_ratio(b.bit_depth, b.C, b.H, b.W, b.total_bits)


def _as_cube(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ShapeError(f"expected a single cube (C,H,W) or (1,C,H,W), got {arr.shape}")
    return arr.astype(np.float64, copy=False)


class _Tables:
    """Per-model entropy tables, built once and reused."""

    def __init__(self, params: ModelParams):
        self.hyper: list[EntropyTable] = params.prior.build_tables()
        self.gauss: list[EntropyTable] = params.gaussian.build_tables()


_TABLE_CACHE: dict[bytes, _Tables] = {}


def _tables(params: ModelParams, digest: bytes) -> _Tables:
    if digest not in _TABLE_CACHE:
        if len(_TABLE_CACHE) > 8:
            _TABLE_CACHE.clear()
        _TABLE_CACHE[digest] = _Tables(params)
    return _TABLE_CACHE[digest]


def _hyper_indices(shape: tuple[int, ...]) -> np.ndarray:
    _, n, h, w = shape
    return np.repeat(np.arange(n), h * w)


@dataclass
class Latents:
    """Everything the encoder computes on the way to the payloads."""

    y: np.ndarray
    z_symbols: np.ndarray  # integer-valued, (1, N, h, w)
    mu: np.ndarray
    sigma: np.ndarray
    y_symbols: np.ndarray  # round(y - mu)
    scale_idx: np.ndarray

    @property
    def y_hat(self) -> np.ndarray:
        return self.y_symbols + self.mu


def analyze(x, params: ModelParams) -> Latents:
    """Run the analysis side: quantized hyperlatents, means/scales, latent symbols."""
    cube = _as_cube(x)
    cfg = params.config
    if cube.shape[1] != cfg.C:
        raise ShapeError(f"cube has {cube.shape[1]} bands, model expects {cfg.C}")
    cfg.check_input(cube.shape[2], cube.shape[3])
    with no_record():
        y = encode(Tensor(cube), params).data
        z = hyper_encode(Tensor(y), params).data
        z_sym = round_half_away(z)
        mu, sigma = (t.data for t in hyper_decode(Tensor(z_sym), params))
    y_sym = round_half_away(y - mu)
    return Latents(y, z_sym, mu, sigma, y_sym, params.gaussian.scale_indices(sigma))


def table_bits(lat: Latents, params: ModelParams) -> float:
    """Sum of -log2 p over both latents under the quantized coding tables."""
    t = _tables(params, params.digest())
    bz = ideal_code_length(lat.z_symbols.astype(np.int64).ravel(), _hyper_indices(lat.z_symbols.shape), t.hyper)
    by = ideal_code_length(lat.y_symbols.astype(np.int64).ravel(), lat.scale_idx.ravel(), t.gauss)
    return bz + by


def compress(x, params: ModelParams, bit_depth: int = 16, return_latents: bool = False):
    """Encode one cube; returns a :class:`Bitstream` (and the latents if asked)."""
    digest = params.digest()
    lat = analyze(x, params)
    t = _tables(params, digest)
    hyper = rans_encode(
        lat.z_symbols.astype(np.int64).ravel().tolist(), _hyper_indices(lat.z_symbols.shape), t.hyper
    )
    latent = rans_encode(lat.y_symbols.astype(np.int64).ravel().tolist(), lat.scale_idx.ravel(), t.gauss)
    cfg = params.config
    _, _, H, W = _as_cube(x).shape
    b = Bitstream(bit_depth, cfg.C, H, W, cfg.S, cfg.M, cfg.N, cfg.k, digest, hyper, latent)
    return (b, lat) if return_latents else b


def decompress(b: Bitstream | bytes, params: ModelParams, return_latents: bool = False):
    """Decode a stream to a (1, C, H, W) cube in [0, 1]-normalized units."""
    if isinstance(b, (bytes, bytearray)):
        b = Bitstream.from_bytes(bytes(b))
    digest = params.digest()
    if b.checkpoint_hash != digest:
        raise HashMismatchError(
            f"stream made with checkpoint {b.checkpoint_hash.hex()[:16]}..., loaded {digest.hex()[:16]}..."
        )
    cfg = params.config
    if b.config != cfg:
        raise HashMismatchError("stream architecture differs from the loaded model")
    cfg.check_input(b.H, b.W)
    t = _tables(params, digest)
    zshape = (1,) + cfg.hyperlatent_shape(b.H, b.W)
    yshape = (1,) + cfg.latent_shape(b.H, b.W)
    z_idx = _hyper_indices(zshape)
    z_sym = np.array(rans_decode(b.hyper_payload, z_idx.size, z_idx, t.hyper), dtype=np.float64).reshape(zshape)
    with no_record():
        mu, sigma = (v.data for v in hyper_decode(Tensor(z_sym), params))
        scale_idx = params.gaussian.scale_indices(sigma)
        y_sym = np.array(
            rans_decode(b.latent_payload, scale_idx.size, scale_idx.ravel(), t.gauss), dtype=np.float64
        ).reshape(yshape)
        y_hat = y_sym + mu
        x_hat = decode(Tensor(y_hat), params).data
    if x_hat.shape != (1, b.C, b.H, b.W):
        raise BitstreamError(f"decoded shape {x_hat.shape} disagrees with header")
    if return_latents:
        return x_hat, Latents(np.full(yshape, np.nan), z_sym, mu, sigma, y_sym, scale_idx)
    return x_hat


def reconstruct_unquantized(x, params: ModelParams) -> np.ndarray:
    """Debug path: decode(encode(x)) with quantization and coding removed."""
    with no_record():
        return decode(encode(Tensor(_as_cube(x)), params), params).data


def write_bitstream(path: str | os.PathLike, b: Bitstream) -> None:
    Path(path).write_bytes(b.to_bytes())


def read_bitstream(path: str | os.PathLike) -> Bitstream:
    return Bitstream.from_bytes(Path(path).read_bytes())


def sha256_file(path: str | os.PathLike) -> bytes:
    return hashlib.sha256(Path(path).read_bytes()).digest()


__all__ = [
    "Bitstream", "BitstreamError", "CorruptStreamError", "HashMismatchError", "HEADER_BYTES", "Latents",
    "analyze", "compress", "compression_ratio", "decompress", "read_bitstream", "reconstruct_unquantized",
    "table_bits", "write_bitstream",
]
