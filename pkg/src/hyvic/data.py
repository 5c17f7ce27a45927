"""HSIC cube files, synthetic cubes, cropping and dataset splits.

HSIC layout (little-endian)::

    magic  b"HSIC"
    u16    version (1)
    u8     bit depth N_b
    u8     flags (bit 0: payload is f32 reflectance instead of u16 raw)
    u32    C, H, W
    ...    C*H*W samples, band-sequential
    u32    metadata length, followed by that many bytes of UTF-8 JSON
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

HSIC_MAGIC = b"HSIC"
HSIC_VERSION = 1
FLAG_REFLECTANCE = 1
_HEADER = struct.Struct("<4sHBB3I")


class CubeFormatError(ValueError):
    pass


@dataclass
class CubeFile:
    """One hyperspectral cube: raw integer counts or float reflectance."""

    samples: np.ndarray  # (C, H, W); uint16 raw or float32 reflectance
    bit_depth: int = 16
    metadata: dict | None = None

    def __post_init__(self):
        if self.samples.ndim != 3:
            raise CubeFormatError(f"cube must be (C,H,W), got shape {self.samples.shape}")
        if not 1 <= self.bit_depth <= 16:
            raise CubeFormatError(f"bit depth must be in 1..16, got {self.bit_depth}")
        if self.is_raw and int(self.samples.max(initial=0)) >= 2**self.bit_depth:
            raise CubeFormatError(f"raw samples exceed the {self.bit_depth}-bit range")

    @property
    def is_raw(self) -> bool:
        return self.samples.dtype == np.uint16

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.samples.shape

    def normalized(self) -> np.ndarray:
        """float64 (C,H,W) in [0, 1]."""
        if self.is_raw:
            return self.samples.astype(np.float64) / (2**self.bit_depth - 1)
        return np.clip(self.samples.astype(np.float64), 0.0, 1.0)

    def to_bytes(self) -> bytes:
        c, h, w = self.samples.shape
        flags = 0 if self.is_raw else FLAG_REFLECTANCE
        payload = self.samples.astype("<u2" if self.is_raw else "<f4").tobytes()
        meta = json.dumps(self.metadata, sort_keys=True).encode() if self.metadata else b""
        header = _HEADER.pack(HSIC_MAGIC, HSIC_VERSION, self.bit_depth, flags, c, h, w)
        return header + payload + struct.pack("<I", len(meta)) + meta

    @classmethod
    def from_bytes(cls, data: bytes) -> "CubeFile":
        if len(data) < _HEADER.size:
            raise CubeFormatError("file truncated in header")
        magic, version, nb, flags, c, h, w = _HEADER.unpack_from(data)
        if magic != HSIC_MAGIC:
            raise CubeFormatError(f"bad magic {magic!r}")
        if version != HSIC_VERSION:
            raise CubeFormatError(f"unsupported HSIC version {version}")
        reflectance = bool(flags & FLAG_REFLECTANCE)
        dtype = np.dtype("<f4" if reflectance else "<u2")
        n = c * h * w
        end = _HEADER.size + n * dtype.itemsize
        if len(data) < end + 4:
            raise CubeFormatError(f"file truncated: expected at least {end + 4} bytes, got {len(data)}")
        samples = np.frombuffer(data, dtype=dtype, count=n, offset=_HEADER.size).reshape(c, h, w)
        (mlen,) = struct.unpack_from("<I", data, end)
        if len(data) < end + 4 + mlen:
            raise CubeFormatError("file truncated in metadata")
        meta = json.loads(data[end + 4 : end + 4 + mlen]) if mlen else None
        native = samples.astype(np.float32 if reflectance else np.uint16)
        return cls(native, bit_depth=nb, metadata=meta)


def save_cube(path: str | os.PathLike, cube: CubeFile) -> None:
    Path(path).write_bytes(cube.to_bytes())


def read_cube(path: str | os.PathLike) -> CubeFile:
    return CubeFile.from_bytes(Path(path).read_bytes())


def load_cube(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Normalized (1, C, H, W) float64 array and the sensor bit depth."""
    cube = read_cube(path)
    return cube.normalized()[None], cube.bit_depth


def center_crop(cube: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Crop the last two axes; an odd surplus pixel is dropped on the high side."""
    h, w = cube.shape[-2:]
    if target_h > h or target_w > w or target_h < 1 or target_w < 1:
        raise ValueError(f"cannot crop {h}x{w} to {target_h}x{target_w}")
    top = (h - target_h) // 2
    left = (w - target_w) // 2
    return cube[..., top : top + target_h, left : left + target_w]


def synth_cube(rng: np.random.Generator, C: int, H: int, W: int, bit_depth: int = 12,
               n_signatures: int = 6, noise: float = 0.01, contrast: float = 0.25,
               brightness_range: tuple[float, float] = (0.2, 0.3)) -> CubeFile:
    """Gaussian-blob abundance maps mixing smooth spectral signatures.

    A smooth shading field multiplies all bands, so neighbouring bands and
    neighbouring pixels are strongly correlated; blob count, blob size and
    overall brightness vary per cube.
    """
    bands = np.linspace(0.0, 1.0, C)
    sigs = []
    for _ in range(n_signatures):
        centers = rng.uniform(-0.5, 1.5, size=2)
        widths = rng.uniform(0.8, 2.0, size=2)
        weights = rng.uniform(0.3, 1.0, size=2)
        s = sum(wt * np.exp(-0.5 * ((bands - ct) / wd) ** 2) for ct, wd, wt in zip(centers, widths, weights))
        sigs.append(0.3 + 0.7 * s / s.max())
    sigs = np.array(sigs)  # (K, C)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    def blob(scale_lo, scale_hi):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        sy, sx = rng.uniform(scale_lo, scale_hi) * H, rng.uniform(scale_lo, scale_hi) * W
        return np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))

    abund = np.full((n_signatures, H, W), 0.05)
    for _ in range(int(rng.integers(2, 7))):
        abund[int(rng.integers(n_signatures))] += rng.uniform(0.3, 1.0) * blob(0.15, 0.6)
    abund /= abund.sum(axis=0, keepdims=True)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    field = np.cos(theta) * (yy / H - 0.5) + np.sin(theta) * (xx / W - 0.5)
    field = field + sum(rng.uniform(0.5, 0.9) * blob(0.2, 0.6) for _ in range(3))
    # fixed contrast keeps every cube's spatial variance well above the noise floor
    field = (field - field.mean()) / field.std()
    shading = np.maximum(1.0 + contrast * field, 0.1)
    brightness = rng.uniform(*brightness_range)
    cube = brightness * shading * np.einsum("kc,khw->chw", sigs, abund)
    cube += noise * rng.standard_normal(cube.shape)
    top = 2**bit_depth - 1
    raw = np.clip(np.round(cube * top), 0, top).astype(np.uint16)
    return CubeFile(raw, bit_depth=bit_depth)


def synth_dataset(count: int, C: int, H: int, W: int, seed: int = 0, bit_depth: int = 12) -> list[CubeFile]:
    """Deterministic set of spatially and spectrally redundant cubes."""
    rng = np.random.default_rng(seed)
    return [synth_cube(rng, C, H, W, bit_depth=bit_depth) for _ in range(count)]


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.2
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if abs(self.train + self.val + self.test - 1.0) > 1e-9 or min(self.train, self.val, self.test) < 0:
            raise ValueError("split ratios must be non-negative and sum to 1")


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment; ties go to the larger ratio, then order."""
    ideal = [n * r for r in ratios]
    sizes = [int(np.floor(v)) for v in ideal]
    rest = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(ideal[i] - sizes[i]), -ratios[i], i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def split(dataset: Sequence, spec: SplitSpec = SplitSpec()) -> tuple[list[int], list[int], list[int]]:
    """Disjoint train/val/test index lists covering the dataset."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    n_train, n_val, _ = split_sizes(n, (spec.train, spec.val, spec.test))
    perm = np.random.default_rng(spec.seed).permutation(n).tolist()
    return (
        sorted(perm[:n_train]),
        sorted(perm[n_train : n_train + n_val]),
        sorted(perm[n_train + n_val :]),
    )


def write_dataset(directory: str | os.PathLike, cubes: Sequence[CubeFile], spec: SplitSpec | None = None) -> list[Path]:
    """One ``cube_XXXX.hsic`` per cube plus ``split.json`` when ``spec`` is given."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, cube in enumerate(cubes):
        p = d / f"cube_{i:04d}.hsic"
        save_cube(p, cube)
        paths.append(p)
    if spec is not None:
        tr, va, te = split(cubes, spec)
        names = [p.name for p in paths]
        manifest = {
            "seed": spec.seed,
            "ratios": [spec.train, spec.val, spec.test],
            "train": [names[i] for i in tr],
            "val": [names[i] for i in va],
            "test": [names[i] for i in te],
        }
        (d / "split.json").write_text(json.dumps(manifest, indent=2))
    return paths


def list_cubes(directory: str | os.PathLike, subset: str | None = None) -> list[Path]:
    """Cube files in a dataset directory, optionally restricted to a split."""
    d = Path(directory)
    if subset is not None and (d / "split.json").exists():
        names = json.loads((d / "split.json").read_text())[subset]
        return [d / n for n in sorted(names)]
    return sorted(d.glob("*.hsic"))
