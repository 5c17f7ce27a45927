"""Reconstruction metrics and Bjontegaard-style PSNR deltas.

All cube metrics take (C, H, W) or (1, C, H, W) arrays.  BD-PSNR integrates
the difference of two Akima-interpolated PSNR(CR) curves over the CR range
both curves cover, in linear CR by default.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.integrate import simpson
from scipy.interpolate import Akima1DInterpolator

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
BD_POINTS = 1001
CURVE_HEADER = ("cr", "psnr_db")


class NoOverlapError(ValueError):
    """The two RD curves share no CR interval."""


def _pair(x, x_hat) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    # a (1, C, H, W) batch of one is the same cube as (C, H, W)
    a = a[0] if a.ndim == 4 and a.shape[0] == 1 else a
    b = b[0] if b.ndim == 4 and b.shape[0] == 1 else b
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 4:
        raise ValueError(f"expected a single cube, got batch of {a.shape[0]}")
    return a, b


def mse(x, x_hat) -> float:
    a, b = _pair(x, x_hat)
    return float(np.mean((a - b) ** 2))


def psnr(x, x_hat, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for a perfect reconstruction."""
    if not max_value > 0:
        raise ValueError("max_value must be positive")
    m = mse(x, x_hat)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value**2 / m)


def spectral_angle(x, x_hat) -> float:
    """Mean per-pixel angle between spectra, in degrees."""
    a, b = _pair(x, x_hat)
    if a.ndim != 3:
        raise ValueError(f"spectral angle needs a (C,H,W) cube, got {a.shape}")
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    for name, n in (("x", na), ("x_hat", nb)):
        bad = np.argwhere(n == 0)
        if bad.size:
            r, c = bad[0]
            raise ValueError(f"zero-norm spectrum in {name} at pixel ({r}, {c})")
    # half-angle form of arccos(clipped cosine); exact 0 for parallel spectra
    ua, ub = a / na, b / nb
    ang = 2.0 * np.arctan2(np.linalg.norm(ua - ub, axis=0), np.linalg.norm(ua + ub, axis=0))
    return float(np.degrees(ang).mean())


def ssim_band(x, x_hat, max_value: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all valid square windows of one band image.

    The window is clipped to the image size; statistics are population
    (1/n) moments of a uniform window.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim_band needs two equal 2-D images, got {a.shape} and {b.shape}")
    wh, ww = min(window, a.shape[0]), min(window, a.shape[1])
    pa = sliding_window_view(a, (wh, ww))
    pb = sliding_window_view(b, (wh, ww))
    mu_a = pa.mean(axis=(-2, -1))
    mu_b = pb.mean(axis=(-2, -1))
    var_a = (pa * pa).mean(axis=(-2, -1)) - mu_a**2
    var_b = (pb * pb).mean(axis=(-2, -1)) - mu_b**2
    cov = (pa * pb).mean(axis=(-2, -1)) - mu_a * mu_b
    c1 = (SSIM_K1 * max_value) ** 2
    c2 = (SSIM_K2 * max_value) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def ssim(x, x_hat, max_value: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Cube SSIM: the mean of per-band SSIM."""
    a, b = _pair(x, x_hat)
    if a.ndim == 2:
        return ssim_band(a, b, max_value, window)
    if np.array_equal(a, b):
        return 1.0
    return float(np.mean([ssim_band(a[c], b[c], max_value, window) for c in range(a.shape[0])]))


def compression_ratio(bit_depth: int, C: int, H: int, W: int, total_bits: int) -> float:
    """Raw size N_b*H*W*C over the compressed size, both in bits."""
    if total_bits <= 0:
        raise ValueError("compressed size must be positive")
    return bit_depth * H * W * C / total_bits


def cube_metrics(x, x_hat, max_value: float = 1.0) -> dict[str, float]:
    return {
        "psnr": psnr(x, x_hat, max_value),
        "sa": spectral_angle(x, x_hat),
        "ssim": ssim(x, x_hat, max_value),
    }


def summarize(values: Sequence[float]) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "min": float(v.min()), "max": float(v.max())}


# RD curves ---------------------------------------------------------------------


@dataclass
class RDCurve:
    """(CR, PSNR) operating points, kept sorted by CR."""

    points: list[tuple[float, float]]
    label: str = ""

    def __post_init__(self):
        pts = sorted((float(c), float(p)) for c, p in self.points)
        if len(pts) < 3:
            raise ValueError(f"an RD curve needs at least 3 points, got {len(pts)}")
        crs = [c for c, _ in pts]
        if any(c <= 0 for c in crs):
            raise ValueError("compression ratios must be positive")
        if len(set(crs)) != len(crs):
            raise ValueError("compression ratios must be distinct")
        self.points = pts

    @property
    def cr(self) -> np.ndarray:
        return np.array([c for c, _ in self.points])

    @property
    def psnr(self) -> np.ndarray:
        return np.array([p for _, p in self.points])

    def __call__(self, query, log_domain: bool = False) -> np.ndarray:
        xs = np.log(self.cr) if log_domain else self.cr
        q = np.log(np.asarray(query, dtype=np.float64)) if log_domain else np.asarray(query, dtype=np.float64)
        return akima_interpolate(np.column_stack([xs, self.psnr]), q)

    def shifted(self, delta_db: float, label: str | None = None) -> "RDCurve":
        return RDCurve([(c, p + delta_db) for c, p in self.points], label if label is not None else self.label)


def akima_interpolate(points, query) -> np.ndarray | float:
    """Akima spline through ``points`` evaluated at ``query`` (no extrapolation)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise ValueError("akima_interpolate needs at least 3 (x, y) points")
    x, y = pts[:, 0], pts[:, 1]
    if np.any(np.diff(x) <= 0):
        raise ValueError("knot x values must be strictly increasing")
    q = np.asarray(query, dtype=np.float64)
    if np.any(q < x[0]) or np.any(q > x[-1]):
        raise ValueError(f"query outside [{x[0]}, {x[-1]}]: extrapolation is not supported")
    out = Akima1DInterpolator(x, y, extrapolate=False)(q)
    return float(out) if out.ndim == 0 else out


def overlap(a: RDCurve, b: RDCurve) -> tuple[float, float]:
    lo = max(a.cr[0], b.cr[0])
    hi = min(a.cr[-1], b.cr[-1])
    if not hi > lo:
        raise NoOverlapError(f"CR ranges [{a.cr[0]}, {a.cr[-1]}] and [{b.cr[0]}, {b.cr[-1]}] do not overlap")
    return float(lo), float(hi)


def bd_psnr(a: RDCurve, b: RDCurve, n_points: int = BD_POINTS, log_domain: bool = False) -> float:
    """Average PSNR gap of ``a`` over ``b`` across their shared CR range."""
    if n_points < 3:
        raise ValueError("need at least 3 integration points")
    if n_points % 2 == 0:
        n_points += 1
    lo, hi = overlap(a, b)
    if log_domain:
        t = np.linspace(math.log(lo), math.log(hi), n_points)
        q = np.exp(t)
        q[0], q[-1] = lo, hi
    else:
        t = np.linspace(lo, hi, n_points)
        q = t
    diff = a(q, log_domain) - b(q, log_domain)
    return float(simpson(diff, x=t) / (t[-1] - t[0]))


def bd_report(a: RDCurve, b: RDCurve, log_domain: bool = False) -> dict:
    lo, hi = overlap(a, b)
    return {
        "curve_a": a.label,
        "curve_b": b.label,
        "cr_min": lo,
        "cr_max": hi,
        "domain": "log" if log_domain else "linear",
        "bd_psnr_db": bd_psnr(a, b, log_domain=log_domain),
    }


def curve_to_csv(curve: RDCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for c, p in curve.points:
        w.writerow([repr(c), repr(p)])
    return buf.getvalue()


def curve_from_csv(text: str, label: str = "") -> RDCurve:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(h.strip() for h in rows[0]) != CURVE_HEADER:
        raise ValueError(f"RD curve CSV must start with header {','.join(CURVE_HEADER)}")
    pts = [(float(r[0]), float(r[1])) for r in rows[1:] if r]
    return RDCurve(pts, label)


def write_curve(path: str | os.PathLike, curve: RDCurve) -> None:
    Path(path).write_text(curve_to_csv(curve))


def read_curve(path: str | os.PathLike) -> RDCurve:
    p = Path(path)
    return curve_from_csv(p.read_text(), label=p.stem)


def write_json(path: str | os.PathLike, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# Reference operating points for the spatial-stage/channel sweep on a
# 202-band benchmark, keyed by (S, M, N): one (CR, PSNR dB) pair per lambda.
ABLATION_CURVES: dict[tuple[int, int, int], tuple[tuple[float, float], ...]] = {
    (0, 384, 230): ((502.4077, 47.8741), (713.5196, 47.4353), (5164.6753, 39.3069)),
    (0, 768, 460): ((436.9810, 48.6884), (674.3664, 48.0501), (5011.2325, 39.8416)),
    (0, 1024, 614): ((343.2408, 48.9167), (639.2822, 49.1115), (4995.9452, 39.8963)),
    (0, 1280, 768): ((381.7397, 49.4469), (633.4100, 48.2932), (4990.8046, 39.9056)),
    (1, 384, 230): ((341.3726, 48.2810), (751.2086, 47.4402), (7632.1456, 40.1340)),
    (1, 768, 460): ((284.3801, 50.0000), (734.4305, 48.4607), (7209.4719, 40.4233)),
    (1, 1024, 614): ((267.1669, 50.6599), (670.1227, 49.3863), (7400.4539, 40.5936)),
    (1, 1280, 768): ((247.2162, 49.8382), (658.7774, 49.4411), (7198.1995, 40.5767)),
    (2, 384, 230): ((164.3915, 48.8279), (542.2830, 46.8398), (6287.0028, 41.5400)),
    (2, 768, 460): ((105.5041, 50.5983), (571.8544, 48.0844), (7412.9616, 41.3302)),
    (2, 1024, 614): ((102.4822, 51.5742), (574.2521, 49.8082), (8327.2791, 40.6502)),
    (2, 1280, 768): ((95.6432, 51.2723), (583.4847, 49.9938), (8495.5131, 40.4673)),
    (3, 384, 230): ((370.4474, 47.1059), (599.1194, 46.8752), (6228.3593, 41.5680)),
    (3, 768, 460): ((243.4411, 47.2757), (495.7406, 48.0059), (6497.6986, 41.8820)),
    (3, 1024, 614): ((171.6353, 48.9394), (474.9441, 47.4681), (7053.9909, 41.6084)),
    (3, 1280, 768): ((150.0121, 49.1246), (556.8836, 47.7281), (7310.5808, 41.5463)),
    (4, 384, 230): ((1265.9146, 42.9975), (1544.4675, 42.8244), (7391.9089, 41.0112)),
    (4, 768, 460): ((748.6348, 44.6674), (1005.8022, 43.6993), (7635.9310, 40.5791)),
    (4, 1024, 614): ((677.1314, 44.0764), (894.3562, 43.5899), (6742.4722, 41.5918)),
    (4, 1280, 768): ((572.8600, 45.1633), (697.5932, 45.0476), (6741.8864, 41.5830)),
}


def ablation_curve(S: int, M: int, N: int) -> RDCurve:
    return RDCurve(list(ABLATION_CURVES[(S, M, N)]), label=f"S{S}_M{M}_N{N}")


def mean_of(rows: Iterable[dict], key: str) -> float:
    return float(np.mean([r[key] for r in rows]))
