"""Rate-distortion training with separate main and auxiliary Adam optimizers."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .entropy import aux_loss
from .model import HyvicConfig, ModelParams, first_nonfinite, forward
from .tensor import Parameter, Tape, Tensor, add, backward, log2, mean, scale, square, sub, tensor_sum

log = logging.getLogger(__name__)

LAMBDA_GRID = (1e-7, 1e-6, 1e-5, 1e-4, 1e-2, 1.0, 1e2, 1e4)
LOG_COLUMNS = ("step", "total", "rate_bpppc", "mse", "aux_loss", "wall_ms")


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/Inf; ``tensor`` names the first offender."""

    def __init__(self, step: int, tensor: str):
        super().__init__(f"non-finite value at step {step}: first non-finite tensor is {tensor!r}")
        self.step = step
        self.tensor = tensor


@dataclass
class TrainConfig:
    lam: float = 1e-4
    epochs: int = 150
    batch_size: int = 16
    lr_main: float = 1e-4
    lr_aux: float = 1e-3
    seed: int = 0
    patch_size: int | None = None
    max_steps: int | None = None
    checkpoint_every: int | None = None
    clip_grad_norm: float | None = None

    def __post_init__(self):
        if not self.lam > 0 or not math.isfinite(self.lam):
            raise ValueError(f"lambda must be positive and finite, got {self.lam}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def rd_loss(x: Tensor, x_hat: Tensor, p_y: Tensor, p_z: Tensor, lam: float):
    """(rate + lam * mse, rate in bits per pixel per channel, mse)."""
    if x.shape != x_hat.shape:
        raise ValueError(f"rd_loss: x {x.shape} and x_hat {x_hat.shape} differ")
    for name, p in (("p_y", p_y), ("p_z", p_z)):
        if np.any(p.data <= 0) or np.any(p.data > 1):
            raise ValueError(f"rd_loss: {name} contains likelihoods outside (0, 1]")
    b, c, h, w = x.shape
    bits = add(tensor_sum(log2(p_y)), tensor_sum(log2(p_z)))
    rate = scale(bits, -1.0 / (b * c * h * w))
    distortion = mean(square(sub(x, x_hat)))
    total = add(rate, scale(distortion, lam))
    return total, rate, distortion


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update from each parameter's ``.grad``."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in params:
        if p.grad is None:
            continue
        key = p.name
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * p.grad * p.grad
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return total


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    checkpoints: list[Path]


def _as_batchable(cube) -> np.ndarray:
    arr = np.asarray(cube, dtype=np.float64)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3:
        raise ValueError(f"dataset cubes must be (C,H,W), got shape {arr.shape}")
    return arr


def train(
    dataset: Sequence[np.ndarray],
    model_config: HyvicConfig,
    train_config: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    params: ModelParams | None = None,
) -> TrainResult:
    """Train a model on normalized (C,H,W) cubes.

    Data order, crops and quantization noise all come from one generator
    seeded by ``train_config.seed``, so runs are reproducible bit for bit.
    """
    cubes = [_as_batchable(c) for c in dataset]
    if not cubes:
        raise ValueError("empty dataset")
    tc = train_config
    patch = tc.patch_size
    for i, c in enumerate(cubes):
        if c.shape[0] != model_config.C:
            raise ValueError(f"cube {i} has {c.shape[0]} bands, model expects {model_config.C}")
        h, w = (patch, patch) if patch else c.shape[1:]
        if patch and (patch > c.shape[1] or patch > c.shape[2]):
            raise ValueError(f"patch size {patch} exceeds cube {i} extent {c.shape[1:]}")
        model_config.check_input(h, w)
    if params is None:
        params = ModelParams(model_config, seed=tc.seed)
    rng = np.random.default_rng(tc.seed)
    main_state, aux_state = AdamState(), AdamState()
    main_params, aux_params = params.main_parameters(), params.aux_parameters()

    out_path = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_file = open(out_path / "metrics.csv", "a", newline="")
        writer = csv.writer(log_file)
        if log_file.tell() == 0:
            writer.writerow(LOG_COLUMNS)

    rows: list[dict] = []
    checkpoints: list[Path] = []
    step = 0
    try:
        for _epoch in range(tc.epochs):
            order = rng.permutation(len(cubes))
            for start in range(0, len(order), tc.batch_size):
                if tc.max_steps is not None and step >= tc.max_steps:
                    break
                t0 = time.perf_counter()
                batch = []
                for j in order[start : start + tc.batch_size]:
                    c = cubes[j]
                    if patch:
                        r = int(rng.integers(0, c.shape[1] - patch + 1))
                        q = int(rng.integers(0, c.shape[2] - patch + 1))
                        c = c[:, r : r + patch, q : q + patch]
                    batch.append(c)
                x = Tensor(np.stack(batch))
                step += 1

                with Tape() as tape:
                    out = forward(x, params, "train", rng=rng)
                    total, rate, mse = rd_loss(x, out["x_hat"], out["p_y"], out["p_z"], tc.lam)
                if not math.isfinite(total.item()):
                    bad = first_nonfinite(out) or "total"
                    raise NonFiniteLossError(step, bad)
                backward(total, tape)
                bad = first_nonfinite((p.name, Tensor(p.grad)) for p in main_params if p.grad is not None)
                if bad is not None:
                    raise NonFiniteLossError(step, f"grad:{bad}")
                if tc.clip_grad_norm:
                    clip_grad_norm(main_params, tc.clip_grad_norm)
                adam_step(main_params, main_state, tc.lr_main)
                params.zero_grad()

                with Tape() as aux_tape:
                    aux = aux_loss(params.prior)
                backward(aux, aux_tape)
                adam_step(aux_params, aux_state, tc.lr_aux)
                params.zero_grad()

                row = {
                    "step": step,
                    "total": total.item(),
                    "rate_bpppc": rate.item(),
                    "mse": mse.item(),
                    "aux_loss": aux.item(),
                    "wall_ms": (time.perf_counter() - t0) * 1e3,
                }
                rows.append(row)
                if log_file is not None:
                    writer.writerow([row[k] if k == "step" else repr(row[k]) for k in LOG_COLUMNS])
                if out_path is not None and tc.checkpoint_every and step % tc.checkpoint_every == 0:
                    ckpt = out_path / f"ckpt_{step:06d}.hvwt"
                    params.save(ckpt)
                    checkpoints.append(ckpt)
            if tc.max_steps is not None and step >= tc.max_steps:
                break
    finally:
        if log_file is not None:
            log_file.close()
    if out_path is not None:
        final = out_path / "final.hvwt"
        params.save(final)
        checkpoints.append(final)
    log.info("trained %d steps, final total %.6g", step, rows[-1]["total"] if rows else float("nan"))
    return TrainResult(params, rows, checkpoints)


def eval_rd(params: ModelParams, cubes: Sequence[np.ndarray], lam: float = 1.0) -> dict:
    """Eval-mode (rounded) rate and MSE, averaged per cube."""
    rates, mses = [], []
    for c in cubes:
        x = Tensor(_as_batchable(c)[None])
        out = forward(x, params, "eval")
        _, rate, mse = rd_loss(x, out["x_hat"], out["p_y"], out["p_z"], lam)
        rates.append(rate.item())
        mses.append(mse.item())
    return {"rate_bpppc": float(np.mean(rates)), "mse": float(np.mean(mses))}


def config_dict(tc: TrainConfig) -> dict:
    return asdict(tc)
