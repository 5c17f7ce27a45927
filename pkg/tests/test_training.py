import csv

import numpy as np
import pytest
from conftest import DESK_MODEL, desk_train_config

from hyvic.entropy import aux_loss
from hyvic.model import HyvicConfig, ModelParams, forward
from hyvic.tensor import Parameter, Tape, Tensor, backward, square, tensor_sum
from hyvic.training import (
    LAMBDA_GRID,
    LOG_COLUMNS,
    AdamState,
    NonFiniteLossError,
    TrainConfig,
    adam_step,
    clip_grad_norm,
    rd_loss,
    train,
)


def ones(shape):
    return Tensor(np.ones(shape))


def test_rd_loss_perfect_and_certain_is_zero():
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 2, 3, 3)))
    total, rate, mse = rd_loss(x, x, ones((1, 2, 3, 3)), ones((1, 1, 1, 1)), 5.0)
    assert total.item() == 0.0 and rate.item() == 0.0 and mse.item() == 0.0


def test_rd_loss_single_element():
    x = Tensor(np.full((1, 1, 1, 1), 0.4))
    total, rate, _ = rd_loss(x, x, Tensor(np.full((1, 1, 1, 1), 0.5)), ones((1, 1, 1, 1)), 1.0)
    assert rate.item() == 1.0 and total.item() == 1.0


def test_rd_loss_lambda_zero_cuts_distortion_gradient():
    x = Tensor(np.zeros((1, 1, 2, 2)))
    xh = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        total, rate, mse = rd_loss(x, xh, Tensor(np.full((1, 1, 2, 2), 0.25)), ones((1, 1, 1, 1)), 0.0)
    assert total.item() == rate.item() == 2.0
    assert mse.item() == 1.0
    backward(total, tape)
    np.testing.assert_array_equal(xh.grad, 0.0)


def test_rd_loss_rejects_bad_likelihood():
    x = Tensor(np.zeros((1, 1, 1, 1)))
    with pytest.raises(ValueError, match="p_y"):
        rd_loss(x, x, Tensor(np.zeros((1, 1, 1, 1))), ones((1, 1, 1, 1)), 1.0)
    with pytest.raises(ValueError):
        rd_loss(x, Tensor(np.zeros((1, 1, 2, 1))), ones((1, 1, 1, 1)), ones((1, 1, 1, 1)), 1.0)


def test_adam_first_step_closed_form():
    p = Parameter(np.zeros(4), "w")
    p.grad = np.array([3.0, -0.2, 1e-3, -50.0])
    adam_step([p], AdamState(), 0.01)
    # bias-corrected first step is -lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, -0.01 * p.grad / (np.abs(p.grad) + 1e-8), rtol=1e-12)
    assert np.all(np.abs(p.data) <= 0.01)


def test_adam_zero_gradient_is_noop():
    p = Parameter(np.arange(3.0), "w")
    state = AdamState()
    for _ in range(10):
        p.grad = np.zeros(3)
        adam_step([p], state, 0.1)
    np.testing.assert_array_equal(p.data, np.arange(3.0))


def test_adam_quadratic_bowl():
    p = Parameter(np.ones(5), "w")
    state = AdamState()
    for _ in range(2000):
        p.grad = None
        with Tape() as tape:
            loss = tensor_sum(square(p))
        backward(loss, tape)
        adam_step([p], state, 1e-2)
    assert np.linalg.norm(p.data) < 1e-3


def test_adam_moment_shapes():
    ps = [Parameter(np.zeros((2, 3)), "a"), Parameter(np.zeros(4), "b")]
    for q in ps:
        q.grad = np.ones_like(q.data)
    state = AdamState()
    adam_step(ps, state, 1e-3)
    assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (4,)


def test_clip_grad_norm():
    p = Parameter(np.zeros(2), "w")
    p.grad = np.array([30.0, 40.0])
    assert clip_grad_norm([p], 10.0) == 50.0
    np.testing.assert_allclose(p.grad, [6.0, 8.0])


def test_train_config_validation():
    assert 1e-4 in LAMBDA_GRID and len(LAMBDA_GRID) == 8
    TrainConfig(lam=0.37)
    for bad in (0.0, -1.0, float("inf"), float("nan")):
        with pytest.raises(ValueError):
            TrainConfig(lam=bad)


def test_gradient_flow_separation():
    params = ModelParams(HyvicConfig(C=4, N=6, M=8, S=1), seed=0)
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 4, 8, 8)))
    with Tape() as tape:
        out = forward(x, params, "train", rng=np.random.default_rng(1))
        total, _, _ = rd_loss(x, out["x_hat"], out["p_y"], out["p_z"], 1.0)
    backward(total, tape)
    rd_touched = {p.name for p in params if p.grad is not None}
    params.zero_grad()
    with Tape() as tape:
        aux = aux_loss(params.prior)
    backward(aux, tape)
    aux_touched = {p.name for p in params if p.grad is not None}
    assert aux_touched == {"prior.quantiles"}
    assert rd_touched.isdisjoint(aux_touched)
    assert rd_touched == {p.name for p in params.main_parameters()}


def tiny_run(tmp_path=None, **kw):
    files = [np.random.default_rng(i).uniform(size=(8, 16, 16)) for i in range(4)]
    return train(files, DESK_MODEL, desk_train_config(1e-2, 0, max_steps=6, batch_size=2, **kw), out_dir=tmp_path)


def test_same_seed_identical_trace():
    a, b = tiny_run(), tiny_run()
    assert [r["total"] for r in a.log] == [r["total"] for r in b.log]
    assert a.params.digest() == b.params.digest()


def test_nan_diagnostic():
    files = [np.full((8, 16, 16), np.nan)]
    with pytest.raises(NonFiniteLossError) as info:
        train(files, DESK_MODEL, desk_train_config(1e-2, 0, max_steps=2))
    assert info.value.step == 1
    assert info.value.tensor == "x"


def test_rejects_bad_cubes():
    with pytest.raises(ValueError, match="bands"):
        train([np.zeros((4, 16, 16))], DESK_MODEL, desk_train_config(1e-2, 0))
    with pytest.raises(Exception, match="divisible"):
        train([np.zeros((8, 12, 12))], DESK_MODEL, desk_train_config(1e-2, 0))
    with pytest.raises(ValueError):
        train([], DESK_MODEL, desk_train_config(1e-2, 0))


def test_csv_log_is_append_only(tmp_path):
    tiny_run(tmp_path, checkpoint_every=3)
    first = (tmp_path / "metrics.csv").read_text()
    tiny_run(tmp_path, checkpoint_every=3)
    second = (tmp_path / "metrics.csv").read_text()
    assert second.startswith(first)
    rows = list(csv.reader(second.splitlines()))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert len(rows) == 1 + 12
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4, 5, 6] * 2


def test_checkpoints_written_and_loadable(tmp_path):
    res = tiny_run(tmp_path, checkpoint_every=3)
    names = [p.name for p in res.checkpoints]
    assert names == ["ckpt_000003.hvwt", "ckpt_000006.hvwt", "final.hvwt"]
    final = ModelParams.load(tmp_path / "final.hvwt")
    assert final.digest() == res.params.digest()


def smoothed(log, step, width=10):
    vals = [r["total"] for r in log if step - width < r["step"] <= step]
    return float(np.mean(vals))


def test_desk_loss_decreases(desk_runs):
    for seed in (0, 1, 2):
        log = desk_runs.result(1e-2, seed).log
        assert len(log) == 300
        assert smoothed(log, 300) < smoothed(log, 10)
