import csv
import json
import logging

import numpy as np
import pytest

from hyvic import metrics
from hyvic.cli import CONFIG_KEYS, EXIT_CONFIG, EXIT_HASH, EXIT_OK, EXIT_OVERLAP, main, read_config, resolve_config
from hyvic.codec import read_bitstream
from hyvic.data import CubeFile, read_cube, save_cube, synth_dataset, write_dataset
from hyvic.metrics import RDCurve, ablation_curve, write_curve
from hyvic.model import HyvicConfig, ModelParams

DESK_CONFIG = {"lambda": 0.01, "epochs": 1000, "max_steps": 300, "bs": 8, "lr_main": 0.003, "lr_aux": 0.001,
               "seed": 0, "S": 1, "M": 24, "N": 16, "k": 3}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out.strip()
    return code, (json.loads(out.splitlines()[-1]) if out else None)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", str(d), "--count", "10", "--bands", "8", "--height", "16", "--width", "16"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "desk.json"
    cfg.write_text(json.dumps(dict(DESK_CONFIG, max_steps=20)))
    assert main(["train", str(cfg), "--data", str(dataset), "--out", str(out)]) == 0
    return out / "final.hvwt"


def test_synth_writes_split(dataset):
    manifest = json.loads((dataset / "split.json").read_text())
    assert (len(manifest["train"]), len(manifest["val"]), len(manifest["test"])) == (7, 2, 1)
    assert read_cube(dataset / "cube_0000.hsic").bit_depth == 12


def test_shipped_desk_config_keys():
    from pathlib import Path

    raw = read_config(Path(__file__).resolve().parents[1] / "configs" / "desk.json")
    model, train, run_ = resolve_config(raw)
    assert (model["S"], model["M"], model["N"], model["k"]) == (1, 24, 16, 3)
    assert train["max_steps"] == 300 and train["batch_size"] == 8


def test_train_writes_loadable_checkpoint_and_manifest(trained):
    params = ModelParams.load(trained)
    assert params.config == HyvicConfig(C=8, N=16, M=24, S=1, k=3)
    manifest = json.loads((trained.parent / "manifest.json").read_text())
    assert manifest["status"] == "done" and manifest["steps"] == 20
    assert manifest["config"]["train"]["lam"] == 0.01
    assert manifest["build"].startswith("0.1.0")
    assert "elapsed_s" in manifest["wall_clock"]
    with open(trained.parent / "metrics.csv") as fh:
        assert len(list(csv.reader(fh))) == 21


def test_key_value_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# desk\nlambda = 1e-2\nS = 1  # stages\nM=24\n")
    assert read_config(p) == {"lambda": 0.01, "S": 1, "M": 24}


def test_unknown_key_exit_2(tmp_path, dataset, caplog):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"lambda": 0.01, "learning_rate": 1.0}))
    with caplog.at_level(logging.ERROR, logger="hyvic"):
        assert main(["train", str(cfg), "--data", str(dataset), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "learning_rate" in caplog.text


def test_bad_value_type_exit_2(tmp_path, dataset):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"S": 1.5}))
    assert main(["train", str(cfg), "--data", str(dataset), "--out", str(tmp_path)]) == EXIT_CONFIG
    with pytest.raises(ValueError, match="'S'"):
        resolve_config({"S": "two"})


def test_missing_dataset_exit_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(DESK_CONFIG))
    assert main(["train", str(cfg), "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_lambda_default_notice(tmp_path, dataset, caplog, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({k: v for k, v in DESK_CONFIG.items() if k != "lambda"} | {"max_steps": 1}))
    with caplog.at_level(logging.WARNING, logger="hyvic"):
        code, _ = run(capsys, "train", cfg, "--data", dataset, "--out", tmp_path / "o")
    assert code == EXIT_OK
    assert "lambda not set" in caplog.text
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["train"]["lam"] == 1e-4


def test_config_keys_cover_training_table():
    for key in ("epochs", "bs", "lr_main", "lr_aux", "lambda", "S", "M", "N", "k"):
        assert key in CONFIG_KEYS


def test_compress_decompress_round_trip(tmp_path, dataset, trained, capsys):
    src = dataset / "cube_0001.hsic"
    code, stats = run(capsys, "compress", trained, src, tmp_path / "c.hvic", "--manifest", tmp_path / "m.json")
    assert code == EXIT_OK
    assert stats["cr"] > 1
    assert set(stats) >= {"cr", "bpppc", "wall_s"}
    b = read_bitstream(tmp_path / "c.hvic")
    assert stats["cr"] == metrics.compression_ratio(b.bit_depth, b.C, b.H, b.W, 8 * (tmp_path / "c.hvic").stat().st_size)
    assert json.loads((tmp_path / "m.json").read_text())["status"] == "done"

    code, dstats = run(capsys, "decompress", trained, tmp_path / "c.hvic", tmp_path / "d.hsic")
    assert code == EXIT_OK and dstats["cr"] == stats["cr"]
    out = read_cube(tmp_path / "d.hsic")
    assert not out.is_raw and out.shape == (8, 16, 16)
    assert out.samples.min() >= 0 and out.samples.max() <= 1


def test_wrong_checkpoint_exit_4(tmp_path, dataset, trained, capsys):
    run(capsys, "compress", trained, dataset / "cube_0002.hsic", tmp_path / "c.hvic")
    other = tmp_path / "other.hvwt"
    ModelParams(HyvicConfig(C=8, N=16, M=24, S=1), seed=99).save(other)
    code, _ = run(capsys, "decompress", other, tmp_path / "c.hvic", tmp_path / "d.hsic")
    assert code == EXIT_HASH
    assert not (tmp_path / "d.hsic").exists()


def test_eval_identical_cubes_and_summary(tmp_path, trained, capsys):
    d = tmp_path / "twins"
    d.mkdir()
    cube = synth_dataset(1, 8, 16, 16, seed=3)[0]
    save_cube(d / "a.hsic", cube)
    save_cube(d / "b.hsic", cube)
    save_cube(d / "c.hsic", synth_dataset(1, 8, 16, 16, seed=4)[0])
    code, _ = run(capsys, "eval", trained, d, "--out", tmp_path / "ev")
    assert code == EXIT_OK
    with open(tmp_path / "ev" / "per_cube.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["file"] for r in rows] == ["a.hsic", "b.hsic", "c.hsic"]
    assert {k: v for k, v in rows[0].items() if k != "file"} == {k: v for k, v in rows[1].items() if k != "file"}
    summary = json.loads((tmp_path / "ev" / "summary.json").read_text())
    for key in ("cr", "psnr", "sa", "ssim"):
        assert summary[key]["mean"] == pytest.approx(np.mean([float(r[key]) for r in rows]), rel=1e-12)
        assert set(summary[key]) == {"mean", "std", "min", "max"}


def test_eval_records_failures_and_continues(tmp_path, trained, capsys):
    d = tmp_path / "mixed"
    d.mkdir()
    save_cube(d / "good.hsic", synth_dataset(1, 8, 16, 16)[0])
    save_cube(d / "wrong_bands.hsic", CubeFile(np.zeros((4, 16, 16), dtype=np.uint16), bit_depth=12))
    code, _ = run(capsys, "eval", trained, d, "--out", tmp_path / "ev")
    assert code == 1
    with open(tmp_path / "ev" / "per_cube.csv") as fh:
        rows = {r["file"]: r for r in csv.DictReader(fh)}
    assert rows["good.hsic"]["error"] == ""
    assert "bands" in rows["wrong_bands.hsic"]["error"]


def test_eval_cr_varies_across_cubes(tmp_path, desk_runs, capsys):
    ckpt = tmp_path / "hi.hvwt"
    desk_runs.result(1e2).params.save(ckpt)
    d = tmp_path / "hetero"
    write_dataset(d, synth_dataset(8, 8, 64, 64, seed=21))
    code, summary = run(capsys, "eval", ckpt, d, "--out", tmp_path / "ev")
    assert code == EXIT_OK
    assert summary["cr"]["max"] / summary["cr"]["min"] > 1.2


def test_eval_thread_cap_does_not_change_output(tmp_path, trained, dataset, monkeypatch, capsys):
    outs = []
    for threads in ("1", "3"):
        monkeypatch.setenv("HYVIC_THREADS", threads)
        run(capsys, "eval", trained, dataset, "--subset", "val", "--out", tmp_path / threads)
        outs.append((tmp_path / threads / "per_cube.csv").read_bytes())
    assert outs[0] == outs[1]


def write_curves(tmp_path, a, b):
    write_curve(tmp_path / "a.csv", a)
    write_curve(tmp_path / "b.csv", b)
    return tmp_path / "a.csv", tmp_path / "b.csv"


def test_bdpsnr_self_and_shift(tmp_path, capsys):
    a = RDCurve([(4, 40.0), (8, 36.5), (16, 33.2), (32, 30.4)])
    pa, pb = write_curves(tmp_path, a, a)
    code, rep = run(capsys, "bdpsnr", pa, pb)
    assert code == EXIT_OK and rep["bd_psnr_db"] == 0.0
    pa, pb = write_curves(tmp_path, a.shifted(2.0), a)
    code, rep = run(capsys, "bdpsnr", pa, pb, "--out", tmp_path / "r.json")
    assert abs(rep["bd_psnr_db"] - 2.0) < 1e-6
    assert (rep["cr_min"], rep["cr_max"]) == (4.0, 32.0)
    assert json.loads((tmp_path / "r.json").read_text()) == rep


def test_bdpsnr_no_overlap_exit_5(tmp_path, capsys):
    pa, pb = write_curves(tmp_path, RDCurve([(1, 3), (2, 2), (3, 1)]), RDCurve([(5, 3), (6, 2), (7, 1)]))
    code, _ = run(capsys, "bdpsnr", pa, pb)
    assert code == EXIT_OVERLAP


def test_bdpsnr_reference_curves_antisymmetric(tmp_path, capsys):
    pa, pb = write_curves(tmp_path, ablation_curve(2, 1280, 768), ablation_curve(1, 768, 460))
    _, ab = run(capsys, "bdpsnr", pa, pb)
    _, ba = run(capsys, "bdpsnr", pb, pa)
    assert np.isfinite(ab["bd_psnr_db"]) and ab["bd_psnr_db"] != 0
    assert abs(ab["bd_psnr_db"] + ba["bd_psnr_db"]) < 1e-9
    _, log_ab = run(capsys, "bdpsnr", pa, pb, "--log-domain")
    assert log_ab["domain"] == "log"


def test_reproducible_outputs(tmp_path, dataset, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(dict(DESK_CONFIG, max_steps=3)))
    for tag in ("a", "b"):
        assert main(["train", str(cfg), "--data", str(dataset), "--out", str(tmp_path / tag)]) == 0
        ckpt = tmp_path / tag / "final.hvwt"
        assert main(["compress", str(ckpt), str(dataset / "cube_0000.hsic"), str(tmp_path / tag / "c.hvic")]) == 0
        assert main(["decompress", str(ckpt), str(tmp_path / tag / "c.hvic"), str(tmp_path / tag / "d.hsic")]) == 0
    capsys.readouterr()
    for name in ("final.hvwt", "c.hvic", "d.hsic"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with open(tmp_path / "a" / "metrics.csv") as fa, open(tmp_path / "b" / "metrics.csv") as fb:
        strip = lambda rows: [r[:-1] for r in csv.reader(rows)]  # noqa: E731  (drop wall_ms)
        assert strip(fa) == strip(fb)


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
