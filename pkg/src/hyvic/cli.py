"""Command-line entry point: ``hyvic {synth,train,compress,decompress,eval,bdpsnr}``.

Exit codes: 0 success, 1 other failure (including per-cube eval failures),
2 bad configuration or missing dataset, 3 non-finite training loss,
4 checkpoint/bitstream hash mismatch, 5 RD curves without CR overlap.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .codec import HashMismatchError, compress, compression_ratio, decompress, read_bitstream, write_bitstream
from .data import CubeFile, SplitSpec, list_cubes, load_cube, read_cube, save_cube, synth_dataset, write_dataset
from .metrics import NoOverlapError, bd_report, cube_metrics, read_curve, summarize
from .model import ConfigError, HyvicConfig, ModelParams
from .training import NonFiniteLossError, TrainConfig, config_dict, train

log = logging.getLogger("hyvic")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NAN, EXIT_HASH, EXIT_OVERLAP = 0, 1, 2, 3, 4, 5
DEFAULT_LAMBDA = 1e-4

# config key -> (section, field, type)
CONFIG_KEYS = {
    "epochs": ("train", "epochs", int),
    "bs": ("train", "batch_size", int),
    "lr_main": ("train", "lr_main", float),
    "lr_aux": ("train", "lr_aux", float),
    "lambda": ("train", "lam", float),
    "seed": ("train", "seed", int),
    "patch_size": ("train", "patch_size", int),
    "max_steps": ("train", "max_steps", int),
    "checkpoint_every": ("train", "checkpoint_every", int),
    "clip_grad_norm": ("train", "clip_grad_norm", float),
    "S": ("model", "S", int),
    "M": ("model", "M", int),
    "N": ("model", "N", int),
    "k": ("model", "k", int),
    "C": ("model", "C", int),
    "data": ("run", "data", str),
    "out": ("run", "out", str),
}


class CliConfigError(ValueError):
    pass


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config(path: str | os.PathLike) -> dict:
    """JSON object, or one ``key = value`` pair per line (``#`` comments)."""
    p = Path(path)
    if not p.exists():
        raise CliConfigError(f"config file {p} not found")
    text = p.read_text()
    if text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CliConfigError(f"invalid JSON in {p}: {exc}") from exc
    else:
        raw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliConfigError(f"{p}:{n}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = _parse_scalar(value)
    return raw


def resolve_config(raw: dict) -> tuple[dict, dict, dict]:
    """Split a flat config into (model, train, run) sections with type checks."""
    sections: dict[str, dict] = {"model": {}, "train": {}, "run": {}}
    for key, value in raw.items():
        if key not in CONFIG_KEYS:
            raise CliConfigError(f"unknown config key {key!r}")
        section, name, typ = CONFIG_KEYS[key]
        if value is None:
            continue
        try:
            if typ is int and (isinstance(value, bool) or float(value) != int(float(value))):
                raise ValueError
            sections[section][name] = typ(value) if typ is not int else int(float(value))
        except (TypeError, ValueError):
            raise CliConfigError(f"config key {key!r} expects {typ.__name__}, got {value!r}") from None
    return sections["model"], sections["train"], sections["run"]


# run manifest ------------------------------------------------------------------


def _build_id() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_json_atomic(path: str | os.PathLike, obj) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=p.parent, prefix=f".{p.name}.", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, p)


class RunManifest:
    """Written when a command starts and rewritten when it finishes."""

    def __init__(self, path: str | os.PathLike | None, command: str, config: dict, seed=None, outputs=None):
        self.path = Path(path) if path is not None else None
        self.t0 = time.perf_counter()
        self.body = {
            "command": command,
            "build": _build_id(),
            "config": config,
            "seed": seed,
            "outputs": outputs or {},
            "status": "running",
            "wall_clock": {"started_unix": time.time()},
        }
        self._flush()

    def _flush(self):
        if self.path is not None:
            write_json_atomic(self.path, self.body)

    def finish(self, status: str, **extra) -> None:
        self.body["status"] = status
        self.body.update(extra)
        self.body["wall_clock"]["elapsed_s"] = time.perf_counter() - self.t0
        self._flush()


# commands ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    cubes = synth_dataset(args.count, args.bands, args.height, args.width, seed=args.seed, bit_depth=args.bit_depth)
    paths = write_dataset(args.out, cubes, SplitSpec(seed=args.seed))
    print(json.dumps({"cubes": len(paths), "directory": str(args.out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        raw = read_config(args.config)
        for item in args.set or []:
            if "=" not in item:
                raise CliConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
            raw[k.strip()] = _parse_scalar(v.strip())
        model_kw, train_kw, run = resolve_config(raw)
    except CliConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    data_dir = Path(args.data or run.get("data", ""))
    out_dir = Path(args.out or run.get("out", "runs/train"))
    if not str(data_dir) or not data_dir.is_dir():
        log.error("dataset directory %r not found", str(data_dir))
        return EXIT_CONFIG
    files = list_cubes(data_dir, "train")
    if not files:
        log.error("no .hsic cubes in %s", data_dir)
        return EXIT_CONFIG
    if "lam" not in train_kw:
        log.warning("lambda not set; using default %g", DEFAULT_LAMBDA)
        train_kw["lam"] = DEFAULT_LAMBDA
    cubes = [load_cube(f)[0][0] for f in files]
    model_kw.setdefault("C", cubes[0].shape[0])
    if "M" in model_kw and "N" not in model_kw:
        model_kw["N"] = 3 * model_kw["M"] // 5
    try:
        mcfg = HyvicConfig(**model_kw)
        tcfg = TrainConfig(**train_kw)
    except (ConfigError, ValueError, TypeError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    snapshot = {"model": {k: getattr(mcfg, k) for k in ("C", "N", "M", "S", "k")}, "train": config_dict(tcfg),
                "data": str(data_dir)}
    manifest = RunManifest(out_dir / "manifest.json", "train", snapshot, seed=tcfg.seed,
                           outputs={"dir": str(out_dir), "final": str(out_dir / "final.hvwt"),
                                    "metrics": str(out_dir / "metrics.csv")})
    try:
        result = train(cubes, mcfg, tcfg, out_dir=out_dir)
    except NonFiniteLossError as exc:
        log.error("%s", exc)
        manifest.finish("nan", error=str(exc))
        return EXIT_NAN
    except ValueError as exc:
        log.error("%s", exc)
        manifest.finish("config-error", error=str(exc))
        return EXIT_CONFIG
    last = result.log[-1]
    manifest.finish("done", steps=len(result.log), final_total=last["total"])
    print(json.dumps({"steps": len(result.log), "final_total": last["total"],
                      "checkpoint": str(result.checkpoints[-1])}))
    return EXIT_OK


def _compress_one(params: ModelParams, src: Path) -> tuple[bytes, dict, CubeFile, np.ndarray]:
    cube = read_cube(src)
    x = cube.normalized()
    b = compress(x, params, bit_depth=cube.bit_depth)
    stats = {
        "cr": compression_ratio(b),
        "bpppc": b.total_bits / x.size,
        "payload_bpppc": b.payload_bits / x.size,
        "bytes": b.total_bits // 8,
    }
    return b.to_bytes(), stats, cube, x


def cmd_compress(args) -> int:
    params = ModelParams.load(args.checkpoint)
    manifest = RunManifest(args.manifest, "compress", {"checkpoint": str(args.checkpoint), "input": str(args.input)},
                           outputs={"bitstream": str(args.output)})
    t0 = time.perf_counter()
    data, stats, _, _ = _compress_one(params, Path(args.input))
    Path(args.output).write_bytes(data)
    stats["wall_s"] = time.perf_counter() - t0
    manifest.finish("done", stats=stats)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def cmd_decompress(args) -> int:
    params = ModelParams.load(args.checkpoint)
    manifest = RunManifest(args.manifest, "decompress", {"checkpoint": str(args.checkpoint), "input": str(args.input)},
                           outputs={"cube": str(args.output)})
    t0 = time.perf_counter()
    b = read_bitstream(args.input)
    try:
        x_hat = decompress(b, params)
    except HashMismatchError as exc:
        log.error("%s", exc)
        manifest.finish("hash-mismatch", error=str(exc))
        return EXIT_HASH
    out = CubeFile(np.clip(x_hat[0], 0.0, 1.0).astype(np.float32), bit_depth=b.bit_depth,
                   metadata={"decoded_by": "hyvic", "source_bit_depth": b.bit_depth})
    save_cube(args.output, out)
    stats = {"cr": compression_ratio(b), "bpppc": b.total_bits / (b.C * b.H * b.W),
             "wall_s": time.perf_counter() - t0}
    manifest.finish("done", stats=stats)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


EVAL_COLUMNS = ("file", "cr", "psnr", "sa", "ssim", "error")


def _eval_one(params: ModelParams, path: Path) -> dict:
    try:
        data, stats, _, x = _compress_one(params, path)
        x_hat = decompress(data, params)
        m = cube_metrics(x, x_hat[0])
        return {"file": path.name, "cr": stats["cr"], **m, "error": ""}
    except Exception as exc:  # recorded per cube, the batch carries on
        return {"file": path.name, "cr": float("nan"), "psnr": float("nan"), "sa": float("nan"),
                "ssim": float("nan"), "error": f"{type(exc).__name__}: {exc}"}


def thread_cap() -> int:
    raw = os.environ.get("HYVIC_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            log.warning("ignoring non-integer HYVIC_THREADS=%r", raw)
    return min(4, os.cpu_count() or 1)


def cmd_eval(args) -> int:
    params = ModelParams.load(args.checkpoint)
    test_dir = Path(args.test_dir)
    if not test_dir.is_dir():
        log.error("test directory %s not found", test_dir)
        return EXIT_CONFIG
    files = sorted(list_cubes(test_dir, args.subset), key=lambda p: p.name)
    if not files:
        log.error("no .hsic cubes in %s", test_dir)
        return EXIT_CONFIG
    out_dir = Path(args.out)
    manifest = RunManifest(out_dir / "manifest.json", "eval",
                           {"checkpoint": str(args.checkpoint), "test_dir": str(test_dir), "subset": args.subset},
                           outputs={"csv": str(out_dir / "per_cube.csv"), "summary": str(out_dir / "summary.json")})
    with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
        rows = list(pool.map(lambda p: _eval_one(params, p), files))
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "per_cube.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([r[c] if c in ("file", "error") else repr(float(r[c])) for c in EVAL_COLUMNS])
    ok = [r for r in rows if not r["error"]]
    failed = [r["file"] for r in rows if r["error"]]
    summary = {"count": len(rows), "failed": failed}
    if ok:
        for key in ("cr", "psnr", "sa", "ssim"):
            summary[key] = summarize([r[key] for r in ok])
    write_json_atomic(out_dir / "summary.json", summary)
    manifest.finish("failed" if failed else "done", failed=failed)
    print(json.dumps({k: summary[k] for k in summary if k != "failed"} | {"failed": len(failed)}, sort_keys=True))
    return EXIT_FAIL if failed else EXIT_OK


def cmd_bdpsnr(args) -> int:
    try:
        a, b = read_curve(args.curve_a), read_curve(args.curve_b)
    except (OSError, ValueError) as exc:
        log.error("cannot read RD curve: %s", exc)
        return EXIT_CONFIG
    try:
        report = bd_report(a, b, log_domain=args.log_domain)
    except NoOverlapError as exc:
        log.error("%s", exc)
        return EXIT_OVERLAP
    if args.out:
        write_json_atomic(args.out, report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hyvic", description="Learned hyperspectral image compression")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic HSIC dataset with a split manifest")
    s.add_argument("out")
    s.add_argument("--count", type=int, default=40)
    s.add_argument("--bands", type=int, default=8)
    s.add_argument("--height", type=int, default=16)
    s.add_argument("--width", type=int, default=16)
    s.add_argument("--bit-depth", type=int, default=12)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config")
    t.add_argument("--data", help="dataset directory (overrides the config)")
    t.add_argument("--out", help="run directory (overrides the config)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="cube.hsic -> stream.hvic")
    c.add_argument("checkpoint")
    c.add_argument("input")
    c.add_argument("output")
    c.add_argument("--manifest")
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="stream.hvic -> cube.hsic (reflectance)")
    d.add_argument("checkpoint")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--manifest")
    d.set_defaults(func=cmd_decompress)

    e = sub.add_parser("eval", help="per-cube CR/PSNR/SA/SSIM over a directory")
    e.add_argument("checkpoint")
    e.add_argument("test_dir")
    e.add_argument("--out", default="eval")
    e.add_argument("--subset", choices=("train", "val", "test"), default=None)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bdpsnr", help="BD-PSNR between two cr,psnr_db CSV curves")
    b.add_argument("curve_a")
    b.add_argument("curve_b")
    b.add_argument("--log-domain", action="store_true")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bdpsnr)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
