"""Command-line interface.

Subcommands: ``gen-data``, ``train``, ``reconstruct``, ``eval``,
``bench-aa`` and ``render``.  Every command writes its outputs into one
directory, staged under a temporary name and renamed into place on
success, together with a ``run.json`` manifest (schema in
``docs/manifest.md``).

Exit codes: 0 success, 2 invalid flags or inputs, 3 runtime failure.
The default data directory is ``$AAHQSNET_DATA`` (``./data`` if unset).
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import os
import shutil
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .estimators import GNLMReconstructor, HQSNetReconstructor
from .fem import ForwardModel, opposite_adjacent_protocol
from .mesh import ElectrodeConfig, build_disk_mesh
from .metrics import eiei, evaluate, locate_pixels
from .newton import EXAMPLE_BENCH_MS, EXAMPLE_BENCH_X0S, newton_aa_benchmark, write_benchmark_csv
from .proxnet import CheckpointError, ProxNetParams
from .render import render_class_map, render_field
from .simdata import DEFAULT_CURRENT, DatasetError, build_dataset, dataset_hash, load_dataset, save_dataset, snr_db

RUN_FORMAT = "aahqsnet-run"
RUN_VERSION = 1
DATA_ENV = "AAHQSNET_DATA"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

CHECKPOINT_FILE = "params.json"
METRICS_FILE = "metrics.csv"


class UsageError(Exception):
    """Bad flags or unusable inputs (exit code 2)."""


def data_dir() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextlib.contextmanager
def staged_dir(out: Path):
    """Yield a scratch directory that replaces ``out`` only on success."""
    out = Path(out)
    tmp = out.with_name(out.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out) if out.is_dir() else out.unlink()
    tmp.rename(out)


def write_manifest(dirpath: Path, args, inputs: dict, outputs: list, results: dict, started: float,
                   seeds: dict | None = None) -> None:
    config = {k: v for k, v in vars(args).items() if k not in ("func", "argv")}
    man = {
        "format": RUN_FORMAT,
        "version": RUN_VERSION,
        "command": args.command,
        "argv": list(getattr(args, "argv", [])),
        "config": config,
        "seeds": seeds or ({"seed": args.seed} if hasattr(args, "seed") else {}),
        "inputs": inputs,
        "outputs": outputs,
        "results": results,
        "timings": {
            "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
            "wall_seconds": time.time() - started,
        },
    }
    (dirpath / "run.json").write_text(json.dumps(man, indent=1, default=_json_default))


def _json_default(o):
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _load_dataset(path):
    try:
        return load_dataset(path)
    except (DatasetError, OSError, KeyError) as exc:
        raise UsageError(f"cannot load dataset {path}: {exc}") from exc


def _forward_model(ds) -> ForwardModel:
    return ForwardModel(ds.mesh, ds.electrodes, ds.protocol)


# -- gen-data -----------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    started = time.time()
    if args.n_train < 0 or args.n_test < 0:
        raise UsageError("--n-train and --n-test must be >= 0")
    if args.eta < 0 or args.current <= 0:
        raise UsageError("--eta must be >= 0 and --current > 0")
    try:
        el = ElectrodeConfig(args.electrodes, args.coverage, args.contact_impedance)
        mesh = build_disk_mesh(args.elements, el)
        protocol = opposite_adjacent_protocol(args.electrodes, args.current)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ds = build_dataset(args.n_train, args.n_test, mesh, el, protocol, eta=args.eta, seed=args.seed,
                       threads=args.threads)
    out = Path(args.out)
    with staged_dir(out) as tmp:
        save_dataset(ds, tmp)
        h = dataset_hash(ds)
        results = {"dataset_hash": h, "n_T": mesh.n_T, "n_M": protocol.n_M, "n_samples": len(ds)}
        write_manifest(tmp, args, {}, [str(out)], results, started)
    print(f"wrote {len(ds)} samples ({mesh.n_T} elements) to {out}; hash {h[:12]}")
    return results


# -- train -----------------------------------------------------------------------

def _hqsnet_from_args(args, model, variant):
    return HQSNetReconstructor(
        model, variant=variant, K=args.K, K1=args.K1, K2=args.K2, m1=args.m1, m2=args.m2, mu=args.mu,
        beta=args.beta, n_layers=args.layers, width=args.width, init=args.init, init_gain=args.init_gain,
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed, threads=args.threads)


def _variant(no_gn: bool, no_lpgd: bool) -> str:
    return {(False, False): "aa-hqsnet", (True, True): "hqsnet",
            (False, True): "aa_gn", (True, False): "aa_lpgd"}[(no_gn, no_lpgd)]


def cmd_train(args) -> dict:
    started = time.time()
    ds = _load_dataset(args.data)
    idx = ds.indices("train")
    if not idx:
        raise UsageError("dataset has no training samples")
    V, S = ds.arrays("train")
    model = _forward_model(ds)
    variant = _variant(args.no_aa_gn, args.no_aa_lpgd)
    try:
        est = _hqsnet_from_args(args, model, variant)
        est.recon_config(), est.train_config(), est.initial_params()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    est.fit(V, S, callback=lambda e, l: print(f"epoch {e + 1}: loss {l:.6g}", flush=True))
    out = Path(args.out)
    with staged_dir(out) as tmp:
        est.params_.save(tmp / CHECKPOINT_FILE)
        results = {"variant": variant, "epoch_losses": est.loss_curve_,
                   "recon_config": est.recon_config().__dict__, "train_config": est.train_config().__dict__,
                   "architecture": {"n_layers": est.params_.n_layers, "width": est.params_.width}}
        inputs = {str(args.data): dataset_hash(ds)}
        write_manifest(tmp, args, inputs, [str(out / CHECKPOINT_FILE)], results, started)
    print(f"saved checkpoint to {out / CHECKPOINT_FILE}")
    return results


# -- reconstruct / eval ----------------------------------------------------------

def _checkpoint(path) -> tuple[ProxNetParams, dict]:
    path = Path(path)
    ckpt = path / CHECKPOINT_FILE if path.is_dir() else path
    try:
        params = ProxNetParams.load(ckpt)
    except (OSError, CheckpointError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {ckpt}: {exc}") from exc
    run = ckpt.parent / "run.json"
    recon = json.loads(run.read_text())["results"].get("recon_config", {}) if run.exists() else {}
    return params, recon


def _metric_rows(ds, idx, preds, V, tau, owner):
    rows, labels = [], []
    for k, i in enumerate(idx):
        truth = ds.sigmas[i]
        m = evaluate(preds[k], truth, ds.mesh, tau=tau, owner=owner)
        m["snr"] = snr_db(ds.v_clean[i], V[k])
        rows.append({"index": i, **m})
        labels.append(eiei(preds[k], truth, ds.mesh, tau=tau).labels)
    return rows, labels


def _write_metrics(tmp: Path, rows, labels) -> dict:
    with open(tmp / METRICS_FILE, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["index", "mse", "ssim", "eiei", "dr", "snr"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (r[k] if k == "index" else repr(float(r[k]))) for k in w.fieldnames})
    for r, lab in zip(rows, labels):
        lab.astype(np.int8).tofile(tmp / f"labels_{r['index']}.i8")
    return {k: float(np.mean([r[k] for r in rows])) if rows else float("nan")
            for k in ("mse", "ssim", "eiei", "dr", "snr")}


def cmd_reconstruct(args) -> dict:
    started = time.time()
    ds = _load_dataset(args.data)
    idx = ds.indices(args.split)
    eta = ds.eta if args.eta is None else args.eta
    if eta < 0:
        raise UsageError("--eta must be >= 0")
    V, _ = ds.arrays(args.split, eta)
    model = _forward_model(ds)
    inputs = {str(args.data): dataset_hash(ds)}
    info: dict = {"method": args.method, "eta": eta, "split": args.split}
    if args.method == "gn-lm":
        est = GNLMReconstructor(model, threads=args.threads)
        if args.lm_lambda is not None:
            est.set_fitted_params(args.lm_lambda, args.lm_iters)
        else:
            Vt, St = ds.arrays("train")
            if not len(Vt):
                raise UsageError("no training split to tune GN-LM on; pass --lm-lambda")
            est.fit(Vt, St)
        info.update(lm_lambda=est.lm_lambda_, lm_iters=est.iters_)
    else:
        if args.checkpoint is None:
            raise UsageError(f"--checkpoint is required for method {args.method}")
        params, saved = _checkpoint(args.checkpoint)
        inputs[str(args.checkpoint)] = file_hash(Path(args.checkpoint) / CHECKPOINT_FILE
                                               if Path(args.checkpoint).is_dir() else args.checkpoint)
        keys = ("K", "K1", "K2", "m1", "m2", "mu", "beta", "floor")
        cfg = {k: saved[k] for k in keys if k in saved}
        for k in keys:
            if getattr(args, k, None) is not None:
                cfg[k] = getattr(args, k)
        try:
            est = HQSNetReconstructor(model, variant=args.method, threads=args.threads, **cfg)
            est.recon_config()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        est.set_fitted_params(params)
        info["recon_config"] = est.recon_config().__dict__
    preds = est.predict(V) if len(V) else np.zeros((0, ds.mesh.n_T))
    owner = locate_pixels(ds.mesh)
    rows, labels = _metric_rows(ds, idx, preds, V, args.tau, owner)
    out = Path(args.out)
    with staged_dir(out) as tmp:
        for i, p in zip(idx, preds):
            p.astype("<f8").tofile(tmp / f"sigma_{i}.f64")
        means = _write_metrics(tmp, rows, labels)
        results = {**info, "n_samples": len(idx), "mean_metrics": means}
        write_manifest(tmp, args, inputs, [str(out)], results, started)
    print(f"{args.method}: {len(idx)} samples, mean MSE {means['mse']:.4g}, SSIM {means['ssim']:.4f}")
    return results


def cmd_eval(args) -> dict:
    started = time.time()
    ds = _load_dataset(args.data)
    recon = Path(args.recon)
    idx = ds.indices(args.split)
    eta = ds.eta if args.eta is None else args.eta
    V, _ = ds.arrays(args.split, eta)
    preds = []
    for i in idx:
        f = recon / f"sigma_{i}.f64"
        a = np.fromfile(f, dtype="<f8") if f.exists() else None
        if a is None or a.size != ds.mesh.n_T:
            raise UsageError(f"missing or malformed reconstruction {f}")
        preds.append(a)
    rows, labels = _metric_rows(ds, idx, preds, V, args.tau, locate_pixels(ds.mesh))
    out = Path(args.out)
    with staged_dir(out) as tmp:
        means = _write_metrics(tmp, rows, labels)
        results = {"n_samples": len(idx), "eta": eta, "mean_metrics": means}
        write_manifest(tmp, args, {str(args.data): dataset_hash(ds)}, [str(out)], results, started)
    print(f"{len(idx)} samples, mean MSE {means['mse']:.4g}")
    return results


# -- bench-aa --------------------------------------------------------------------

def _parse_point(text: str) -> tuple[float, float]:
    try:
        x = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y but got {text!r}") from None
    if len(x) != 2:
        raise argparse.ArgumentTypeError(f"expected two coordinates, got {text!r}")
    return x


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_bench_aa(args) -> dict:
    started = time.time()
    if args.iters < 0 or min(args.m) < 0 or not 0 < args.beta <= 1:
        raise UsageError("--iters and --m must be >= 0 and --beta in (0, 1]")
    x0s = args.x0 or list(EXAMPLE_BENCH_X0S)
    runs = newton_aa_benchmark(x0s, args.m, max_iters=args.iters, beta=args.beta, tol=args.tol,
                               methods=args.methods)
    out = Path(args.out)
    with staged_dir(out) as tmp:
        write_benchmark_csv(runs, tmp / "bench.csv")
        summary = [{"method": r.method, "m": r.m, "x0_id": r.x0_id, "beta": r.beta, "status": r.status,
                    "iterations": max(len(r.f_norms) - 1, 0),
                    "final_f_norm": r.f_norms[-1] if r.f_norms else None} for r in runs]
        results = {"x0": [list(x) for x in x0s], "runs": summary}
        write_manifest(tmp, args, {}, [str(out / "bench.csv")], results, started, seeds={})
    for s in summary:
        print(f"{s['method']:>4} m={s['m']:<2} x0#{s['x0_id']} beta={s['beta']:g} "
              f"{s['status']} final |f|={s['final_f_norm']}")
    return results


# -- render ----------------------------------------------------------------------

def cmd_render(args) -> dict:
    started = time.time()
    ds = _load_dataset(args.data)
    idx = ds.indices(args.split) if args.index is None else [args.index]
    if any(i < 0 or i >= len(ds) for i in idx):
        raise UsageError(f"sample index out of range (dataset has {len(ds)} samples)")
    recon = Path(args.recon) if args.recon else None
    out = Path(args.out)
    written = []
    with staged_dir(out) as tmp:
        for i in idx:
            render_field(ds.mesh, ds.sigmas[i], tmp / f"truth_{i}.svg", title=f"ground truth {i}")
            written.append(f"truth_{i}.svg")
            if recon is None:
                continue
            s = recon / f"sigma_{i}.f64"
            if s.exists():
                render_field(ds.mesh, _read_vec(s, "<f8", ds.mesh.n_T), tmp / f"recon_{i}.svg",
                             title=f"reconstruction {i}")
                written.append(f"recon_{i}.svg")
            lab = recon / f"labels_{i}.i8"
            if lab.exists():
                render_class_map(ds.mesh, _read_vec(lab, np.int8, ds.mesh.n_T), tmp / f"classes_{i}.svg",
                                 title=f"class map {i}")
                written.append(f"classes_{i}.svg")
        write_manifest(tmp, args, {str(args.data): dataset_hash(ds)}, written, {"files": written}, started,
                       seeds={})
    print(f"wrote {len(written)} SVG files to {out}")
    return {"files": written}


def _read_vec(path, dtype, n):
    a = np.fromfile(path, dtype=dtype)
    if a.size != n:
        raise UsageError(f"{path} holds {a.size} values, expected {n}")
    return a


# -- argument parsing --------------------------------------------------------------

def _add_recon_flags(p, defaults: bool):
    d = (lambda v: v) if defaults else (lambda v: None)
    p.add_argument("--K", type=int, default=d(8), help="outer folds")
    p.add_argument("--K1", type=int, default=d(2), help="Gauss-Newton(-AA) iterations per fold")
    p.add_argument("--K2", type=int, default=d(2), help="LPGD(-AA) iterations per fold")
    p.add_argument("--m1", type=int, default=d(2), help="Gauss-Newton AA depth")
    p.add_argument("--m2", type=int, default=d(2), help="LPGD AA depth")
    p.add_argument("--mu", type=float, default=d(1.0), help="coupling weight")
    p.add_argument("--beta", type=float, default=d(1.0), help="AA damping")
    p.add_argument("--floor", type=float, default=d(1e-2), help="conductivity floor for forward solves")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aahqsnet", description="Anderson-accelerated unrolled EIT reconstruction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate a phantom dataset")
    p.add_argument("--out", type=Path, default=None, help="dataset directory (default $AAHQSNET_DATA/dataset)")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--elements", type=int, default=660, help="target element count")
    p.add_argument("--electrodes", type=int, default=16)
    p.add_argument("--coverage", type=float, default=0.5, help="fraction of the boundary under electrodes")
    p.add_argument("--contact-impedance", type=float, default=0.01)
    p.add_argument("--current", type=float, default=DEFAULT_CURRENT, help="injected current amplitude")
    p.add_argument("--eta", type=float, default=5e-3, help="relative noise level for training")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the proximal network")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    _add_recon_flags(p, True)
    p.add_argument("--no-aa-gn", action="store_true", help="disable AA in the Gauss-Newton step")
    p.add_argument("--no-aa-lpgd", action="store_true", help="disable AA in the LPGD step")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--init", choices=("passthrough", "he"), default="passthrough")
    p.add_argument("--init-gain", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct a split and evaluate it")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--method", choices=("aa-hqsnet", "hqsnet", "gn-lm"), default="aa-hqsnet")
    p.add_argument("--checkpoint", type=Path, default=None, help="checkpoint directory or params.json")
    p.add_argument("--split", default="test")
    p.add_argument("--eta", type=float, default=None, help="noise level (default: the dataset's)")
    p.add_argument("--tau", type=float, default=0.25, help="EIEI classification threshold")
    p.add_argument("--lm-lambda", type=float, default=None, help="GN-LM initial damping (default: tuned)")
    p.add_argument("--lm-iters", type=int, default=10)
    _add_recon_flags(p, False)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="compute metrics of saved reconstructions")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--recon", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--tau", type=float, default=0.25)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench-aa", help="Newton-AA / Gauss-Newton-AA on the two-variable test system")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--x0", type=_parse_point, action="append", help="start point x,y (repeatable; default: a fixed set of four)")
    p.add_argument("--m", type=_parse_ints, default=list(EXAMPLE_BENCH_MS), help="AA depths, e.g. 1,2,5")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-14)
    p.add_argument("--methods", type=lambda s: s.split(","), default=["NAA", "GNAA"])
    p.set_defaults(func=cmd_bench_aa)

    p = sub.add_parser("render", help="SVG maps of ground truths, reconstructions and class labels")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--recon", type=Path, default=None, help="output directory of reconstruct")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=None, help="render one sample only")
    p.set_defaults(func=cmd_render)

    for name, sp in sub.choices.items():
        sp.add_argument("--threads", type=int, default=1, help="parallel samples")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    args.argv = argv
    if getattr(args, "data", "") is None:
        args.data = data_dir() / "dataset"
    if args.command == "gen-data" and args.out is None:
        args.out = data_dir() / "dataset"
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "methods", None) and not set(args.methods) <= {"NAA", "GNAA"}:
        print("error: --methods accepts NAA and GNAA", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
