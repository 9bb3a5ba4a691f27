"""``crossview`` command line: gen-data, train, eval, infer, gradcheck, bench.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgio

log = logging.getLogger("crossview")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# resolved configuration
# --------------------------------------------------------------------------


def _echo_config(args, out: Path | None, extra: dict | None = None) -> str:
    """Every flag value (defaults included) plus resolved sub-configs, as ``key = json`` lines."""
    items = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    items = {k: (str(v) if isinstance(v, Path) else v) for k, v in items.items()}
    lines = [f"{k} = {json.dumps(v)}\n" for k, v in items.items()]
    for prefix, obj in (extra or {}).items():
        lines += [f"{prefix}.{k} = {json.dumps(v)}\n" for k, v in cfgio.to_items(obj)]
    text = "".join(lines)
    sys.stdout.write(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(text)
    return text


def _parse_overrides(pairs) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = (s.strip() for s in p.split("=", 1))
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _split_prefixed(values: dict) -> tuple[dict, dict]:
    model, train = {}, {}
    for k, v in values.items():
        head, _, rest = k.partition(".")
        if head == "model" and rest:
            model[rest] = v
        elif head == "train" and rest:
            train[rest] = v
        else:
            raise UsageError(f"config key {k!r} must start with 'model.' or 'train.'")
    return model, train


def resolve_configs(args):
    from .model import ModelConfig
    from .training import TrainConfig

    values = cfgio.parse(Path(args.config).read_text()) if args.config else {}
    values.update(_parse_overrides(args.set))
    mvals, tvals = _split_prefixed(values)
    try:
        mcfg = cfgio.apply(ModelConfig(), mvals)
        tcfg = cfgio.apply(TrainConfig(), tvals)
    except KeyError as e:
        raise UsageError(str(e)) from None
    # dedicated flags win over the config file
    flag_train = {"lr": args.lr, "epochs": args.epochs, "batch_size": args.batch_size, "loc_loss": args.loc_loss}
    tcfg = dataclasses.replace(tcfg, **{k: v for k, v in flag_train.items() if v is not None})
    if args.fovs:
        tcfg = dataclasses.replace(tcfg, fovs=tuple(args.fovs))
    tcfg = dataclasses.replace(tcfg, seed=args.seed)
    mflags = {}
    if args.lmu_levels:
        mflags["lmu_levels"] = tuple(args.lmu_levels)
    if args.no_omu:
        mflags["use_omu"] = False
    mcfg = dataclasses.replace(mcfg, seed=args.seed, **mflags)
    return mcfg, tcfg


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .synthdata import build_dataset

    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise FileExistsError(f"{out} is not empty (pass --overwrite to replace it)")
    _echo_config(args, None)
    build_dataset(out, args.n, args.seed, args.split, n_scenes=args.scenes, overwrite=args.overwrite)
    (out / "config.resolved").write_text(
        "".join(f"{k} = {json.dumps(str(v) if isinstance(v, Path) else v)}\n"
                for k, v in sorted(vars(args).items()) if k != "func")
    )
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_losses
    from .synthdata import load_dataset
    from .training import train

    mcfg, tcfg = resolve_configs(args)
    out = Path(args.out)
    _echo_config(args, None, {"model": mcfg, "train": tcfg})
    data = load_dataset(args.data)

    def progress(row):
        if args.verbose:
            print(",".join(f"{row[k]:.6g}" if isinstance(row[k], float) else str(row[k]) for k in row), flush=True)

    res = train(data, mcfg, tcfg, out=out, resume=args.resume, progress=progress)
    if res.losses:
        plot_losses(res.losses, out / "losses.png")
    print(f"trained {len(res.losses)} steps in {res.seconds:.1f}s; checkpoints: {len(res.checkpoints)}")
    if res.skipped:
        print(f"skipped samples (non-finite gradients): {','.join(res.skipped)}")
    return EXIT_OK


def _load_checkpoint(path):
    from .model import CrossViewModel
    from .training import latest_checkpoint

    p = Path(path)
    if not (p / "manifest.txt").exists():
        ck = latest_checkpoint(p)
        if ck is None:
            raise FileNotFoundError(f"no checkpoint found at {p}")
        p = ck
    return CrossViewModel.load(p)


def _check_data(model, data):
    from .training import check_compatible

    check_compatible(data, model.cfg)


def cmd_eval(args) -> int:
    from .evaluation import curve_rows, evaluate, predict_dataset, sweep, write_curves, write_report
    from .plotting import plot_curves
    from .synthdata import load_dataset

    out = Path(args.out)
    _echo_config(args, out)
    model = _load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    _check_data(model, data)
    preds = predict_dataset(model, data, args.fov, args.prior_delta)
    report = evaluate(preds, data.poses, data.scale)
    write_report(report, out / "report.csv")
    sweeps = []
    if args.sweep_prior:
        sweeps += sweep(model, data, "prior_delta", args.sweep_prior)
    if args.sweep_fov:
        sweeps += sweep(model, data, "fov", args.sweep_fov)
    rows = curve_rows(report, sweeps)
    write_curves(rows, out / "curves.csv")
    if not args.no_plots:
        plot_curves(rows, out)
    print(f"median localization {report.median_loc:.3f} m, median orientation {report.median_ori:.2f} deg "
          f"over {report.count} samples")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .evaluation import predict_dataset
    from .plotting import plot_prediction
    from .synthdata import load_dataset
    from .tensor import io

    out = Path(args.out)
    _echo_config(args, out)
    model = _load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    _check_data(model, data)
    if args.limit:
        data = data.subset(range(min(args.limit, len(data))))
    centers = None
    if args.prior_delta is not None and args.prior_center is not None:
        centers = [args.prior_center] * len(data)
    preds = predict_dataset(model, data, args.fov, args.prior_delta, prior_centers=centers)
    lines = []
    for rec, est in zip(data.records, preds):
        lines.append(json.dumps({
            "id": rec["id"], "u": est.pose.u, "v": est.pose.v, "heading": est.pose.heading,
            "confidence": est.confidence, "pixel": list(est.pixel),
        }, sort_keys=True))
        if args.dump_maps:
            io.save(out / f"D_{rec['id']}.cvt", est.distribution)
            io.save(out / f"Y_{rec['id']}.cvt", est.field)
    (out / "predictions.jsonl").write_text("\n".join(lines) + "\n")
    for i in range(min(args.figures, len(data))):
        plot_prediction(data.ground[i], data.aerial[i], preds[i], data.poses[i], out / f"pred_{data.records[i]['id']}.png")
    print(f"wrote {len(preds)} predictions to {out / 'predictions.jsonl'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .losses import loss_suite
    from .tensor import grad_check, primitive_suite

    _echo_config(args, Path(args.out) if args.out else None)
    suite = {**primitive_suite(), **loss_suite()}
    rows, ok = [], True
    t0 = time.perf_counter()
    for name, spec in suite.items():
        res = grad_check(trials=args.trials, seed=args.seed, name=name, **spec)
        ok &= res.passed
        rows.append((name, res.max_rel_error, res.trials, res.passed))
        print(f"{name:32s} max_rel_error={res.max_rel_error:.3e} trials={res.trials} "
              f"{'PASS' if res.passed else 'FAIL'}", flush=True)
    print(f"{len(rows)} checks in {time.perf_counter() - t0:.1f}s: {'all passed' if ok else 'FAILURES'}")
    if args.out:
        with (Path(args.out) / "gradcheck.csv").open("w") as f:
            f.write("op,max_rel_error,trials,passed\n")
            f.writelines(f"{n},{e!r},{t},{int(p)}\n" for n, e, t, p in rows)
    return EXIT_OK if ok else EXIT_RUNTIME


def bench_forward(model, batch: int, runs: int, warmup: int, seed: int = 0) -> np.ndarray:
    """Wall-clock seconds of ``runs`` inference forward passes on random inputs."""
    from .tensor import no_grad

    cfg = model.cfg
    rng = np.random.default_rng(seed)
    g = rng.random((batch, cfg.ground_h, cfg.ground_w, 3)).astype(np.float32)
    a = rng.random((batch, cfg.L, cfg.L, 3)).astype(np.float32)
    times = []
    with no_grad():
        for i in range(warmup + runs):
            t = time.perf_counter()
            model.forward(g, a)
            if i >= warmup:
                times.append(time.perf_counter() - t)
    return np.asarray(times)


def cmd_bench(args) -> int:
    from .model import CrossViewModel, ModelConfig

    out = Path(args.out) if args.out else None
    _echo_config(args, out)
    model = _load_checkpoint(args.checkpoint) if args.checkpoint else CrossViewModel(ModelConfig(seed=args.seed))
    t = bench_forward(model, args.batch, args.runs, args.warmup, args.seed) * 1000.0
    p50, p95 = np.percentile(t, 50), np.percentile(t, 95)
    print(f"forward batch={args.batch} runs={args.runs}: p50={p50:.2f} ms p95={p95:.2f} ms "
          f"mean={t.mean():.2f} ms min={t.min():.2f} ms")
    if out is not None:
        (out / "bench.csv").write_text(
            "statistic,ms\n" + "".join(f"{k},{v!r}\n" for k, v in
                                        (("p50", p50), ("p95", p95), ("mean", t.mean()), ("min", t.min())))
        )
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _positive_int(s: str) -> int:
    v = int(s)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="single source of all randomness")
    common.add_argument("--threads", type=_positive_int, default=1, help="cap on BLAS/internal threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="crossview", description="Fine-grained cross-view pose estimation on a toy world.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    g.add_argument("--n", type=_positive_int, required=True)
    g.add_argument("--split", choices=("train", "same", "cross"), default="train")
    g.add_argument("--scenes", type=_positive_int, default=20, help="scenes per scene pool")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--config", type=Path, help="plain-text config with model.* / train.* keys")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    t.add_argument("--lr", type=float)
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--batch-size", type=_positive_int)
    t.add_argument("--loc-loss", choices=("ce", "wasserstein"))
    t.add_argument("--fovs", type=float, nargs="+", help="FoV augmentation set (degrees)")
    t.add_argument("--lmu-levels", type=int, nargs="+", help="decoder levels that use matching scores")
    t.add_argument("--no-omu", action="store_true", help="orientation decoder without matching volume")
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="metrics, curves and sweeps for a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--fov", type=float, default=360.0)
    e.add_argument("--prior-delta", type=float, help="orientation prior half-width centered on gt heading")
    e.add_argument("--sweep-prior", type=float, nargs="+", metavar="DELTA")
    e.add_argument("--sweep-fov", type=float, nargs="+", metavar="FOV")
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="per-sample pose predictions")
    i.add_argument("--checkpoint", type=Path, required=True)
    i.add_argument("--data", type=Path, required=True)
    i.add_argument("--out", type=Path, required=True)
    i.add_argument("--fov", type=float, default=360.0)
    i.add_argument("--prior-delta", type=float)
    i.add_argument("--prior-center", type=float, help="prior center (default: each sample's gt heading)")
    i.add_argument("--limit", type=_positive_int)
    i.add_argument("--dump-maps", action="store_true", help="write D and Y per sample as CVT1 tensors")
    i.add_argument("--figures", type=int, default=0, help="render this many prediction figures")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and loss")
    c.add_argument("--trials", type=_positive_int, default=100)
    c.add_argument("--out", type=Path)
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", parents=[common], help="forward-pass latency")
    b.add_argument("--checkpoint", type=Path)
    b.add_argument("--runs", type=_positive_int, default=50)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--batch", type=_positive_int, default=1)
    b.add_argument("--out", type=Path)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = getattr(args, "out", None)
    existed = out is not None and Path(out).exists()
    try:
        from threadpoolctl import threadpool_limits

        ctx = threadpool_limits(limits=args.threads)
    except ImportError:  # pragma: no cover - declared dependency
        ctx = nullcontext()
    try:
        with ctx:
            return args.func(args)
    except UsageError as e:
        print(f"crossview: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, RuntimeError, FloatingPointError) as e:
        print(f"crossview: {type(e).__name__}: {e}", file=sys.stderr)
        # only remove output directories this invocation created
        if out is not None and not existed and Path(out).exists():
            shutil.rmtree(out, ignore_errors=True)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
