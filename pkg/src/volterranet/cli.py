"""``volt`` command line: train, gradcheck, bench, analyze, count.

Exit codes: 0 success, 1 failed check, 2 usage error, 3 I/O or format error.
Settings resolve as built-in defaults < ``--config`` key=value file (or
``--from-manifest``) < explicit flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from contextlib import nullcontext

import numpy as np

from . import __version__, analysis, bench, checkpoint, gradcheck, plotting
from .data import (
    FormatError,
    LabeledImageSet,
    apply_normalization,
    compute_stats,
    load_cifar_binary,
    make_synthetic_set,
    rms_patch_norm,
)
from .kernels import VolterraFilterBank, volterra_param_count
from .layers import NetworkSpec, build_network
from .trainer import TrainConfig, history_csv, load_network, table2_schedule, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("volt")


class UsageError(Exception):
    pass


TRAIN_DEFAULTS = {
    "data": None,
    "dataset": "synthetic",
    "depth": 28,
    "widen": 10,
    "first_layer": "volterra",
    "batch": 128,
    "momentum": 0.9,
    "epochs": 220,
    "dropout": 0.3,
    "schedule": "table2",
    "nesterov": False,
    "seed": None,
    "deterministic": False,
    "augment": "auto",
    "checkpoint_every": 0,
    "dtype": "float64",
    "interaction": "cross",
    "w2_init": "zero",
    "train_size": 2000,
    "test_size": 500,
    "image_size": 8,
    "channels": 3,
    "margin": 0.5,
    "tail": 1.0,
    "scale": 0.04,
    "classes": 2,
    "synthetic_kind": "quadratic",
    "subset": 0,
}
GRADCHECK_DEFAULTS = {"configs": 50, "n": None, "seed": None, "deterministic": False, "step": 1e-5, "tol": 1e-5,
                      "network": False}
BENCH_DEFAULTS = {"sizes": "8,12,16,20,24,28,32", "batch": 4, "repeats": 3, "seed": None, "deterministic": False}
ANALYZE_DEFAULTS = {"checkpoint": None, "filters": "0..15", "rho_grid": "default", "bins": 50}
COUNT_DEFAULTS = {"n": None, "r": 2, "depth": None, "widen": 1, "classes": 10, "in_channels": 3}


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def read_config_file(path, defaults: dict) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in defaults:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _coerce(value, defaults[key]) if defaults[key] is not None else value
    return out


def resolve(args, defaults: dict) -> dict:
    cfg = dict(defaults)
    if getattr(args, "from_manifest", None):
        with open(args.from_manifest) as fh:
            cfg.update({k: v for k, v in json.load(fh)["config"].items() if k in defaults})
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config, defaults))
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key, like in defaults.items():
        if isinstance(cfg[key], str) and like is not None and not isinstance(like, str):
            cfg[key] = _coerce(cfg[key], like)
    if cfg.get("deterministic") and cfg.get("seed") is None:
        raise UsageError("--deterministic requires an explicit --seed")
    if "seed" in cfg and cfg["seed"] is None:
        cfg["seed"] = 0
    if "seed" in cfg:
        cfg["seed"] = int(cfg["seed"])
    return cfg


def build_id() -> str:
    try:
        here = os.path.dirname(os.path.abspath(__file__))
        desc = subprocess.run(
            ["git", "describe", "--always", "--tags"], cwd=here, capture_output=True, text=True, timeout=5
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def prepare_out(path, force: bool) -> str:
    if os.path.exists(path) and not os.path.isdir(path):
        raise UsageError(f"--out {path} exists and is not a directory")
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise UsageError(f"--out {path} is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)
    return path


def write_manifest(out, command: str, cfg: dict, artifacts: list[str], extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg,
        "artifacts": sorted(artifacts),
        "build_id": build_id(),
        "seed": cfg.get("seed"),
    }
    if extra:
        manifest.update(extra)
    checkpoint.atomic_write(
        os.path.join(out, "manifest.json"), (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
    )


def thread_limit(n):
    if n is None:
        env = os.environ.get("VOLT_THREADS")
        n = int(env) if env else None
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def parse_index_list(text: str, upper: int) -> list[int]:
    """``"0..15"``, ``"1,4,7"`` or ``"all"``; clipped to ``upper``."""
    if text == "all":
        return list(range(upper))
    out = []
    for part in text.split(","):
        if ".." in part:
            a, b = part.split("..")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    bad = [i for i in out if not 0 <= i < upper]
    if bad:
        raise UsageError(f"filter indices {bad} out of range 0..{upper - 1}")
    return out


# --------------------------------------------------------------------- commands


def load_datasets(cfg) -> tuple[LabeledImageSet, LabeledImageSet]:
    ds = cfg["dataset"]
    if ds == "synthetic":
        seed = cfg["seed"]
        kw = {"kind": cfg["synthetic_kind"], "size": cfg["image_size"], "channels": cfg["channels"]}
        if cfg["synthetic_kind"] == "quadratic":
            kw.update(margin=cfg["margin"], tail=cfg["tail"], scale=cfg["scale"])
        train_set = make_synthetic_set(cfg["classes"], cfg["train_size"], seed, **kw)
        test_set = make_synthetic_set(cfg["classes"], cfg["test_size"], seed + 1_000_003, **kw)
        return train_set, test_set
    if not cfg["data"]:
        raise UsageError(f"--data is required for {ds}")
    if not os.path.isdir(cfg["data"]):
        raise FileNotFoundError(f"data directory {cfg['data']} does not exist")
    names = (
        (["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
         ["test_batch.bin"])
        if ds == "cifar10" else (["train.bin"], ["test.bin"])
    )
    parts = []
    for group in names:
        sets = [load_cifar_binary(os.path.join(cfg["data"], f), ds) for f in group]
        parts.append(LabeledImageSet(
            np.concatenate([s.images for s in sets]), np.concatenate([s.labels for s in sets]), sets[0].num_classes
        ))
    train_set, test_set = parts
    if cfg["subset"]:
        train_set = train_set.subset(slice(0, cfg["subset"]))
        test_set = test_set.subset(slice(0, max(cfg["subset"] // 5, 1)))
    return train_set, test_set


def cmd_train(args) -> int:
    cfg = resolve(args, TRAIN_DEFAULTS)
    if cfg["schedule"] != "table2":
        raise UsageError("only the 'table2' schedule preset is available")
    try:
        spec = NetworkSpec(
            depth=cfg["depth"], widen=cfg["widen"], num_classes=cfg["classes"],
            in_channels=cfg["channels"] if cfg["dataset"] == "synthetic" else 3,
            first_layer=cfg["first_layer"], dropout=cfg["dropout"], interaction=cfg["interaction"],
            w2_init=cfg["w2_init"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = prepare_out(args.out, args.force)
    train_set, test_set = load_datasets(cfg)
    if cfg["dataset"] != "synthetic":
        spec = NetworkSpec(**{**spec.__dict__, "num_classes": train_set.num_classes})
        cfg["classes"] = train_set.num_classes
    stats = compute_stats(train_set)
    train_set, test_set = apply_normalization(train_set, stats), apply_normalization(test_set, stats)
    augment = cfg["augment"]
    if augment == "auto":
        augment = cfg["dataset"] != "synthetic"
    elif isinstance(augment, str):
        augment = _coerce(augment, True)
    config = TrainConfig(
        batch_size=cfg["batch"], momentum=cfg["momentum"], epochs=cfg["epochs"], dropout=cfg["dropout"],
        schedule=table2_schedule(cfg["epochs"]), seed=cfg["seed"], deterministic=cfg["deterministic"],
        nesterov=cfg["nesterov"], augment=augment, checkpoint_every=cfg["checkpoint_every"],
    )
    net = build_network(spec, seed=cfg["seed"], dtype=np.dtype(cfg["dtype"]))
    extra = {
        "norm_mean": stats.mean.tolist(),
        "norm_std": stats.std.tolist(),
        "patch_rms": rms_patch_norm(train_set.images),
        "num_params": net.num_params,
    }
    history = train(net, train_set, test_set, config, out_dir=out, extra_meta=extra)
    plotting.history_figure(history, os.path.join(out, "history.svg"))
    artifacts = sorted(f for f in os.listdir(out) if f != "manifest.json")
    write_manifest(out, "train", cfg, artifacts, {"final_test_error": history[-1]["test_error"]})
    print(history_csv(history[-1:]).strip())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = resolve(args, GRADCHECK_DEFAULTS)
    n_values = (cfg["n"],) if cfg["n"] else (4, 9, 27)
    for n in n_values:
        if n not in gradcheck.PATCH_SHAPES:
            raise UsageError(f"--n must be one of {sorted(gradcheck.PATCH_SHAPES)}")
    result = gradcheck.run_suite(cfg["configs"], cfg["seed"], n_values, cfg["step"], cfg["tol"])
    worst = result.max_by_group()
    lines = [f"{k}\t{v:.3e}" for k, v in worst.items()]
    ok = result.passed
    if cfg["network"]:
        for kind in ("linear", "volterra"):
            spec = NetworkSpec(10, 1, 3, 3, kind, dropout=0.0)
            err = float(gradcheck.check_network(spec, cfg["seed"]).max())
            lines.append(f"network_{kind}\t{err:.3e}")
            ok = ok and err < 1e-4
    print("group\tmax_rel_error")
    print("\n".join(lines))
    if args.out:
        out = prepare_out(args.out, args.force)
        with open(os.path.join(out, "gradcheck.tsv"), "w") as fh:
            fh.write("group\tmax_rel_error\n" + "\n".join(lines) + "\n")
        write_manifest(out, "gradcheck", cfg, ["gradcheck.tsv"], {"passed": ok})
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK


def cmd_bench(args) -> int:
    cfg = resolve(args, BENCH_DEFAULTS)
    try:
        sizes = [int(s) for s in str(cfg["sizes"]).split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --sizes: {cfg['sizes']}") from exc
    if len(sizes) < 2:
        raise UsageError("need at least two sizes to fit a line")
    out = prepare_out(args.out, args.force)
    rows = bench.run_sweep(sizes, batch=cfg["batch"], repeats=cfg["repeats"], seed=cfg["seed"])
    slope, intercept, r2 = bench.input_grad_fit(rows)
    with open(os.path.join(out, "bench.csv"), "w", newline="") as fh:
        fh.write(bench.to_csv(rows))
    locs = [r["out_locations"] for r in rows if r["kind"] == "volterra"]
    series = {
        f"{kind} {op}": [r[f"{op}_s"] for r in rows if r["kind"] == kind]
        for kind in ("linear", "volterra") for op in ("input_grad",)
    }
    series["volterra forward"] = [r["forward_s"] for r in rows if r["kind"] == "volterra"]
    plotting.bench_figure(locs, series, os.path.join(out, "bench.svg"), fit=(slope, intercept, r2))
    write_manifest(out, "bench", cfg, ["bench.csv", "bench.svg"], {"input_grad_fit_r2": r2})
    print(bench.to_csv(rows), end="")
    print(f"volterra input-grad vs Ho*Wo: slope={slope:.3e} s/location, R^2={r2:.4f}")
    if r2 < 0.8:
        print("FAIL: input-gradient time is not linear in the output size (R^2 < 0.8)")
        return EXIT_CHECK
    if r2 < 0.9:
        print("warning: R^2 below 0.9; timing noise?")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = resolve(args, ANALYZE_DEFAULTS)
    if not cfg["checkpoint"]:
        raise UsageError("--checkpoint is required")
    net, meta = load_network(cfg["checkpoint"])
    out = prepare_out(args.out, args.force)
    bank = net.first_conv.bank
    artifacts = []

    hists = {"linear": analysis.weight_histogram(bank, "linear", cfg["bins"])}
    if isinstance(bank, VolterraFilterBank):
        hists["quadratic"] = analysis.weight_histogram(bank, "quadratic", cfg["bins"])
    for part, h in hists.items():
        name = f"hist_{part}.csv"
        with open(os.path.join(out, name), "w", newline="") as fh:
            fh.write(h.to_csv())
        artifacts.append(name)
    artifacts.append(os.path.basename(plotting.histogram_figure(hists, os.path.join(out, "histograms.svg"))))
    summary = {part: {"mean": h.mean, "std": h.std} for part, h in hists.items()}

    filters = parse_index_list(cfg["filters"], bank.geom.out_channels)
    if cfg["rho_grid"] == "default":
        rho = analysis.default_rho_grid(meta.get("extra", {}).get("patch_rms", 1.0))
    else:
        rho = np.array([float(v) for v in cfg["rho_grid"].split(",")])
    sidecar = ["file\tmin\tmax"]
    for f in filters:
        prof = analysis.response_profile(bank, f, rho)
        name = f"profile_{f:03d}.csv"
        with open(os.path.join(out, name), "w", newline="") as fh:
            fh.write(prof.to_csv())
        artifacts.append(name)
        artifacts.append(os.path.basename(
            plotting.response_profile_figure(prof, os.path.join(out, f"profile_{f:03d}.svg"))
        ))
        if isinstance(bank, VolterraFilterBank):
            slices = analysis.extract_weight_slices(bank, f)
            sdir = plotting.ensure_dir(os.path.join(out, f"slices_{f:03d}"))
            tiles = [("linear", slices.linear)] + [(f"q{i:02d}", q) for i, q in enumerate(slices.quadratic)]
            for label, grid in tiles:
                fname = f"slices_{f:03d}/{label}.pgm"
                lo, hi = plotting.write_pgm(os.path.join(out, fname), plotting.channels_side_by_side(grid))
                sidecar.append(f"{fname}\t{lo!r}\t{hi!r}")
                artifacts.append(fname)
            artifacts.append(os.path.basename(
                plotting.slice_contact_sheet(slices, os.path.join(out, f"slices_{f:03d}.svg"))
            ))
    if len(sidecar) > 1:
        with open(os.path.join(out, "slices_normalization.tsv"), "w") as fh:
            fh.write("\n".join(sidecar) + "\n")
        artifacts.append("slices_normalization.tsv")
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump({"weights": summary, "bias_convention": "bias in y1,y4; excluded from y2,y3",
                   "rho": rho.tolist()}, fh, indent=2, sort_keys=True)
    artifacts.append("summary.json")
    write_manifest(out, "analyze", cfg, artifacts)
    for part, s in summary.items():
        print(f"{part}\tmean={s['mean']:.4g}\tstd={s['std']:.4g}")
    return EXIT_OK


def cmd_count(args) -> int:
    cfg = resolve(args, COUNT_DEFAULTS)
    if cfg["n"] is None and cfg["depth"] is None:
        raise UsageError("give --n/--r for one filter or --depth/--widen for a network")
    if cfg["n"] is not None:
        try:
            print(volterra_param_count(int(cfg["n"]), int(cfg["r"])))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if cfg["depth"] is not None:
        totals = {}
        for kind in ("linear", "volterra"):
            try:
                spec = NetworkSpec(int(cfg["depth"]), int(cfg["widen"]), int(cfg["classes"]),
                                   int(cfg["in_channels"]), kind)
            except ValueError as exc:
                raise UsageError(str(exc)) from exc
            net = build_network(spec)
            print(f"# {kind} first layer")
            print("layer\tkind\tparams")
            for name, layer_kind, count in net.param_table():
                print(f"{name}\t{layer_kind}\t{count}")
            totals[kind] = net.num_params
            print(f"total\t\t{net.num_params}")
        delta = totals["volterra"] - totals["linear"]
        print(f"delta\t\t{delta}\t({100.0 * delta / totals['linear']:.3f}%)")
    return EXIT_OK


# --------------------------------------------------------------------- parser


def _common(p, seeded=True):
    p.add_argument("--out", help="output directory (manifest at its root)")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--threads", type=int, help="worker cap (1 = serial, bit-reproducible); env VOLT_THREADS")
    if seeded:
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"volt {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network")
    _common(p)
    p.add_argument("--from-manifest", help="reuse the resolved config of an earlier run")
    p.add_argument("--data")
    p.add_argument("--dataset", choices=["cifar10", "cifar100", "synthetic"])
    p.add_argument("--depth", type=int)
    p.add_argument("--widen", type=int)
    p.add_argument("--first-layer", choices=["linear", "volterra"])
    p.add_argument("--batch", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--schedule", choices=["table2"])
    p.add_argument("--nesterov", action="store_true", default=None)
    p.add_argument("--augment", choices=["auto", "on", "off"])
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--interaction", choices=["cross", "per_channel"])
    p.add_argument("--w2-init", choices=["zero", "gaussian"])
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--channels", type=int, help="synthetic image channels")
    p.add_argument("--margin", type=float, help="quadratic set: rejection margin in score spreads")
    p.add_argument("--tail", type=float, help="quadratic set: log-normal spread of pixel amplitudes")
    p.add_argument("--scale", type=float, help="quadratic set: pixel deviation scale")
    p.add_argument("--synthetic-kind", choices=["quadratic", "templates", "channel_product"])
    p.add_argument("--subset", type=int, help="use only the first N training images (CIFAR)")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the layer gradients")
    _common(p)
    p.add_argument("--configs", type=int)
    p.add_argument("--n", type=int, help="restrict to one patch length (4, 9 or 27)")
    p.add_argument("--step", type=float)
    p.add_argument("--tol", type=float)
    p.add_argument("--network", action="store_true", default=None, help="also check whole tiny networks")
    p.set_defaults(func=cmd_gradcheck, needs_out=False)

    p = sub.add_parser("bench", help="time linear vs Volterra kernels over a size sweep")
    _common(p)
    p.add_argument("--sizes", help="comma-separated square input sizes")
    p.add_argument("--batch", type=int)
    p.add_argument("--repeats", type=int)
    p.set_defaults(func=cmd_bench, needs_out=True)

    p = sub.add_parser("analyze", help="weight histograms, slices and response profiles from a checkpoint")
    _common(p, seeded=False)
    p.add_argument("--checkpoint")
    p.add_argument("--filters", help="e.g. 0..15, 1,3,5 or all")
    p.add_argument("--rho-grid", help="'default' or comma-separated norms")
    p.add_argument("--bins", type=int)
    p.set_defaults(func=cmd_analyze, needs_out=True)

    p = sub.add_parser("count", help="parameter counts")
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--widen", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--in-channels", type=int)
    p.set_defaults(func=cmd_count, needs_out=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if getattr(args, "needs_out", False) and not args.out:
            raise UsageError("--out is required")
        with thread_limit(getattr(args, "threads", None)):
            return args.func(args)
    except UsageError as exc:
        print(f"volt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, checkpoint.CheckpointError, json.JSONDecodeError) as exc:
        print(f"volt: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
