"""Command-line driver: dataset generation, CKB training and sweeps, JSCC
training and evaluation, and a trend report over the produced tables.

Every command writes its tables as CSV plus a ``<name>.summary.json`` run
summary next to its main output, and exits with the code of the error
family that stopped it (see :mod:`ckbsim.errors`).
"""

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ckb import (CKBStore, heldout_mse, model_checkpoint, model_from_checkpoint,
                  perturb_knowledge, train_ckb)
from .corpus import load_corpus, read_image_batch
from .datastore import (load_checkpoint, load_store, parse_ratio, read_dataset, save_checkpoint,
                        save_store, split, write_dataset)
from .errors import CKBSimError, ConfigError, DataError
from .fusion import FUSIONS, GATING_MODES
from .jscc import MODES, NOISELESS, JSCCModel, evaluate_sweep, train_jscc
from .metrics import mae
from .pipeline import generate_dataset
from .scene import NUM_CLASSES, SceneConfig, load_scene_config, small_config
from .tensorkit import ParameterSet, set_default_dtype

ENV_DATA = "CKBSIM_DATA_DIR"
ENV_THREADS = "CKBSIM_THREADS"
PRESETS = {"default": SceneConfig, "small": small_config}
# options whose values may start with a minus sign
_SIGNED = ("--snrs", "--eems", "--radii", "--classes")


# -- parsing helpers ---------------------------------------------------------------
def parse_number_list(spec, cast=float):
    """``"a:b:s"`` inclusive range or comma list; ``inf``/``noiseless`` allowed."""
    spec = str(spec).strip()
    if ":" in spec and "," not in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"range {spec!r} must be start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ConfigError(f"range {spec!r} is empty")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [cast(start + i * step) for i in range(count)]
    out = []
    for token in spec.split(","):
        token = token.strip().lower()
        if not token:
            continue
        if token in ("inf", "noiseless"):
            out.append(NOISELESS)
            continue
        try:
            out.append(cast(token))
        except ValueError:
            raise ConfigError(f"cannot parse {token!r} in {spec!r}") from None
    if not out:
        raise ConfigError(f"empty list {spec!r}")
    return out


def parse_radius(token):
    token = str(token).strip()
    if token in ("adaptive", "stored"):
        return token
    try:
        value = int(token)
    except ValueError:
        raise ConfigError(f"radius must be an integer, 'adaptive' or 'stored', got {token!r}") \
            from None
    if value < 1:
        raise ConfigError("radius must be positive")
    return value


def _names(spec, allowed, what):
    items = [s.strip() for s in spec.split(",") if s.strip()]
    bad = [s for s in items if s not in allowed]
    if bad or not items:
        raise ConfigError(f"unknown {what} {bad or spec!r}; expected some of {list(allowed)}")
    return items


def _fmt(value):
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _summary_path(out):
    out = Path(out)
    return out / "summary.json" if out.is_dir() else out.with_name(out.name + ".summary.json")


def write_summary(out, command, args, results):
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
              if k not in ("func",)}
    doc = {"command": command, "version": __version__, "config": config, "results": results}
    path = _summary_path(out)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_fmt) + "\n")
    return path


def _data_dir(args):
    value = args.data or os.environ.get(ENV_DATA)
    if not value:
        raise ConfigError(f"no dataset directory: pass --data or set {ENV_DATA}")
    path = Path(value)
    if not (path / "manifest.json").exists():
        raise DataError(f"no dataset found in {path}")
    return path


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} {path} does not exist")
    return path


def _hyper(args):
    hyper = {"fusion": args.fusion, "gating": args.gating, "epochs": args.epochs,
             "batch_size": args.batch_size, "lr": args.lr, "patience": args.patience,
             "max_steps": args.max_steps, "verbose": args.verbose}
    return hyper


def _ckb_errors(model, test, manifest):
    pred = model.generate(test, manifest)
    truth = np.stack([s.H for s in test])
    held = heldout_mse(model, test, manifest)
    return held, math.sqrt(held), mae(pred / model.c_h, truth / model.c_h)


# -- commands -------------------------------------------------------------------
def cmd_gen_dataset(args):
    out = Path(args.out or os.environ.get(ENV_DATA) or "data")
    config = load_scene_config(_require(args.scene_config, "scene config")) \
        if args.scene_config else PRESETS[args.preset]()
    samples, manifest = generate_dataset(config, n=args.samples, seed=args.seed,
                                         resolution=args.resolution, kappa=args.kappa,
                                         max_reflections=args.max_reflections,
                                         max_paths=args.max_paths, workers=args.threads)
    write_dataset(samples, manifest, out)
    rows = [(s.index, *(float(v) for v in s.cu_pos), s.d_r,
             float(np.sum(np.abs(s.H.astype(np.complex128)) ** 2))) for s in samples]
    write_csv(out / "samples.csv", ["index", "cu_x", "cu_y", "cu_z", "d_r", "channel_power"],
              rows)
    write_summary(out, "gen-dataset", args, {"sample_count": manifest.sample_count,
                                             "c_h": manifest.c_h,
                                             "record_size": manifest.record_size()})
    return 0


def cmd_train_ckb(args):
    samples, manifest = read_dataset(_data_dir(args))
    model, history, (train, test) = train_ckb(
        samples, manifest, parse_ratio(args.ratio), args.seed, parse_radius(args.radius),
        args.z_eff, args.kappa, not args.no_location, **_hyper(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    params, meta = model_checkpoint(model)
    meta["split"] = {"ratio": args.ratio, "seed": args.seed}
    save_checkpoint(params, out, meta)
    write_csv(out.with_name(out.name + ".history.csv"), ["epoch", "train_mse", "val_mse"],
              history)
    store = CKBStore.build(model, samples, manifest)
    save_store(store.entries, out.with_name(out.name + ".store"))
    held, rmse_v, mae_v = _ckb_errors(model, test, manifest)
    write_summary(out, "train-ckb", args, {"heldout_mse": held, "heldout_rmse": rmse_v,
                                           "heldout_mae": mae_v, "epochs_run": len(history),
                                           "c_h": model.c_h, "train": len(train),
                                           "test": len(test), "store_entries": len(store)})
    return 0


def _sweep_rows(args, samples, manifest):
    base = _hyper(args)
    ratio = parse_ratio(args.ratio)

    def run(**overrides):
        hyper = dict(base)
        opts = {"radius": parse_radius(args.radius), "z_eff": args.z_eff,
                "use_location": not args.no_location}
        for key in ("radius", "z_eff", "use_location"):
            if key in overrides:
                opts[key] = overrides.pop(key)
        hyper.update(overrides)
        model, history, (_, test) = train_ckb(samples, manifest, ratio, args.seed,
                                              kappa=args.kappa, **opts, **hyper)
        return (*_ckb_errors(model, test, manifest), len(history))

    metrics = ["mse", "rmse", "mae", "epochs"]
    if args.sweep == "roi":
        radii = [parse_radius(r) for r in args.radii.split(",")]
        return ["radius"] + metrics, [(r, *run(radius=r)) for r in radii]
    if args.sweep == "fusion":
        fusions = _names(args.fusions, FUSIONS, "fusion")
        return ["fusion"] + metrics, [(f, *run(fusion=f)) for f in fusions]
    if args.sweep == "classes":
        classes = parse_number_list(args.classes, int)
        if any(not 1 <= z <= NUM_CLASSES for z in classes):
            raise ConfigError(f"class counts must lie in 1..{NUM_CLASSES}")
        gatings = _names(args.gatings, GATING_MODES, "gating mode")
        rows = [(z, args.gating, *run(z_eff=z)) for z in classes]
        top = max(classes)
        rows += [(top, g, *run(z_eff=top, gating=g)) for g in gatings if g != args.gating]
        return ["z_eff", "gating"] + metrics, rows
    raise ConfigError(f"unknown sweep {args.sweep!r}")


def cmd_eval_ckb(args):
    samples, manifest = read_dataset(_data_dir(args))
    out = Path(args.out)
    if args.sweep:
        header, rows = _sweep_rows(args, samples, manifest)
    else:
        if not args.model:
            raise ConfigError("eval-ckb needs --sweep or --model")
        params, meta = load_checkpoint(_require(args.model, "model"), with_meta=True)
        model = model_from_checkpoint(params, meta)
        _, test = split(samples, parse_ratio(meta["split"]["ratio"]), meta["split"]["seed"])
        header = ["model"] + ["mse", "rmse", "mae", "samples"]
        rows = [(Path(args.model).name, *_ckb_errors(model, test, manifest), len(test))]
    write_csv(out, header, rows)
    write_summary(out, "eval-ckb", args, {"rows": [dict(zip(header, r)) for r in rows]})
    return 0


def _images(args):
    images = read_image_batch(_require(args.images, "image batch")) if args.images \
        else load_corpus()
    if len(images) < 2:
        raise ConfigError("need at least two images to split into train and validation")
    order = np.random.default_rng(args.seed).permutation(len(images))
    n_train = max(1, len(images) * 3 // 4)
    return images[order[:n_train]], images[order[n_train:]]


def _knowledge_source(args, mode, samples, manifest):
    if mode != "ckb":
        return None
    if not args.store:
        raise ConfigError("ckb mode needs --store (written by train-ckb)")
    entries = load_store(_require(args.store, "CKB store"))
    missing = [s.index for s in samples if s.index not in entries]
    if missing:
        raise DataError(f"CKB store lacks entries for samples {missing[:5]}")
    return [entries[s.index] for s in samples]


def _linked(samples):
    """Environment samples with at least one propagation path; a fully
    blocked link carries nothing, so it is left out of JSCC runs."""
    return [s for s in samples if np.any(s.H)]


def _jscc_path(model_dir, mode):
    return Path(model_dir) / f"jscc_{mode}.ckpt"


def cmd_train_jscc(args):
    samples, manifest = read_dataset(_data_dir(args))
    train_all, _ = split(samples, parse_ratio(args.ratio), args.seed)
    train_env = _linked(train_all)
    if not train_env:
        raise DataError("every training environment is fully blocked")
    train_img, _ = _images(args)
    knowledge = _knowledge_source(args, args.mode, train_env, manifest)
    model = JSCCModel(np.random.default_rng(args.seed), args.mode, manifest.c_h)
    snrs = parse_number_list(args.snrs)
    model, history = train_jscc(model, train_img, [s.H for s in train_env], knowledge, snrs,
                                args.steps, args.batch_size, args.lr, args.seed + 1,
                                args.verbose)
    out = Path(args.out) if args.out else _jscc_path(args.model_dir, args.mode)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"kind": "jscc", "mode": args.mode, "c_h": manifest.c_h, "steps": args.steps,
            "snrs": snrs, "seed": args.seed}
    save_checkpoint(ParameterSet.capture(model), out, meta)
    write_csv(out.with_name(out.name + ".history.csv"), ["step", "loss"], history)
    tail = [h[1] for h in history[-50:]]
    write_summary(out, "train-jscc", args, {"final_loss": float(np.mean(tail)),
                                            "steps": len(history),
                                            "environments": len(train_env),
                                            "blocked_excluded": len(train_all) - len(train_env)})
    return 0


def load_jscc(path):
    params, meta = load_checkpoint(_require(path, "JSCC model"), with_meta=True)
    if meta.get("kind") != "jscc":
        raise ConfigError(f"{path} does not hold a JSCC model")
    model = JSCCModel(np.random.default_rng(0), meta["mode"], meta["c_h"])
    params.restore(model)
    model.eval()
    return model


def cmd_eval_jscc(args):
    samples, manifest = read_dataset(_data_dir(args))
    _, test_all = split(samples, parse_ratio(args.ratio), args.seed)
    test_env = _linked(test_all)
    if not test_env:
        raise DataError("every test environment is fully blocked")
    _, val_img = _images(args)
    channels = [s.H for s in test_env]
    snrs = parse_number_list(args.snrs)
    out = Path(args.out)
    rows = []
    if args.sweep == "snr":
        header = ["snr_db", "mode", "psnr", "ssim"]
        for mode in _names(args.modes, MODES, "mode"):
            model = load_jscc(_jscc_path(args.model_dir, mode))
            knowledge = _knowledge_source(args, mode, test_env, manifest)
            table = evaluate_sweep(model, val_img, channels, snrs, knowledge,
                                   args.pairs, args.eval_seed)
            rows += [(snr, mode, p, s) for snr, p, s in table]
        rows.sort(key=lambda r: (r[0], MODES.index(r[1])))
    elif args.sweep == "eem":
        header = ["eem", "snr_db", "psnr", "ssim"]
        model = load_jscc(_jscc_path(args.model_dir, args.eem_mode))
        if model.mode == "no_knowledge":
            raise ConfigError("the EEM sweep needs a knowledge-aided model")
        for eem in parse_number_list(args.eems):
            knowledge = [perturb_knowledge(h, eem, seed=args.eval_seed + i).H_ne
                         for i, h in enumerate(channels)]
            table = evaluate_sweep(model, val_img, channels, snrs, knowledge, args.pairs,
                                   args.eval_seed)
            rows += [(eem, snr, p, s) for snr, p, s in table]
    else:
        raise ConfigError(f"unknown sweep {args.sweep!r}")
    write_csv(out, header, rows)
    write_summary(out, "eval-jscc", args, {"rows": len(rows), "environments": len(test_env),
                                           "blocked_excluded": len(test_all) - len(test_env)})
    return 0


def _trend_checks(tables):
    """(check, value, passed) rows over whichever sweep tables are present."""
    checks = []
    if "roi" in tables:
        mse_by = {r["radius"]: float(r["mse"]) for r in tables["roi"]}
        fixed = {k: v for k, v in mse_by.items() if k.isdigit()}
        if "adaptive" in mse_by and fixed:
            checks.append(("roi_adaptive_within_10pct", mse_by["adaptive"],
                           all(mse_by["adaptive"] <= 1.1 * v for v in fixed.values())))
        if "20" in fixed:
            checks.append(("roi_radius20_worst_fixed", fixed["20"],
                           fixed["20"] == max(fixed.values())))
    if "fusion" in tables:
        mse_by = {r["fusion"]: float(r["mse"]) for r in tables["fusion"]}
        if "attention" in mse_by:
            checks.append(("fusion_attention_mse_le_1e-2", mse_by["attention"],
                           mse_by["attention"] <= 1e-2))
            if "linear" in mse_by:
                checks.append(("fusion_attention_beats_linear",
                               mse_by["attention"] - mse_by["linear"],
                               mse_by["attention"] < mse_by["linear"]))
    if "classes" in tables:
        rows = tables["classes"]
        by = {(int(r["z_eff"]), r["gating"]): float(r["mse"]) for r in rows}
        top = max(z for z, _ in by)
        if (top, "adaptive") in by and (4, "adaptive") in by:
            checks.append(("classes_top_le_4", by[(top, "adaptive")] - by[(4, "adaptive")],
                           by[(top, "adaptive")] <= by[(4, "adaptive")]))
        g = [by.get((top, m)) for m in ("adaptive", "uniform", "direct")]
        if None not in g:
            checks.append(("gating_adaptive_le_uniform_le_direct", g[0],
                           g[0] <= g[1] <= g[2]))
    if "snr" in tables:
        ssim = {(float(r["snr_db"]), r["mode"]): float(r["ssim"]) for r in tables["snr"]}
        snrs = sorted({k[0] for k in ssim})
        if all((s, m) in ssim for s in snrs for m in MODES):
            checks.append(("jscc_true_ge_ckb_ge_none_minus_0.01", min(
                min(ssim[(s, "true_csi")] - ssim[(s, "ckb")],
                    ssim[(s, "ckb")] - ssim[(s, "no_knowledge")] + 0.01) for s in snrs),
                all(ssim[(s, "true_csi")] >= ssim[(s, "ckb")] >= ssim[(s, "no_knowledge")] - 0.01
                    for s in snrs)))
            high = [s for s in snrs if s >= 5]
            checks.append(("jscc_ckb_ge_none_above_5db",
                           min(ssim[(s, "ckb")] - ssim[(s, "no_knowledge")] for s in high),
                           all(ssim[(s, "ckb")] >= ssim[(s, "no_knowledge")] for s in high)))
    if "eem" in tables:
        rows = tables["eem"]
        for snr in sorted({float(r["snr_db"]) for r in rows}):
            seq = [float(r["ssim"]) for r in sorted(
                (r for r in rows if float(r["snr_db"]) == snr), key=lambda r: float(r["eem"]))]
            rise = max((b - a for a, b in zip(seq, seq[1:])), default=0.0)
            checks.append((f"eem_non_increasing_at_{_fmt(snr)}db", rise, rise <= 0.005))
    return checks


def cmd_report(args):
    run = _require(args.run, "run directory")
    tables = {name: read_csv(run / f"{name}.csv")
              for name in ("roi", "fusion", "classes", "snr", "eem")
              if (run / f"{name}.csv").exists()}
    if not tables:
        raise DataError(f"no sweep tables found in {run}")
    checks = _trend_checks(tables)
    out = Path(args.out) if args.out else run / "report.csv"
    write_csv(out, ["check", "value", "passed"], [(c, float(v), int(p)) for c, v, p in checks])
    write_summary(out, "report", args, {"tables": sorted(tables),
                                        "passed": sum(p for _, _, p in checks),
                                        "checks": len(checks)})
    return 0


# -- parser -----------------------------------------------------------------------
def _common(parser):
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--threads", type=int,
                        default=int(os.environ.get(ENV_THREADS, "1") or 1),
                        help=f"worker/BLAS thread cap (env {ENV_THREADS})")
    parser.add_argument("--float64", action="store_true", help="64-bit tensors throughout")
    parser.add_argument("--verbose", action="store_true")


def _ckb_options(parser):
    parser.add_argument("--data", help=f"dataset directory (env {ENV_DATA})")
    parser.add_argument("--ratio", default="3:1")
    parser.add_argument("--fusion", default="attention", choices=sorted(FUSIONS))
    parser.add_argument("--gating", default="adaptive", choices=GATING_MODES)
    parser.add_argument("--epochs", type=int, default=200)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--patience", type=int, default=20)
    parser.add_argument("--max-steps", type=int, default=None)
    parser.add_argument("--radius", default="stored", help="stored, adaptive or pixels")
    parser.add_argument("--z-eff", type=int, default=None)
    parser.add_argument("--kappa", type=float, default=None)
    parser.add_argument("--no-location", action="store_true",
                        help="zero the location features (semantics and image only)")


def _jscc_options(parser):
    parser.add_argument("--data", help=f"dataset directory (env {ENV_DATA})")
    parser.add_argument("--ratio", default="3:1")
    parser.add_argument("--images", help="raw image batch (default: bundled corpus)")
    parser.add_argument("--store", help="CKB store written by train-ckb")
    parser.add_argument("--model-dir", default="models")


def build_parser():
    parser = argparse.ArgumentParser(prog="ckbsim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="ray-trace and render an environment dataset")
    _common(p)
    p.add_argument("--samples", type=int, default=995)
    p.add_argument("--out", help=f"output directory (env {ENV_DATA})")
    p.add_argument("--preset", default="default", choices=sorted(PRESETS))
    p.add_argument("--scene-config", help="INI scene configuration")
    p.add_argument("--resolution", type=int, default=256)
    p.add_argument("--kappa", type=float, default=0.01)
    p.add_argument("--max-reflections", type=int, default=2)
    p.add_argument("--max-paths", type=int, default=20)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train-ckb", help="train the channel knowledge base")
    _common(p)
    _ckb_options(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train_ckb)

    p = sub.add_parser("eval-ckb", help="held-out CKB error or an ablation sweep")
    _common(p)
    _ckb_options(p)
    p.add_argument("--model", help="checkpoint to evaluate (without --sweep)")
    p.add_argument("--sweep", choices=("roi", "fusion", "classes"))
    p.add_argument("--radii", default="20,60,100,adaptive")
    p.add_argument("--fusions", default="attention,linear,cnn")
    p.add_argument("--classes", default="4,8,16,28")
    p.add_argument("--gatings", default="adaptive,uniform,direct")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_eval_ckb)

    p = sub.add_parser("train-jscc", help="train the JSCC codec in one knowledge mode")
    _common(p)
    _jscc_options(p)
    p.add_argument("--mode", default="ckb", choices=MODES)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--snrs", default="-5:25:5", help="training SNR schedule in dB")
    p.add_argument("--out", help="checkpoint path (default: <model-dir>/jscc_<mode>.ckpt)")
    p.set_defaults(func=cmd_train_jscc)

    p = sub.add_parser("eval-jscc", help="SNR or knowledge-error sweep")
    _common(p)
    _jscc_options(p)
    p.add_argument("--sweep", required=True, choices=("snr", "eem"))
    p.add_argument("--snrs", default="-5:25:5")
    p.add_argument("--modes", default=",".join(MODES))
    p.add_argument("--eems", default="0.001,0.01,0.1")
    p.add_argument("--eem-mode", default="true_csi", choices=("ckb", "true_csi"))
    p.add_argument("--pairs", type=int, default=2, help="environment samples per image")
    p.add_argument("--eval-seed", type=int, default=1234)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_eval_jscc)

    p = sub.add_parser("report", help="trend checks over the sweep tables of a run")
    _common(p)
    p.add_argument("--run", required=True, help="directory holding roi/fusion/classes/snr/eem.csv")
    p.add_argument("--out", help="CSV path (default: <run>/report.csv)")
    p.set_defaults(func=cmd_report)
    return parser


def _join_signed(argv):
    out, i = [], 0
    while i < len(argv):
        if argv[i] in _SIGNED and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_join_signed(argv))
    except SystemExit as exc:
        return ConfigError.exit_code if exc.code else 0
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return ConfigError.exit_code
    from threadpoolctl import threadpool_limits

    started = time.perf_counter()
    try:
        if args.float64:
            set_default_dtype(np.float64)
        with threadpool_limits(limits=args.threads):
            code = args.func(args)
    except CKBSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    finally:
        set_default_dtype(np.float32)
    if args.verbose:
        print(f"{args.command} finished in {time.perf_counter() - started:.1f} s",
              file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
