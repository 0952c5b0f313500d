"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure. On
failure a single JSON line ``{"code": ..., "error": ..., "message": ...}`` is
written to standard error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, network, plotting
from .inference import (Model, PaddingPolicy, accuracy_vs_uncertainty, mc_sample_predict, predict,
                        samples_vs_dcs)
from .network import ArchitectureError, CheckpointError
from .tensor import NumericError, ShapeError
from .training import TrainConfig, read_log, train
from .volume_io import (DataError, DatasetManifest, SyntheticSpec, VolumeFormatError, generate_synthetic,
                        read_volume, write_volume)

log = logging.getLogger("highres3d")

# parameter counts, in millions, of the published 160-class configurations
REFERENCE_MILLIONS = {("default", 160): 0.81, ("dropout", 160): 0.82, ("nores", 160): 0.81}

TRAIN_DEFAULTS = {
    "arch": "default",
    "loss": "dice",
    "seed": 0,
    "subvolume": 24,
    "iters": 2000,
    "workers": 1,
    "val_every": 50,
    "patience": 10,
    "augment": True,
    "lr": 0.01,
    "beta1": 0.9,
    "beta2": 0.999,
    "eval_pad": 0,
    "norm": "volume",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(["nan" if isinstance(v, float) and np.isnan(v) else v for v in r])


# ----------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    spec = SyntheticSpec(size=args.size, num_classes=args.classes, seed=args.seed, noise=args.noise,
                         counts={"train": args.train, "validation": args.validation, "test": args.test})
    manifest = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.entries)} volume pairs and {Path(args.out) / 'manifest.json'}")
    return 0


def resolve_train_config(args) -> dict:
    cfg = dict(TRAIN_DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(loaded) - set(TRAIN_DEFAULTS) - {"data", "out"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if args.data is not None:
        cfg["data"] = args.data
    if args.out is not None:
        cfg["out"] = args.out
    if "data" not in cfg or "out" not in cfg:
        raise UsageError("train needs --data and --out (flags or config)")
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    resolved = json.dumps(cfg, sort_keys=True, indent=1)
    log.info("resolved config:\n%s", resolved)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(resolved + "\n")
    manifest = DatasetManifest.read(cfg["data"])
    train_set = manifest.load("train")
    val_set = manifest.load("validation")
    spec = network.highres3dnet_spec(cfg["arch"], manifest.num_classes, train_set[0][0].shape[0] if train_set else 1)
    store = network.init_parameters(spec, np.random.default_rng(cfg["seed"]))
    tc = TrainConfig(subvolume=cfg["subvolume"], iterations=cfg["iters"], workers=cfg["workers"],
                     val_every=cfg["val_every"], patience=cfg["patience"], seed=cfg["seed"], loss=cfg["loss"],
                     lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"], augment=cfg["augment"],
                     eval_pad=cfg["eval_pad"], norm=cfg["norm"])
    result = train(spec, store, train_set, tc, val_set=val_set, log_path=out / "metrics.csv",
                   checkpoint_path=out / "checkpoint.hr3d")
    plotting.plot_training_log(read_log(out / "metrics.csv"), out / "metrics.png")
    print(f"best step {result.best_step} validation mean DCS {result.best_val:.4f}; "
          f"checkpoint {out / 'checkpoint.hr3d'}")
    return 0


def _load_model(args) -> Model:
    model = Model.load(args.checkpoint)
    if args.norm is not None:
        model.norm = args.norm
    return model


def cmd_predict(args) -> int:
    model = _load_model(args)
    vol = read_volume(args.input)
    labels, scores = predict(model, vol.data, PaddingPolicy(args.pad), tile_size=args.tile)
    write_volume(args.out, labels.astype(np.uint16), vol.spacing)
    if args.scores_out:
        write_volume(args.scores_out, scores.astype(np.float32), vol.spacing)
    print(f"wrote {args.out} {labels.shape}")
    return 0


def cmd_sample(args) -> int:
    model = _load_model(args)
    vol = read_volume(args.input)
    umap = mc_sample_predict(model, vol.data, args.samples, args.seed, PaddingPolicy(args.pad))
    write_volume(args.out, umap.labels.astype(np.uint16), vol.spacing)
    write_volume(args.uncertainty, umap.disagreement.astype(np.float32), vol.spacing)
    print(f"wrote {args.out} and {args.uncertainty} from {args.samples} samples; "
          f"mean disagreement {umap.disagreement.mean():.4f}")
    return 0


def cmd_count_params(args) -> int:
    spec = network.highres3dnet_spec(args.arch, args.classes)
    store = network.init_parameters(spec, np.random.default_rng(0))
    total = network.count_parameters(store)
    bn = sum(v.size for k, v in store.params.items() if k.endswith((".gamma", ".beta")))
    millions = round(total / 1e6, 2)
    print(f"arch={args.arch} classes={args.classes} parameters={total} "
          f"without_batchnorm={total - bn} millions={millions:.2f}M")
    ref = REFERENCE_MILLIONS.get((args.arch, args.classes))
    if ref is not None:
        print(f"reference={ref:.2f}M match={'yes' if millions == ref else 'no'}")
    return 0


def cmd_analyze_rf(args) -> int:
    spec = network.highres3dnet_spec(args.arch, args.classes)
    hist = analysis.rf_histogram(spec)
    out = Path(args.out)
    write_csv(out, ("extent", "count"), hist.items())
    plotting.plot_rf_histogram(hist, out.with_suffix(".png"))
    print(f"paths={sum(hist.values())} min_extent={min(hist)} max_extent={max(hist)} -> {out}")
    return 0


def _dataset(args):
    return DatasetManifest.read(args.data).load(args.split)


def cmd_analyze_border(args) -> int:
    model = _load_model(args)
    rows = analysis.border_effect_curve(model, _dataset(args), args.borders, pad=args.pad)
    plateau = analysis.detect_plateau(rows)
    out = Path(args.out)
    write_csv(out, ("border", "mean_dcs", "stderr", "voxels"), rows)
    plotting.plot_border_curve(rows, out.with_suffix(".png"), plateau)
    print(f"plateau from border {plateau} -> {out}")
    return 0


def cmd_analyze_curve(args) -> int:
    model = _load_model(args)
    data = _dataset(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    policy = PaddingPolicy(args.pad)
    rows = samples_vs_dcs(model, data, args.samples, args.seed, policy)
    write_csv(out / "samples_vs_dcs.csv", ("samples", "mean_dcs", "stderr"), rows)
    plotting.plot_samples_vs_dcs(rows, out / "samples_vs_dcs.png")
    m = args.threshold_samples
    correct = np.zeros(len(args.thresholds))
    kept = np.zeros(len(args.thresholds))
    total = 0
    for img, lab in data:
        umap = mc_sample_predict(model, img, m, args.seed, policy)
        for i, (_, acc, frac) in enumerate(accuracy_vs_uncertainty(umap, lab, args.thresholds)):
            n = frac * lab.size
            kept[i] += n
            correct[i] += 0.0 if n == 0 else acc * n
        total += lab.size
    acc_rows = [(t, (c / k) if k else float("nan"), k / total) for t, c, k in zip(args.thresholds, correct, kept)]
    write_csv(out / "accuracy_vs_threshold.csv", ("threshold", "accuracy", "retained_fraction"), acc_rows)
    plotting.plot_accuracy_vs_threshold(acc_rows, out / "accuracy_vs_threshold.png")
    print(f"wrote curves to {out}")
    return 0


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="highres3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset and manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--train", type=int, default=4)
    g.add_argument("--validation", type=int, default=2)
    g.add_argument("--test", type=int, default=2)
    g.add_argument("--noise", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=7)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a network on a manifest")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--arch", choices=network.VARIANTS)
    t.add_argument("--loss", choices=("dice", "xent"))
    t.add_argument("--seed", type=int)
    t.add_argument("--subvolume", type=int)
    t.add_argument("--iters", type=int)
    t.add_argument("--workers", type=int, choices=(1, 2))
    t.add_argument("--val-every", dest="val_every", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--eval-pad", dest="eval_pad", type=int)
    t.add_argument("--norm", choices=network.NORMS)
    t.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="segment one volume")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--in", dest="input", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--scores-out")
    pr.add_argument("--pad", type=int, default=16)
    pr.add_argument("--tile", type=int)
    pr.add_argument("--norm", choices=network.NORMS, help="batch-norm statistics (default: checkpoint's)")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("sample", help="Monte Carlo dropout labels and uncertainty")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--uncertainty", required=True)
    s.add_argument("--samples", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pad", type=int, default=16)
    s.add_argument("--norm", choices=network.NORMS)
    s.set_defaults(func=cmd_sample)

    c = sub.add_parser("count-params", help="trainable parameter count of an architecture")
    c.add_argument("--arch", choices=network.VARIANTS, default="default")
    c.add_argument("--classes", type=int, default=160)
    c.set_defaults(func=cmd_count_params)

    a = sub.add_parser("analyze", help="receptive-field, border and uncertainty reports")
    asub = a.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    rf = asub.add_parser("rf")
    rf.add_argument("--arch", choices=network.VARIANTS, default="default")
    rf.add_argument("--classes", type=int, default=160)
    rf.add_argument("--out", default="rf_histogram.csv")
    rf.set_defaults(func=cmd_analyze_rf)

    for name, func in (("border", cmd_analyze_border), ("curve", cmd_analyze_curve)):
        q = asub.add_parser(name)
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--data", required=True)
        q.add_argument("--split", default="test", choices=("train", "validation", "test"))
        q.add_argument("--norm", choices=network.NORMS)
        q.set_defaults(func=func)
        if name == "border":
            q.add_argument("--borders", type=_ints, default=list(range(0, 9)))
            q.add_argument("--pad", type=int, default=0)
            q.add_argument("--out", default="border_effect.csv")
        else:
            q.add_argument("--samples", type=_ints, default=[1, 2, 5, 10, 20])
            q.add_argument("--thresholds", type=_floats, default=[0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 1.0])
            q.add_argument("--threshold-samples", dest="threshold_samples", type=int, default=10)
            q.add_argument("--seed", type=int, default=0)
            q.add_argument("--pad", type=int, default=16)
            q.add_argument("--out-dir", dest="out_dir", default="curves")
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"code": code, "error": kind, "message": str(exc)}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(1, "usage", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        return _fail(3, "numeric", exc)
    except (DataError, VolumeFormatError, CheckpointError, ArchitectureError, ShapeError, OSError) as exc:
        return _fail(2, "data", exc)
    except (UsageError, ValueError) as exc:
        # remaining ValueErrors are bad option values (pad, tile, borders, ...)
        return _fail(1, "usage", exc)


if __name__ == "__main__":
    sys.exit(main())
