"""``gin`` command-line entry point.

All commands share one working directory (``--workdir``, default ``gin_out``)
laid out as::

    data/        manifest.csv + images/*.pgm         (synth)
    models/      gan.ginm inverse.ginm train_log.csv (train)
    analysis/    features.csv isomap.csv metrics.* roc_fold*.csv forest.ginm
    virtual/     vp_*.pgm virtual.csv                (generate)
    grid/        montage.pgm                         (grid)
    reconstruct/ rec_*.pgm mse.csv                   (reconstruct)

Exit codes: 0 success, 1 validation error, 2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analytics, gin, io, nn, synthdata, vpgen
from .config import ConfigError, RunConfig, derive_seed, resolve

log = logging.getLogger("ginvp")

TARGETS = {"high": "high_pvl", "low": "low_pvl", "boundary": "boundary"}

# independent seed streams per stage
STREAM_GAN, STREAM_INVERSE, STREAM_CV, STREAM_FOREST, STREAM_GENERATE = 1, 2, 3, 4, 5


class ValidationError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _dirs(cfg, args):
    root = Path(cfg.out_dir)
    return {
        "data": Path(args.data) if getattr(args, "data", None) else root / "data",
        "models": Path(args.models) if getattr(args, "models", None) else root / "models",
        "analysis": Path(args.analysis) if getattr(args, "analysis", None) else root / "analysis",
        "root": root,
    }


def _claim(paths, force):
    """Refuse to clobber existing outputs unless ``force``."""
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise ValidationError(f"refusing to overwrite {', '.join(existing[:3])} (pass --force)")


def _mkdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeFailure(f"cannot create output directory {path}: {exc}") from exc


def _load_data(path):
    try:
        return io.load_dataset(path)
    except io.DatasetFormatError as exc:
        raise ValidationError(f"corrupt dataset: {exc}") from exc


def _load(path, kind):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"missing model file {path}")
    try:
        return io.load_model(path, expect=kind)
    except io.ModelFormatError as exc:
        raise ValidationError(f"{path}: {exc}") from exc


def _latent_header(d):
    return [f"u{i}" for i in range(d)]


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg, args):
    out = _dirs(cfg, args)["data"]
    _claim([out / "manifest.csv"], args.force)
    data = synthdata.make_dataset(cfg.n_base, cfg.image_size, cfg.seed, cfg.augment)
    _mkdir(out)
    io.save_dataset(data, out)
    labels = data.labels()
    print(f"wrote {len(data)} records ({cfg.n_base} base) to {out}")
    print(f"class balance: high={int(labels.sum())} low={int(len(labels) - labels.sum())}")


def cmd_train(cfg, args):
    d = _dirs(cfg, args)
    targets = [d["models"] / n for n in ("gan.ginm", "inverse.ginm", "train_log.csv")]
    _claim(targets, args.force)
    data = _load_data(d["data"])
    if data.size != cfg.image_size:
        log.info("using dataset image size %d", data.size)
    gan, gan_log = gin.train_gan(data.images(), cfg.latent_dim, cfg.gan(), seed=derive_seed(cfg.seed, STREAM_GAN))
    inv, inv_log = gin.train_inverse(gan, cfg.inverse(), seed=derive_seed(cfg.seed, STREAM_INVERSE))
    tlog = gin.TrainingLog().extend(gan_log).extend(inv_log, offset=gan_log.last_iter)
    _mkdir(d["models"])
    io.save_model(targets[0], gan)
    io.save_model(targets[1], inv)
    io.write_training_log(targets[2], tlog)
    print(f"final critic loss {gan_log.rows[-1]['critic_loss']:.6g}  generator loss {gan_log.rows[-1]['gen_loss']:.6g}")
    print(f"final inverse mse {inv_log.rows[-1]['inverse_mse']:.6g}")
    print(f"wrote {targets[0]} and {targets[1]}")


def cmd_analyze(cfg, args):
    d = _dirs(cfg, args)
    out = d["analysis"]
    names = ["features.csv", "isomap.csv", "metrics.csv", "metrics.txt", "forest.ginm"]
    names += [f"roc_fold{i}.csv" for i in range(cfg.folds)]
    _claim([out / n for n in names], args.force)
    inv = _load(d["models"] / "inverse.ginm", "inverse")
    data = _load_data(d["data"])
    feats = analytics.extract_features(inv, data)
    base = feats.subset(np.nonzero(feats.is_base)[0])
    d_lat = feats.dim

    emb = analytics.isomap(base.values.astype(np.float64), k=cfg.isomap_k, out_dim=2)
    metrics = analytics.cross_validate(feats, cfg.forest(), k=cfg.folds, seed=derive_seed(cfg.seed, STREAM_CV))
    forest = analytics.train_forest(feats, cfg.forest(), seed=derive_seed(cfg.seed, STREAM_FOREST))

    _mkdir(out)
    io.write_csv(
        out / "features.csv",
        ["id"] + [f"f{i}" for i in range(d_lat)] + ["label"],
        ([int(i)] + [float(v) for v in row] + [int(y)] for i, row, y in zip(base.ids, base.values, base.labels)),
    )
    io.write_csv(
        out / "isomap.csv",
        ["id", "x", "y", "label"],
        ([int(i), float(e[0]), float(e[1]), int(y)] for i, e, y in zip(base.ids, emb, base.labels)),
    )
    rows = []
    for i, f in enumerate(metrics.folds):
        rows.append([i, f.accuracy, f.sensitivity, f.specificity, f.roc.auc, f.tp, f.tn, f.fp, f.fn])
        io.write_csv(
            out / f"roc_fold{i}.csv",
            ["threshold", "fpr", "tpr"],
            ([float(t), float(x), float(y)] for t, x, y in zip(f.roc.thresholds, f.roc.fpr, f.roc.tpr)),
        )
    rows.append(["mean", metrics.accuracy, metrics.sensitivity, metrics.specificity, float(np.mean(metrics.aucs)), "", "", "", ""])
    io.write_csv(out / "metrics.csv", ["fold", "accuracy", "sensitivity", "specificity", "auc", "tp", "tn", "fp", "fn"], rows)
    summary = (
        f"records: {len(base)} base, {len(feats)} total\n"
        f"folds: {cfg.folds}  trees: {cfg.n_trees}\n"
        f"mean accuracy:    {metrics.accuracy:.4f}\n"
        f"mean sensitivity: {metrics.sensitivity:.4f}\n"
        f"mean specificity: {metrics.specificity:.4f}\n"
        f"fold AUCs: {' '.join(f'{a:.4f}' for a in metrics.aucs)}\n"
    )
    (out / "metrics.txt").write_text(summary)
    io.save_model(out / "forest.ginm", forest)
    print(summary, end="")


def _open_generation(cfg, args):
    d = _dirs(cfg, args)
    gan = _load(d["models"] / "gan.ginm", "gan")
    forest = _load(d["analysis"] / "forest.ginm", "forest")
    if forest.n_features != gan.latent_dim:
        raise ValidationError("forest and GAN latent dimensions differ")
    return d, gan, forest


def cmd_generate(cfg, args):
    d, gan, forest = _open_generation(cfg, args)
    if args.count < 1:
        raise ValidationError("--count must be >= 1")
    out = Path(args.out) if args.out else d["root"] / "virtual"
    kind = TARGETS[args.target]
    target = cfg.target(kind)
    names = [f"vp_{args.target}_{i:03d}.pgm" for i in range(args.count)]
    sidecar = out / f"virtual_{args.target}.csv"
    _claim([out / n for n in names] + [sidecar], args.force)
    rng = np.random.default_rng(derive_seed(cfg.seed, STREAM_GENERATE))
    samples = [vpgen.guided_sample(gan, forest, target, rng, cfg.max_attempts) for _ in range(args.count)]
    _mkdir(out)
    rows = []
    for i, (name, s) in enumerate(zip(names, samples)):
        io.write_pgm(out / name, s.image)
        rows.append([i, kind, s.predicted_proba, s.attempt_count] + [float(v) for v in s.u])
    io.write_csv(sidecar, ["id", "target", "proba", "attempts"] + _latent_header(gan.latent_dim), rows)
    print(f"wrote {len(samples)} virtual patients ({kind}) to {out}")


def _pair(text, cast, what):
    try:
        parts = [cast(p) for p in text.split(",")]
    except ValueError:
        raise ValidationError(f"cannot parse {what} {text!r}") from None
    return parts


def cmd_grid(cfg, args):
    d = _dirs(cfg, args)
    gan = _load(d["models"] / "gan.ginm", "gan")
    dims = _pair(args.dims, int, "--dims")
    lo_hi = _pair(args.range, float, "--range")
    if len(dims) != 2 or len(lo_hi) != 2:
        raise ValidationError("--dims and --range take two comma-separated values")
    fixed = np.zeros(gan.latent_dim, np.float32)
    if args.fixed:
        fixed = np.array(_pair(args.fixed, float, "--fixed"), np.float32)
    axis = (lo_hi[0], lo_hi[1], args.steps)
    spec = vpgen.GridSpec(tuple(dims), (axis, axis), fixed)
    try:
        _, montage = vpgen.feature_grid(gan, spec)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    out = Path(args.out) if args.out else d["root"] / "grid" / "montage.pgm"
    _claim([out], args.force)
    _mkdir(out.parent)
    io.write_pgm(out, montage)
    print(f"wrote {args.steps}x{args.steps} montage to {out}")


def cmd_reconstruct(cfg, args):
    d = _dirs(cfg, args)
    gan = _load(d["models"] / "gan.ginm", "gan")
    inv = _load(d["models"] / "inverse.ginm", "inverse")
    data = _load_data(d["data"]).base()
    if data.size != gan.image_size:
        raise ValidationError(f"dataset image size {data.size} does not match the model ({gan.image_size})")
    records = data.records[: args.limit] if args.limit else data.records
    out = Path(args.out) if args.out else d["root"] / "reconstruct"
    names = [f"rec_{r.id:05d}.pgm" for r in records]
    _claim([out / n for n in names] + [out / "mse.csv"], args.force)
    images = np.stack([r.image for r in records])
    recon, mse = gin.reconstruct_batch(gan, inv, images)
    _mkdir(out)
    s = gan.image_size
    for name, a, b in zip(names, images, recon):
        pair = np.ones((s, 2 * s + 1), np.float32)
        pair[:, :s], pair[:, s + 1 :] = a, b
        io.write_pgm(out / name, pair)
    io.write_csv(out / "mse.csv", ["id", "mse"], ([r.id, float(m)] for r, m in zip(records, mse)))
    print(f"mean reconstruction mse {io.fmt_float(np.mean(mse))} over {len(records)} records")


def cmd_selftest(cfg, args):
    from . import selftest

    return selftest.run(print)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "analyze": cmd_analyze,
    "generate": cmd_generate,
    "grid": cmd_grid,
    "reconstruct": cmd_reconstruct,
    "selftest": cmd_selftest,
}


# --------------------------------------------------------------------------
# argument parsing

# flag name -> (config key, type)
_CONFIG_FLAGS = {
    "--seed": ("seed", int),
    "--latent-dim": ("latent_dim", int),
    "--image-size": ("image_size", int),
    "--n-base": ("n_base", int),
    "--gan-iterations": ("gan_iterations", int),
    "--gan-batch": ("gan_batch", int),
    "--n-critic": ("n_critic", int),
    "--clip-c": ("clip_c", float),
    "--gan-lr": ("gan_lr", float),
    "--warmup-critic": ("warmup_critic", int),
    "--inv-iterations": ("inv_iterations", int),
    "--inv-batch": ("inv_batch", int),
    "--inv-lr": ("inv_lr", float),
    "--n-trees": ("n_trees", int),
    "--max-depth": ("max_depth", int),
    "--min-leaf": ("min_leaf", int),
    "--folds": ("folds", int),
    "--isomap-k": ("isomap_k", int),
    "--tau-high": ("tau_high", float),
    "--tau-low": ("tau_low", float),
    "--beta": ("beta", float),
    "--max-attempts": ("max_attempts", int),
    "--workdir": ("out_dir", str),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' configuration file")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    for flag, (key, typ) in _CONFIG_FLAGS.items():
        common.add_argument(flag, dest=key, type=typ, default=None)
    common.add_argument("--augment", dest="augment", action="store_true", default=None)
    common.add_argument("--no-augment", dest="augment", action="store_false")
    common.add_argument("--data", help="dataset directory (default WORKDIR/data)")
    common.add_argument("--models", help="model directory (default WORKDIR/models)")
    common.add_argument("--analysis", help="analysis directory (default WORKDIR/analysis)")

    parser = argparse.ArgumentParser(prog="gin", description="Generative invertible network pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic valve dataset")
    sub.add_parser("train", parents=[common], help="train the GAN, then the inverse network")
    sub.add_parser("analyze", parents=[common], help="features, Isomap, cross-validated forest")
    p = sub.add_parser("generate", parents=[common], help="outcome-guided virtual patients")
    p.add_argument("--target", choices=sorted(TARGETS), default="high")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out")
    p = sub.add_parser("grid", parents=[common], help="latent cross-section montage")
    p.add_argument("--dims", default="0,1")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--range", default="-1,1")
    p.add_argument("--fixed", help="comma-separated values for every latent coordinate")
    p.add_argument("--out")
    p = sub.add_parser("reconstruct", parents=[common], help="generate(invert(x)) against x")
    p.add_argument("--limit", type=int, default=0, help="only the first N base records")
    p.add_argument("--out")
    sub.add_parser("selftest", parents=[common], help="run the built-in invariant checks")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    flags = {key: getattr(args, key) for key, _ in _CONFIG_FLAGS.values()}
    flags["augment"] = args.augment
    try:
        cfg = resolve(flags, args.config)
        rc = COMMANDS[args.command](cfg, args)
    except (ValidationError, ConfigError, nn.ShapeError) as exc:
        print(f"gin {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (
        RuntimeFailure,
        vpgen.SamplingExhausted,
        gin.TrainingDiverged,
        nn.NonFiniteGradient,
        analytics.DisconnectedGraph,
        analytics.SingleClassError,
        OSError,
    ) as exc:
        print(f"gin {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"gin {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
