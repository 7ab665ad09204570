"""Command-line front end: ``dnrecon simulate | train | reconstruct | evaluate``.

Settings come from an optional YAML file (see ``configs/desk.yaml``) layered on
top of built-in defaults; command-line flags override both.  Exit codes:
0 success, 2 configuration error, 3 I/O or file-format error, 4 training
divergence, 5 geometry mismatch.
"""

from __future__ import annotations

import argparse
import copy
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import fileio
from .dnrnet import (CheckpointError, Dataset, DnrNetModel, NetworkConfig, TrainConfig,
                     TrainingDiverged, generate_dataset, load_model, reconstruct, save_model,
                     train)
from .metrics import SsimConfig, format_table, score_table, write_table_csv
from .osem import ButterworthConfig, OsemConfig, butterworth_filter, osem_reconstruct
from .phantom import PhantomSpec, RandomizationLimits, load_spec, preset_phantom, save_spec
from .pipeline import simulate_phantom
from .tomo import Geometry, build_system_matrix

log = logging.getLogger("dnrecon")

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_GEOMETRY = 2, 3, 4, 5

DEFAULTS = {
    "seed": 0,
    "geometry": {"n": 64, "views": 24, "arc": 2 * math.pi},
    "counts": {"total_counts": 1e5},
    "phantom": {
        "k_range": [1, 5],
        "background_range": [0.05, 0.3],
        "amplitude_range": [-0.5, 1.0],
        "center_range": [-0.8, 0.8],
        "center_radius": 0.8,
        "axes_range": [0.05, 0.25],
        "phi_range": [0.0, math.pi],
        "diffusion_range": [0.02, 0.15],
    },
    "osem": {"iterations": 8, "subsets": 4, "init_value": 1.0},
    "butterworth": {"order": 3, "cutoffs": [0.3, 0.15]},
    "network": {"n_blocks": 6, "channels": 32, "res_blocks": 2, "slope": 0.01,
                "bn_momentum": 0.9},
    "train": {"epochs": 5, "batch_size": 4, "dataset_size": 300, "split": 0.9,
              "lr": 1e-3, "beta1": 0.9, "beta2": 0.999},
    "paths": {"dataset": "dataset", "checkpoint": "checkpoint"},
}


class ConfigError(ValueError):
    pass


class GeometryMismatch(ValueError):
    pass


def _merge(base: dict, update: dict, where: str = "") -> None:
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        default = base[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{path}' must be a mapping")
            _merge(default, value, path + ".")
        elif isinstance(default, list):
            if not isinstance(value, list) or len(value) != len(default):
                raise ConfigError(f"'{path}' must be a list of {len(default)} numbers")
            base[key] = [float(v) for v in value]
        elif isinstance(default, bool) or isinstance(default, str):
            base[key] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"'{path}' must be an integer, got {value!r}")
            base[key] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"'{path}' must be a number, got {value!r}")
            base[key] = float(value)
        else:
            base[key] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the YAML file, then flag overrides (``{"section.key": value}``)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, data)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        nested: dict = {}
        cursor = nested
        *parents, leaf = dotted.split(".")
        for part in parents:
            cursor = cursor.setdefault(part, {})
        cursor[leaf] = value
        _merge(cfg, nested)
    return cfg


def geometry_from(cfg: dict) -> Geometry:
    g = cfg["geometry"]
    return Geometry(n=g["n"], views=g["views"], arc=g["arc"])


def limits_from(cfg: dict) -> RandomizationLimits:
    p = cfg["phantom"]
    k_lo, k_hi = p["k_range"]
    if k_lo != int(k_lo) or k_hi != int(k_hi):
        raise ConfigError("phantom.k_range must hold integers")
    return RandomizationLimits(
        k_range=(int(k_lo), int(k_hi)),
        background_range=tuple(p["background_range"]),
        amplitude_range=tuple(p["amplitude_range"]),
        center_range=tuple(p["center_range"]),
        center_radius=p["center_radius"],
        axes_range=tuple(p["axes_range"]),
        phi_range=tuple(p["phi_range"]),
        diffusion_range=tuple(p["diffusion_range"]),
    )


def train_config_from(cfg: dict) -> TrainConfig:
    t, g = cfg["train"], cfg["geometry"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"],
                       dataset_size=t["dataset_size"], split=t["split"], seed=cfg["seed"],
                       total_counts=cfg["counts"]["total_counts"], n=g["n"], views=g["views"],
                       lr=t["lr"], beta1=t["beta1"], beta2=t["beta2"])


def network_config_from(cfg: dict) -> NetworkConfig:
    return NetworkConfig(seed=cfg["seed"], **cfg["network"])


def osem_config_from(cfg: dict) -> OsemConfig:
    return OsemConfig(**cfg["osem"])


def _validated(build, cfg):
    try:
        return build(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# -- commands ----------------------------------------------------------------


def cmd_simulate(args, cfg: dict) -> int:
    tcfg = _validated(train_config_from, cfg)
    geom = _validated(geometry_from, cfg)
    out = Path(args.out or cfg["paths"]["dataset"])
    if args.phantom:
        A = build_system_matrix(geom)
        spec = preset_phantom(args.phantom, geom.n)
        truth, y = simulate_phantom(spec, A, tcfg.total_counts, cfg["seed"])
        out.mkdir(parents=True, exist_ok=True)
        fileio.write_image_csv(out / "truth.csv", truth)
        fileio.write_pgm(out / "truth.pgm", truth)
        fileio.write_sinogram_csv(out / "sinogram.csv", y)
        save_spec(spec, out / "spec.json")
        print(f"phantom {args.phantom}: wrote truth, sinogram and spec to {out} "
              f"(seed {cfg['seed']})")
        return 0
    limits = _validated(limits_from, cfg)
    A = build_system_matrix(geom)
    ds = generate_dataset(limits, tcfg, A, out_dir=out)
    print(f"wrote {len(ds)} samples (seed {tcfg.seed}, n={geom.n}, views={geom.views}) to {out}")
    return 0


def cmd_train(args, cfg: dict) -> int:
    tcfg = _validated(train_config_from, cfg)
    net = _validated(network_config_from, cfg)
    out = Path(args.out or cfg["paths"]["checkpoint"])
    if args.dataset:
        ds = Dataset.load(args.dataset, limit=args.size)
        A = build_system_matrix(ds.geometry)
    else:
        A = build_system_matrix(_validated(geometry_from, cfg))
        ds = generate_dataset(_validated(limits_from, cfg), tcfg, A)
    if args.dataset and args.n is not None and ds.geometry.n != args.n:
        raise GeometryMismatch(f"dataset grid {ds.geometry.n} does not match --n {args.n}")
    model = DnrNetModel(A, net)
    report = train(model, ds, tcfg,
                   on_epoch=lambda r: log.info("epoch %d train %.6g val %.6g", r["epoch"],
                                               r["train_loss"], r["val_loss"]))
    save_model(model, out)
    report.write(out / "report.csv")
    print(f"initial validation MSE {report.initial_val_loss:.6g}")
    print(f"final validation MSE {report.final_val_loss:.6g}")
    print(f"final training MSE {report.final_train_loss:.6g} "
          f"(initial {report.initial_train_loss:.6g})")
    return 0


def _output_stem(prefix) -> Path:
    """``out/recon`` and ``out/recon.csv`` both name the pair recon.csv + recon.pgm."""
    prefix = Path(prefix)
    if prefix.suffix.lower() in (".csv", ".pgm"):
        prefix = prefix.with_suffix("")
    return prefix


def _write_image(prefix, img: np.ndarray) -> Path:
    stem = _output_stem(prefix)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path = stem.parent / (stem.name + ".csv")
    fileio.write_image_csv(csv_path, img)
    fileio.write_pgm(stem.parent / (stem.name + ".pgm"), img)
    return csv_path


def cmd_reconstruct(args, cfg: dict) -> int:
    if args.method == "dnr" and not args.checkpoint:
        raise ConfigError("--method dnr needs --checkpoint")
    if args.butterworth is not None:
        _validated(lambda c: ButterworthConfig(cutoff=args.butterworth,
                                               order=c["butterworth"]["order"]), cfg)
    osem_cfg = _validated(osem_config_from, cfg)
    y = fileio.read_csv(args.sinogram)
    if args.method == "dnr":
        model = load_model(args.checkpoint)
        if y.shape != model.geometry.sinogram_shape:
            raise GeometryMismatch(f"sinogram {y.shape} does not match checkpoint geometry "
                                   f"{model.geometry.sinogram_shape}")
        img = reconstruct(model, y).astype(np.float64)
    else:
        geom = _validated(geometry_from, cfg)
        if y.shape != geom.sinogram_shape:
            raise GeometryMismatch(f"sinogram {y.shape} does not match configured geometry "
                                   f"{geom.sinogram_shape}; set --n/--views")
        init = fileio.read_csv(args.init) if args.init else None
        if init is not None and init.shape != geom.image_shape:
            raise GeometryMismatch(f"init image {init.shape} does not match {geom.image_shape}")
        img = osem_reconstruct(y, build_system_matrix(geom), osem_cfg, init=init)
    if args.butterworth is not None:
        img = butterworth_filter(img, ButterworthConfig(args.butterworth,
                                                        cfg["butterworth"]["order"]))
    csv_path = _write_image(args.out, img)
    print(f"wrote {csv_path} ({img.shape[0]}x{img.shape[1]})")
    return 0


def _phantom_spec(args, n: int) -> PhantomSpec:
    if args.spec:
        spec = load_spec(args.spec)
    else:
        spec = preset_phantom(args.phantom, n)
    if spec.n != n:
        raise GeometryMismatch(f"phantom spec is {spec.n}x{spec.n}, truth is {n}x{n}")
    return spec


def cmd_evaluate(args, cfg: dict) -> int:
    if not args.spec and not args.phantom:
        raise ConfigError("evaluate needs --spec or --phantom for the ROI masks")
    truth = fileio.read_csv(args.truth)
    spec = _phantom_spec(args, truth.shape[0])
    recons = {}
    for item in args.recons:
        # An existing file wins; otherwise split LABEL=PATH at the last "=" so
        # labels such as "OSEM fc=0.3" survive.
        label, sep, path = ("", "", item) if Path(item).exists() else item.rpartition("=")
        if not sep:
            label, path = Path(item).stem, item
        key, k = label, 2
        while key in recons:
            key, k = f"{label} ({k})", k + 1
        img = fileio.read_csv(path)
        if img.shape != truth.shape:
            raise GeometryMismatch(f"{path}: shape {img.shape} does not match truth {truth.shape}")
        recons[key] = img
    rows = score_table(recons, truth, spec, SsimConfig())
    name = args.phantom or spec.name
    print(format_table(rows, name))
    if args.csv:
        write_table_csv(args.csv, rows, name)
    return 0


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--n", type=int, help="image side length")
    common.add_argument("--views", type=int)
    common.add_argument("--counts", type=float, help="expected total counts per sinogram")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dnrecon", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate a training dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--size", type=int, help="number of samples")
    p.add_argument("--phantom", choices=["A", "B", "shepp_logan"],
                   help="write one evaluation phantom instead of a dataset")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--dataset", help="dataset directory (simulated in memory if omitted)")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--size", type=int, help="dataset size (limits a loaded dataset)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct one sinogram")
    p.add_argument("sinogram", help="sinogram CSV")
    p.add_argument("--method", choices=["dnr", "osem"], default="osem")
    p.add_argument("--checkpoint")
    p.add_argument("--iterations", type=int)
    p.add_argument("--subsets", type=int)
    p.add_argument("--butterworth", type=float, metavar="FC",
                   help="post-filter cut-off in cycles/pixel")
    p.add_argument("--init", help="OSEM starting image CSV")
    p.add_argument("--out", required=True, help="output prefix (.csv and .pgm are written)")

    p = sub.add_parser("evaluate", parents=[common], help="score reconstructions")
    p.add_argument("--truth", required=True)
    p.add_argument("--phantom", choices=["A", "B", "shepp_logan"])
    p.add_argument("--spec", help="phantom spec JSON providing the ROI masks")
    p.add_argument("--csv", help="also write the table as CSV")
    p.add_argument("recons", nargs="+", help="reconstruction CSVs, optionally LABEL=PATH")
    return parser


def _overrides(args) -> dict:
    flags = {
        "seed": "seed", "n": "geometry.n", "views": "geometry.views",
        "counts": "counts.total_counts", "size": "train.dataset_size",
        "epochs": "train.epochs", "batch_size": "train.batch_size", "lr": "train.lr",
        "blocks": "network.n_blocks", "channels": "network.channels",
        "iterations": "osem.iterations", "subsets": "osem.subsets",
    }
    return {key: getattr(args, attr) for attr, key in flags.items() if hasattr(args, attr)}


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "reconstruct": cmd_reconstruct,
            "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, _overrides(args))
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GeometryMismatch as exc:
        print(f"geometry mismatch: {exc}", file=sys.stderr)
        return EXIT_GEOMETRY
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, fileio.FormatError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # remaining input problems, e.g. negative counts in a sinogram file
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
