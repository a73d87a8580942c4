"""Command-line entry point.

Exit codes: 0 success, 1 user error (bad flags, bad files, bad configs),
2 internal error (simulation blow-up, training divergence, bugs).

Value precedence for every subcommand, highest first:
  1. flags given explicitly on the command line
  2. values from the JSON file passed with --config
  3. built-in defaults
The only environment override is PLASMONET_OUT_ROOT: when set, relative
*output* paths are created under that directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Optional

import numpy as np

from . import figures
from .em.fdtd import SimConfig, run_fdtd
from .em.spectral import SpectralGrid
from .errors import PlasmonetError, ConfigError, DatasetError, FormatError, GeometryError, ShapeError
from .geometry import GenConfig, Mask, StructureSpec, rasterize, sample_structure
from .nn import (ModelConfig, TrainConfig, load_checkpoint, model_forward,
                 reference_config, tiny_config)
from .pipeline import (DatasetManifest, evaluate, generate_dataset,
                       split_dataset, train)

USER_ERRORS = (ConfigError, DatasetError, FormatError, GeometryError,
               ShapeError, FileNotFoundError, IsADirectoryError,
               NotADirectoryError, PermissionError)


class _UsageError(Exception):
    def __init__(self, parser: argparse.ArgumentParser, message: str):
        super().__init__(message)
        self.parser = parser


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad usage with exit code 1 instead of 2."""

    def error(self, message):
        raise _UsageError(self, message)


def _out_path(path: str) -> str:
    """Apply the PLASMONET_OUT_ROOT override to a relative output path."""
    root = os.environ.get("PLASMONET_OUT_ROOT", "")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _load_json(path: str, what: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"{what} {path!r} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError(f"{what} {path!r} must hold a JSON object")
    return doc


def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    """Fill flag values left at None from --config, then from defaults."""
    file_values = {}
    if getattr(args, "config", None):
        file_values = _load_json(args.config, "config file")
    known = {a.dest: a.default for a in parser._actions
             if a.dest not in ("help", "config")}
    for key in file_values:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in config file; known keys: "
                              + ", ".join(sorted(known)))
    for dest, default in known.items():
        if getattr(args, dest, None) is None:
            value = file_values.get(dest, default)
            setattr(args, dest, value)


def _load_mask(path: str, width: Optional[int] = None,
               height: Optional[int] = None) -> Mask:
    """A mask file is either a binary PGM or a JSON structure spec
    (rasterized at width x height, default 64 x 64). A one-element JSON
    array, as gen-structures emits for --n 1, also works."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob.startswith(b"P5"):
        return Mask.from_pgm(blob)
    text = blob.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"mask file {path!r} is neither a P5 PGM nor JSON: "
                          f"{e}") from e
    if isinstance(doc, list):
        if len(doc) != 1:
            raise ShapeError(f"{path!r} holds {len(doc)} structure specs; "
                             "a mask argument needs exactly one")
        doc = doc[0]
    spec = StructureSpec.from_json(json.dumps(doc))
    return rasterize(spec, width or 64, height or 64)


def _write_spectrum_csv(path: Optional[str], wavelengths: np.ndarray,
                        values: np.ndarray) -> None:
    lines = [f"{float(wl)!r},{float(v)!r}" for wl, v in zip(wavelengths, values)]
    text = "\n".join(lines) + "\n"
    if path:
        with open(_out_path(path), "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _read_spectrum_csv(path: str) -> tuple:
    wl, vals = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("wavelength"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise FormatError(f"{path}:{ln}: expected 'wavelength,value'")
            try:
                wl.append(float(parts[0]))
                vals.append(float(parts[1]))
            except ValueError as e:
                raise FormatError(f"{path}:{ln}: {e}") from e
    if not wl:
        raise FormatError(f"{path}: no spectrum rows found")
    return np.array(wl), np.array(vals)


def _sim_config(args) -> SimConfig:
    doc = _load_json(args.sim_config, "simulation config") if args.sim_config else {}
    if args.resolution_nm is not None:
        for key in ("dx_nm", "dy_nm", "dz_nm"):
            doc[key] = args.resolution_nm
    cfg = SimConfig.from_dict({**SimConfig().to_dict(), **doc})
    return cfg


def _gen_config(args) -> GenConfig:
    if getattr(args, "gen_config", None):
        return GenConfig.from_dict(_load_json(args.gen_config, "generator config"))
    return GenConfig()


def _model_config(args, n_out: int, width: int, height: int) -> ModelConfig:
    if args.model_config:
        return ModelConfig.from_dict(_load_json(args.model_config, "model config"))
    if args.arch == "reference":
        base = reference_config()
    else:
        base = tiny_config(n_out=n_out)
    return dataclasses.replace(base, input_width=width, input_height=height,
                               n_out=n_out)


# ------------------------------------------------------------ subcommands

def _cmd_gen_structures(args) -> int:
    gen_cfg = _gen_config(args)
    specs = [json.loads(sample_structure(args.seed + i, gen_cfg).to_json())
             for i in range(args.n)]
    text = json.dumps(specs, indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(_out_path(args.out), "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _sim_one(task):
    mask_path, out_csv, cfg_doc, n_points = task
    cfg = SimConfig.from_dict(cfg_doc)
    grid = SpectralGrid(n_points=n_points)
    mask = _load_mask(mask_path)
    triplet = run_fdtd(mask, cfg, grid)
    _write_spectrum_csv(out_csv, grid.wavelengths_nm(), triplet.A)
    return out_csv


def _cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    masks = [args.mask] if isinstance(args.mask, str) else args.mask
    if len(masks) > 1:
        out_dir = _out_path(args.out or ".")
        os.makedirs(out_dir, exist_ok=True)
        tasks = []
        for path in masks:
            stem = os.path.splitext(os.path.basename(path))[0]
            tasks.append((path, os.path.join(out_dir, stem + ".csv"),
                          cfg.to_dict(), args.n_points))
        if args.workers > 1:
            import multiprocessing as mp
            with mp.get_context("spawn").Pool(args.workers) as pool:
                for done in pool.imap(_sim_one, tasks):
                    print(done)
        else:
            for task in tasks:
                print(_sim_one(task))
        return 0
    grid = SpectralGrid(n_points=args.n_points)
    mask = _load_mask(masks[0])
    triplet = run_fdtd(mask, cfg, grid)
    _write_spectrum_csv(args.out, grid.wavelengths_nm(), triplet.A)
    return 0


def _cmd_build_dataset(args) -> int:
    generate_dataset(args.n, args.seed,
                     gen_cfg=_gen_config(args),
                     sim_cfg=_sim_config(args),
                     grid=SpectralGrid(n_points=args.n_points),
                     out_dir=_out_path(args.out),
                     mask_width=args.mask_width,
                     mask_height=args.mask_height,
                     workers=args.workers,
                     progress=args.progress)
    print(os.path.join(_out_path(args.out), "manifest.json"))
    return 0


def _cmd_split(args) -> int:
    try:
        ratios = tuple(float(r) for r in args.ratios.split(","))
    except ValueError as e:
        raise ConfigError(f"bad --ratios value {args.ratios!r}: {e}") from e
    manifest = DatasetManifest.load(args.manifest)
    split_dataset(manifest, ratios=ratios, seed=args.seed, force=args.force)
    manifest.save(args.manifest)
    for name in ("train", "test", "val"):
        print(f"{name}: {len(manifest.ids_for(name))}")
    return 0


def _cmd_train(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    model_cfg = None
    if not args.resume:
        model_cfg = _model_config(args, manifest.grid.n_points,
                                  manifest.mask_width, manifest.mask_height)
        if args.l2 is not None:
            model_cfg = dataclasses.replace(model_cfg, lambda_reg=args.l2)
    doc = TrainConfig().to_dict()
    if args.train_config:
        doc.update(_load_json(args.train_config, "train config"))
    for dest, key in (("lr", "lr"), ("batch_size", "batch_size"),
                      ("epochs", "epochs"), ("l2", "l2"),
                      ("checkpoint_interval", "checkpoint_interval"),
                      ("stop_below", "stop_below_train_mse")):
        value = getattr(args, dest)
        if value is not None:
            doc[key] = value
    if args.seed is not None:
        doc["shuffle_seed"] = args.seed
        doc["init_seed"] = args.seed
    if args.init_seed is not None:
        doc["init_seed"] = args.init_seed
    if args.select_best:
        doc["select_best"] = True
    train_cfg = TrainConfig.from_dict(doc)
    if not args.resume and args.l2 is None and model_cfg.lambda_reg != train_cfg.l2:
        model_cfg = dataclasses.replace(model_cfg, lambda_reg=train_cfg.l2)
    result = train(args.manifest, model_cfg, train_cfg,
                   out_checkpoint=_out_path(args.checkpoint),
                   log_path=_out_path(args.log),
                   resume=args.resume, progress=args.progress)
    print(f"epochs: {result.epochs_run}")
    print(f"final train MSE: {result.final_train_mse!r}")
    print(f"final test MSE: {result.final_test_mse!r}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    splits = tuple(s for s in args.splits.split(",") if s)
    report = evaluate(args.checkpoint, args.manifest, splits=splits,
                      batch_size=args.batch_size)
    text = report.to_json() + "\n"
    if args.out:
        with open(_out_path(args.out), "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_predict(args) -> int:
    cfg, mp, _ = load_checkpoint(args.checkpoint)
    mask = _load_mask(args.mask, cfg.input_width, cfg.input_height)
    pred = model_forward(mask, mp, cfg, mode="infer")
    grid = SpectralGrid(n_points=cfg.n_out)
    _write_spectrum_csv(args.out, grid.wavelengths_nm(), pred)
    return 0


def _cmd_plot(args) -> int:
    wl_sim, sim = _read_spectrum_csv(args.simulated)
    wl_pred, pred = _read_spectrum_csv(args.predicted)
    if wl_sim.shape != wl_pred.shape:
        raise ShapeError(f"curves differ in length: simulated "
                         f"{wl_sim.shape[0]} vs predicted {wl_pred.shape[0]}")
    if not np.allclose(wl_sim, wl_pred, rtol=1e-9, atol=1e-6):
        raise ConfigError("the two spectrum files are on different wavelength grids")
    grid = SpectralGrid(n_points=wl_sim.shape[0],
                        lambda_min_nm=float(wl_sim.min()),
                        lambda_max_nm=float(wl_sim.max()))
    if not np.allclose(grid.wavelengths_nm(), wl_sim, rtol=1e-6, atol=1e-3):
        raise ConfigError("spectrum rows are not on a uniform-frequency grid")
    figures.plot_spectra(pred, sim, grid, _out_path(args.out))
    print(_out_path(args.out))
    return 0


def _cmd_export_activations(args) -> int:
    cfg, _, _ = load_checkpoint(args.checkpoint)
    mask = _load_mask(args.mask, cfg.input_width, cfg.input_height)
    if args.layers.strip() == "all":
        layers = figures.valid_activation_layers(cfg)
    else:
        layers = tuple(s for s in args.layers.split(",") if s)
    written = figures.export_activations(args.checkpoint, mask, layers,
                                         _out_path(args.out_dir))
    for path in written:
        print(path)
    return 0


# --------------------------------------------------------------- parser

def build_parser() -> _Parser:
    parser = _Parser(prog="plasmonet",
                     description="Plasmonic pattern spectra: simulate, "
                                 "learn, predict.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                                parser_class=_Parser)

    def add(name, help_text, func):
        p = sub.add_parser(name, help=help_text,
                           description=help_text + "  Precedence: explicit "
                           "flags beat --config file values beat defaults.")
        p.set_defaults(func=func, parser=p)
        p.add_argument("--config", metavar="FILE",
                       help="JSON object supplying defaults for any flag of "
                            "this subcommand (keys are flag names with "
                            "underscores)")
        return p

    p = add("gen-structures", "Sample random structure specs to JSON.",
            _cmd_gen_structures)
    p.add_argument("--n", type=int, help="number of specs (default 1)")
    p.add_argument("--seed", type=int, help="base RNG seed (default 0); spec i uses seed+i")
    p.add_argument("--gen-config", metavar="FILE", help="generator config JSON")
    p.add_argument("--out", metavar="FILE", help="output JSON path (default stdout)")
    p.set_defaults(_post={"n": 1, "seed": 0})

    p = add("simulate", "Absorption spectrum of mask files via the FDTD solver.",
            _cmd_simulate)
    p.add_argument("--mask", action="append", metavar="FILE", required=False,
                   help="mask file (PGM or JSON structure spec); repeat for a batch")
    p.add_argument("--n-points", type=int, help="spectral points (default 100)")
    p.add_argument("--resolution-nm", type=float,
                   help="cubic cell size in nm (default 10)")
    p.add_argument("--sim-config", metavar="FILE", help="solver config JSON")
    p.add_argument("--workers", type=int,
                   help="parallel processes for a mask batch (default 1)")
    p.add_argument("--out", metavar="PATH",
                   help="output CSV (single mask; default stdout) or "
                        "directory (mask batch)")
    p.set_defaults(_post={"n_points": 100, "workers": 1})

    p = add("build-dataset", "Generate masks, simulate them, write a dataset.",
            _cmd_build_dataset)
    p.add_argument("--n", type=int, help="sample count (default 100)")
    p.add_argument("--seed", type=int, help="base seed (default 0); sample i uses seed+i")
    p.add_argument("--mask-width", type=int, help="mask width px (default 64)")
    p.add_argument("--mask-height", type=int, help="mask height px (default 64)")
    p.add_argument("--n-points", type=int, help="spectral points (default 100)")
    p.add_argument("--resolution-nm", type=float,
                   help="cubic cell size in nm (default 10)")
    p.add_argument("--gen-config", metavar="FILE", help="generator config JSON")
    p.add_argument("--sim-config", metavar="FILE", help="solver config JSON")
    p.add_argument("--workers", type=int, help="parallel processes (default 1)")
    p.add_argument("--progress", action="store_true", default=None,
                   help="print one line per finished sample")
    p.add_argument("--out", metavar="DIR", help="dataset directory (default .)")
    p.set_defaults(_post={"n": 100, "seed": 0, "mask_width": 64,
                          "mask_height": 64, "n_points": 100, "workers": 1,
                          "progress": False, "out": "."})

    p = add("split", "Tag manifest samples with train/test/val splits.",
            _cmd_split)
    p.add_argument("--manifest", metavar="FILE", help="manifest path (required)")
    p.add_argument("--ratios", help="train,test,val fractions (default 0.6,0.3,0.1)")
    p.add_argument("--seed", type=int, help="shuffle seed (default 0)")
    p.add_argument("--force", action="store_true", default=None,
                   help="allow re-splitting an already split manifest")
    p.set_defaults(_post={"ratios": "0.6,0.3,0.1", "seed": 0, "force": False},
                   _required=("manifest",))

    p = add("train", "Train the surrogate on a split dataset.", _cmd_train)
    p.add_argument("--manifest", metavar="FILE", help="manifest path (required)")
    p.add_argument("--arch", choices=("tiny", "reference"),
                   help="base architecture sized to the dataset (default tiny)")
    p.add_argument("--model-config", metavar="FILE",
                   help="model config JSON (overrides --arch)")
    p.add_argument("--train-config", metavar="FILE", help="optimizer config JSON")
    p.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    p.add_argument("--batch-size", type=int, help="minibatch size (default 32)")
    p.add_argument("--epochs", type=int, help="epoch count (default 100)")
    p.add_argument("--l2", type=float, help="L2 coefficient (default 1e-5)")
    p.add_argument("--seed", type=int,
                   help="seed for init and shuffling (default 0)")
    p.add_argument("--init-seed", type=int,
                   help="separate parameter init seed (default --seed)")
    p.add_argument("--checkpoint-interval", type=int,
                   help="epochs between checkpoint writes (default 10)")
    p.add_argument("--stop-below", type=float,
                   help="stop once train MSE < this (default off)")
    p.add_argument("--select-best", action="store_true", default=None,
                   help="also keep best-test-MSE weights in CHECKPOINT.best")
    p.add_argument("--resume", action="store_true", default=None,
                   help="continue from the checkpoint file")
    p.add_argument("--checkpoint", metavar="FILE",
                   help="checkpoint path (default model.ckpt)")
    p.add_argument("--log", metavar="FILE",
                   help="epoch log CSV path (default train_log.csv)")
    p.add_argument("--progress", action="store_true", default=None,
                   help="print one line per epoch")
    p.set_defaults(_post={"arch": "tiny", "checkpoint": "model.ckpt",
                          "log": "train_log.csv", "resume": False,
                          "select_best": False, "progress": False},
                   _required=("manifest",))

    p = add("eval", "Score a checkpoint against dataset splits.", _cmd_eval)
    p.add_argument("--manifest", metavar="FILE", help="manifest path (required)")
    p.add_argument("--checkpoint", metavar="FILE", help="checkpoint path (required)")
    p.add_argument("--splits", help="comma list of splits (default train,test,val)")
    p.add_argument("--batch-size", type=int, help="inference batch size (default 64)")
    p.add_argument("--out", metavar="FILE", help="metrics JSON path (default stdout)")
    p.set_defaults(_post={"splits": "train,test,val", "batch_size": 64},
                   _required=("manifest", "checkpoint"))

    p = add("predict", "Predict a spectrum for one mask with a checkpoint.",
            _cmd_predict)
    p.add_argument("--mask", metavar="FILE", help="mask file (required)")
    p.add_argument("--checkpoint", metavar="FILE", help="checkpoint path (required)")
    p.add_argument("--out", metavar="FILE", help="output CSV (default stdout)")
    p.set_defaults(_post={}, _required=("mask", "checkpoint"))

    p = add("plot", "Overlay simulated and predicted spectra as SVG.", _cmd_plot)
    p.add_argument("--simulated", metavar="FILE", help="simulated CSV (required)")
    p.add_argument("--predicted", metavar="FILE", help="predicted CSV (required)")
    p.add_argument("--out", metavar="FILE", help="output SVG path (required)")
    p.set_defaults(_post={}, _required=("simulated", "predicted", "out"))

    p = add("export-activations", "Dump feature maps of a mask as PGM images.",
            _cmd_export_activations)
    p.add_argument("--checkpoint", metavar="FILE", help="checkpoint path (required)")
    p.add_argument("--mask", metavar="FILE", help="mask file (required)")
    p.add_argument("--layers", help="comma list of layer names, or 'all' "
                                    "(default all)")
    p.add_argument("--out-dir", metavar="DIR", help="output directory (default .)")
    p.set_defaults(_post={"layers": "all", "out_dir": "."},
                   _required=("checkpoint", "mask"))

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        sys.stderr.write("plasmonet: error: a subcommand is required\n")
        return 1
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        e.parser.print_usage(sys.stderr)
        sys.stderr.write(f"{e.parser.prog}: error: {e}\n")
        return 1
    except SystemExit as e:          # --help
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        sys.stderr.write("plasmonet: error: a subcommand is required\n")
        return 1
    try:
        _merge_config(args, args.parser)
        for dest, value in getattr(args, "_post", {}).items():
            if getattr(args, dest, None) is None:
                setattr(args, dest, value)
        for dest in getattr(args, "_required", ()):
            if getattr(args, dest, None) is None:
                raise ConfigError(f"--{dest.replace('_', '-')} is required "
                                  "(flag or config file)")
        if args.command == "simulate" and not args.mask:
            raise ConfigError("--mask is required (flag or config file)")
        return args.func(args)
    except USER_ERRORS as e:
        sys.stderr.write(f"plasmonet {args.command}: error: {e}\n")
        return 1
    except PlasmonetError as e:
        sys.stderr.write(f"plasmonet {args.command}: internal error: {e}\n")
        return 2
    except Exception as e:          # noqa: BLE001 - last-resort funnel
        sys.stderr.write(f"plasmonet {args.command}: internal error: "
                         f"{type(e).__name__}: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
