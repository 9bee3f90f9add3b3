"""Command-line entry point: ``tunet <command> [options]``.

Commands follow the pipeline order::

    phantom -> train -> predict -> [ensemble] -> postprocess -> evaluate
                                   predict -> uncertainty

File naming inside data directories: ``<id>_image.tuv`` (4-channel float32
image), ``<id>_labels.tuv`` (ground truth), ``<id>_probs.tuv`` (3-channel
region probabilities), ``<id>_seg.tuv`` (post-processed labels).

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Errors are reported on stderr as one JSON object, and
files written by a failing command are removed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import RunConfig
from .ensemble import ensemble_average, quantize_uncertainty, uncertainty_map
from .errors import ConfigError, DimensionError, NonFiniteError, TuNetError, VolumeFormatError
from .inference import sliding_window_predict
from .labels import postprocess
from .network import Cascade, RegionProbMaps
from .phantom import SNR_DIFFICULTY, generate_phantom
from .report import evaluate_case, write_report
from .trainer import Case, kfold_split, train_loop
from .training import normalize_volume
from .volume_io import read_labels, read_volume, write_volume

log = logging.getLogger("tunet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "TUNET_NUM_THREADS"


class UsageError(TuNetError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class Outputs:
    """Remembers files and directories a command creates so a failure can undo them."""

    def __init__(self):
        self.files: list[Path] = []
        self.dirs: list[Path] = []
        self.kept: list[Path] = []

    def dir(self, path) -> Path:
        path = Path(path)
        missing = []
        p = path
        while not p.exists():
            missing.append(p)
            p = p.parent
        path.mkdir(parents=True, exist_ok=True)
        self.dirs.extend(reversed(missing))
        return path

    def file(self, path) -> Path:
        path = Path(path)
        self.dir(path.parent)
        if not path.exists():
            self.files.append(path)
        return path

    def keep(self, *paths) -> None:
        """Exempt diagnostic files (and the directories holding them) from rollback."""
        self.kept.extend(Path(p).resolve() for p in paths if Path(p).exists())

    def rollback(self) -> None:
        for f in reversed(self.files):
            if f.exists() and f.resolve() not in self.kept:
                f.unlink()
        for d in reversed(self.dirs):
            root = d.resolve()
            if d.exists() and not any(root == k or root in k.parents for k in self.kept):
                shutil.rmtree(d, ignore_errors=True)


# data helpers ---------------------------------------------------------------------------

def _case_files(directory: Path, suffix: str) -> dict[str, Path]:
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    tail = f"_{suffix}.tuv"
    return {p.name[:-len(tail)]: p for p in sorted(directory.glob(f"*{tail}"))}


def _inputs(paths: list[str], suffix: str) -> dict[str, Path]:
    """Expand files and directories into ``{case_id: path}``."""
    found: dict[str, Path] = {}
    tail = f"_{suffix}.tuv"
    for item in paths:
        p = Path(item)
        if p.is_dir():
            found.update(_case_files(p, suffix))
        elif p.exists():
            found[p.name[:-len(tail)] if p.name.endswith(tail) else p.stem] = p
        else:
            raise FileNotFoundError(f"{p} does not exist")
    if not found:
        raise FileNotFoundError(f"no *{tail} files in {paths}")
    return found


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "fold", None) is not None:
        updates["fold"] = args.fold
    if updates:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **updates})
    return cfg


def _read_probs(path: Path) -> RegionProbMaps:
    vol = read_volume(path)
    if vol.data.shape[0] != 3 or vol.is_label:
        raise VolumeFormatError(f"{path}: expected a 3-channel float probability volume")
    return RegionProbMaps(*vol.data)


def _write_probs(path: Path, p: RegionProbMaps, spacing) -> None:
    write_volume(path, np.stack([np.asarray(m, dtype=np.float32) for m in p]), spacing)


# commands -------------------------------------------------------------------------------

def cmd_phantom(args, out: Outputs) -> None:
    target = out.dir(args.out)
    children = np.random.SeedSequence(args.seed or 0).spawn(args.count)
    for i, child in enumerate(children):
        image, labels = generate_phantom(np.random.default_rng(child), tuple(args.shape), args.difficulty)
        write_volume(out.file(target / f"case{i:03d}_image.tuv"), image)
        write_volume(out.file(target / f"case{i:03d}_labels.tuv"), labels)
    log.info("wrote %d phantoms to %s", args.count, target)


def _load_cases(data_dir: Path, cfg: RunConfig) -> list[Case]:
    images = _case_files(data_dir, "image")
    labels = _case_files(data_dir, "labels")
    ids = sorted(set(images) & set(labels))
    if not ids:
        raise FileNotFoundError(f"no paired <id>_image.tuv / <id>_labels.tuv files in {data_dir}")
    return [Case(i, normalize_volume(read_volume(images[i]).data, cfg.normalization), read_labels(labels[i]))
            for i in ids]


def cmd_train(args, out: Outputs) -> None:
    from filelock import FileLock, Timeout

    cfg = _load_config(args)
    data_dir = Path(args.data or cfg.data_dir or "")
    if not args.data and not cfg.data_dir:
        raise UsageError("train needs --data or data_dir in the config")
    root = out.dir(args.out or cfg.out_dir or "runs")
    cases = _load_cases(data_dir, cfg)
    by_id = {c.case_id: c for c in cases}
    folds = range(cfg.n_folds) if args.all_folds else [cfg.fold]
    lock = FileLock(str(root / "train.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise UsageError(f"{root} is locked by another training run") from exc
    try:
        for fold in folds:
            train_ids, val_ids = kfold_split(list(by_id), fold, cfg.n_folds, cfg.seed)
            fold_dir = out.dir(root / f"fold{fold}")
            fold_cfg = RunConfig.from_dict({**cfg.to_dict(), "fold": fold})
            fold_cfg.save(out.file(fold_dir / "config.json"))
            for name in ("train_log.jsonl", "best.ckpt", "last.ckpt", "last_good.ckpt"):
                out.file(fold_dir / name)
            try:
                result = train_loop([by_id[i] for i in train_ids], [by_id[i] for i in val_ids], fold_cfg,
                                    fold_dir)
            except NonFiniteError:
                out.keep(*(fold_dir / n for n in ("config.json", "train_log.jsonl", "last_good.ckpt")))
                raise
            log.info("fold %d: %d steps, best validation loss %.4f (%s)", fold, result.steps,
                     result.best_val_loss, result.stop_reason)
    finally:
        lock.release()
        lock_path = root / "train.lock"
        if lock_path.exists():
            lock_path.unlink()


def _load_model(path: Path) -> tuple[Cascade, RunConfig]:
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_dict(ckpt.config) if ckpt.config else RunConfig()
    model = Cascade(cfg.cascade_spec(), seed=cfg.seed)
    model.load_state_dict(ckpt.params)
    return model, cfg


def cmd_predict(args, out: Outputs) -> None:
    model, cfg = _load_model(Path(args.checkpoint))
    target = out.dir(args.out)
    for case_id, path in _inputs(args.input, "image").items():
        vol = read_volume(path)
        if vol.data.shape[0] != model.spec.input_channels:
            raise DimensionError(f"{path}: {vol.data.shape[0]} channels, model expects "
                                 f"{model.spec.input_channels}", axis="channels")
        image = normalize_volume(vol.data, cfg.normalization)
        probs = sliding_window_predict(model, image, overlap=args.overlap)
        _write_probs(out.file(target / f"{case_id}_probs.tuv"), probs, vol.spacing)
        log.info("predicted %s", case_id)


def cmd_ensemble(args, out: Outputs) -> None:
    paths = [Path(p) for p in args.input]
    vols = [read_volume(p) for p in paths]
    maps = []
    for p, v in zip(paths, vols):
        if v.data.shape[0] != 3 or v.is_label:
            raise VolumeFormatError(f"{p}: expected a 3-channel float probability volume")
        maps.append(RegionProbMaps(*v.data))
    _write_probs(out.file(args.out), ensemble_average(maps), vols[0].spacing)


def cmd_uncertainty(args, out: Outputs) -> None:
    target = out.dir(args.out)
    for case_id, path in _inputs(args.input, "probs").items():
        vol = read_volume(path)
        if vol.data.shape[0] != 3 or vol.is_label:
            raise VolumeFormatError(f"{path}: expected a 3-channel float probability volume")
        for region, u in zip(("whole", "core", "enh"), uncertainty_map(RegionProbMaps(*vol.data))):
            if args.integer:
                u = quantize_uncertainty(u).astype(np.float32)
            write_volume(out.file(target / f"{case_id}_unc_{region}.tuv"), u, vol.spacing)


def cmd_postprocess(args, out: Outputs) -> None:
    target = out.dir(args.out)
    for case_id, path in _inputs(args.input, "probs").items():
        probs = _read_probs(path)
        labels = postprocess(probs, min_enh_voxels=args.min_enh_voxels, per_component=args.per_component)
        write_volume(out.file(target / f"{case_id}_seg.tuv"), labels, read_volume(path).spacing)


def cmd_evaluate(args, out: Outputs) -> None:
    preds = _inputs(args.pred, "seg")
    truths = _inputs(args.truth, "labels")
    missing = sorted(set(preds) - set(truths))
    if missing:
        raise FileNotFoundError(f"no ground truth for {missing}")
    rows = []
    for case_id in sorted(preds):
        truth = read_volume(truths[case_id])
        pred = read_labels(preds[case_id])
        rows.extend(evaluate_case(case_id, pred, truth.data[0], truth.spacing, surface_only=args.surface))
    target = out.dir(args.out)
    for name in ("report.tsv", "dsc.png", "hd95.png"):
        out.file(target / name)
    written = write_report(rows, target, figures=not args.no_figures)
    print(written["report"])


# parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--fold", type=int, help="override the configured fold index")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tunet", description="Cascaded U-Net brain tumor segmentation.")
    parser.add_argument("--version", action="version", version=f"tunet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="generate synthetic phantoms")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--shape", type=int, nargs=3, default=[32, 32, 32], metavar=("D", "H", "W"))
    p.add_argument("--difficulty", type=float, default=SNR_DIFFICULTY)
    p.set_defaults(func=cmd_phantom, need_out=True)

    p = sub.add_parser("train", parents=[common], help="train the cascade on one or all folds")
    p.add_argument("--data", help="directory of <id>_image.tuv / <id>_labels.tuv pairs")
    p.add_argument("--all-folds", action="store_true")
    p.set_defaults(func=cmd_train, need_out=False)

    p = sub.add_parser("predict", parents=[common], help="sliding-window region probabilities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", nargs="+", required=True, help="image files or directories")
    p.add_argument("--overlap", type=float, default=0.5)
    p.set_defaults(func=cmd_predict, need_out=True)

    p = sub.add_parser("ensemble", parents=[common], help="average probability volumes")
    p.add_argument("--input", nargs="+", required=True)
    p.set_defaults(func=cmd_ensemble, need_out=True)

    p = sub.add_parser("uncertainty", parents=[common], help="per-region uncertainty volumes")
    p.add_argument("--input", nargs="+", required=True, help="probability files or directories")
    p.add_argument("--integer", action="store_true", help="round to integers in [0, 100]")
    p.set_defaults(func=cmd_uncertainty, need_out=True)

    p = sub.add_parser("postprocess", parents=[common], help="decode probabilities into labels")
    p.add_argument("--input", nargs="+", required=True, help="probability files or directories")
    p.add_argument("--min-enh-voxels", type=int, default=500)
    p.add_argument("--per-component", action="store_true")
    p.set_defaults(func=cmd_postprocess, need_out=True)

    p = sub.add_parser("evaluate", parents=[common], help="Dice and HD95 report")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--surface", action="store_true", help="HD95 over boundary voxels only")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate, need_out=True)
    return parser


def _exit_code(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, (UsageError, ConfigError)):
        return EXIT_USAGE, "usage"
    if isinstance(exc, (NonFiniteError, FloatingPointError)):
        return EXIT_NUMERIC, "numeric"
    if isinstance(exc, ArithmeticError):
        return EXIT_NUMERIC, "numeric"
    # malformed volumes, labels, shapes and missing files all count as data errors
    return EXIT_DATA, "data"


def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def main(argv: list[str] | None = None) -> int:
    out = Outputs()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.need_out and not args.out:
            raise UsageError(f"{args.command} needs --out")
        with _thread_limit():
            args.func(args, out)
        return EXIT_OK
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured exit
        out.rollback()
        code, kind = _exit_code(exc)
        err = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
        for attr in ("axis", "name", "channel", "code"):
            if getattr(exc, attr, None) is not None:
                err[attr] = getattr(exc, attr)
        print(json.dumps(err), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
