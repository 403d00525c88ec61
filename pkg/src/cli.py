"""Command-line entry point: ``python -m src.cli <command> ...``."""
from __future__ import annotations

import argparse
import contextlib
import csv
import itertools
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence

from .config import ConfigDocument, apply_overrides, settings
from .errors import ConfigError, DatasetError, McnetError, TrainingError
from .graph import ExperimentResources, run_experiment
from .images import list_images, read_image, resize_to_256, write_image, write_noise
from .metrics import summarize_runs
from .pipeline import (
    CONFIG_TABLES,
    PROFILES,
    DatasetManifest,
    ExperimentConfig,
    config_to_toml,
    curriculum_finetune,
    evaluate_checkpoint,
    load_experiment,
    resplit,
    split_dataset,
    synth_corpus,
    train_denoiser,
)
from .stego import COST_MODELS, embed, image_rng
from .verify import run_checks

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE = 0, 1


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {number}")
    return number


def _configure_logging(verbose: bool, log_file: Optional[Path] = None) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        handlers=handlers,
        force=True,
    )


@contextlib.contextmanager
def run_lock(run_dir: Path) -> Iterator[None]:
    """Serialize training per run directory with an exclusive ``run.lock`` file."""
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise TrainingError(f"{run_dir} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _prepare_run_dir(run_dir: Path, exp: ExperimentConfig) -> None:
    for sub in ("checkpoints", "logs", "reports"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(config_to_toml(exp), encoding="utf-8")
    src = Path(exp.run.manifest) if exp.run.manifest else None
    if src is not None and src.resolve() != (run_dir / "manifest.csv").resolve():
        shutil.copyfile(src, run_dir / "manifest.csv")
        if src.with_suffix(".json").exists():
            shutil.copyfile(src.with_suffix(".json"), run_dir / "manifest.json")


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    exp = load_experiment(args.config, profile=args.profile)
    run_updates = {}
    if getattr(args, "manifest", None):
        run_updates["manifest"] = str(args.manifest)
    if getattr(args, "dn_checkpoint", None):
        run_updates["dn_checkpoint"] = str(args.dn_checkpoint)
    if getattr(args, "source", None):
        run_updates["source_checkpoint"] = str(args.source)
    if run_updates:
        exp = ExperimentConfig(
            model=exp.model, schedule=exp.schedule, dn_schedule=exp.dn_schedule, finetune=exp.finetune,
            run=apply_overrides(exp.run, run_updates), profile=exp.profile,
        )
    if not exp.run.manifest:
        raise ConfigError("no manifest given (use --manifest or [run] manifest)")
    s = exp.schedule
    logger.info(
        "profile %s: %d epochs, batch %d images (%d pairs), lr %g decayed x%g every %d epochs, seed %d",
        exp.profile, s.epochs, 2 * s.pairs_per_batch, s.pairs_per_batch, s.lr, s.decay_factor, s.decay_every, s.seed,
    )
    return exp


# --------------------------------------------------------------------------- commands


def cmd_gen_synth(args: argparse.Namespace) -> int:
    images = synth_corpus(args.n, args.size, args.seed)
    out = Path(args.out)
    for i, image in enumerate(images):
        write_image(out / f"cover_{i:05d}.pgm", image)
    logger.info("wrote %d covers of %dx%d to %s (seed %d)", len(images), args.size, args.size, out, args.seed)
    return EXIT_OK


def _embed_directory(
    paths: Sequence[Path], offset: int, args: argparse.Namespace, out: Path, subdir: str = "."
) -> list[tuple[str, str]]:
    def _job(item: tuple[int, Path]) -> tuple[str, str, float]:
        index, path = item
        cover = read_image(path)
        cover_path = path
        if args.resize:
            cover = resize_to_256(cover)
            cover_path = write_image(out / subdir / "cover" / f"{path.stem}.pgm", cover)
        result = embed(cover, args.model, args.payload, image_rng(args.seed, index))
        stego_path = write_image(out / subdir / "stego" / f"{path.stem}.pgm", result.stego)
        if args.noise_out:
            write_noise(Path(args.noise_out) / subdir / f"{path.stem}.{args.noise_format}", result.noise)
        return str(Path(cover_path).resolve()), str(stego_path.resolve()), result.bpp

    items = list(enumerate(paths, start=offset))
    with ThreadPoolExecutor(max_workers=settings.num_threads) as pool:
        results = list(pool.map(_job, items))
    for (_, path), (_, _, bpp) in zip(items, results):
        logger.info("%s: achieved %.6f bpp (target %g)", path.name, bpp, args.payload)
    return [(cover, stego) for cover, stego, _ in results]


def cmd_embed(args: argparse.Namespace) -> int:
    out = Path(args.out)
    primary = list_images(args.cover_dir)
    if not primary:
        raise DatasetError(f"no .pgm/.png images in {args.cover_dir}")
    secondary = list_images(args.secondary_dir) if args.secondary_dir else []
    logger.info("embedding %d covers with %s at %g bpp (seed %d)", len(primary) + len(secondary), args.model, args.payload, args.seed)
    pairs = _embed_directory(primary, 0, args, out)
    extra = _embed_directory(secondary, len(primary), args, out, "secondary") if secondary else []
    split_seed = args.seed if args.split_seed is None else args.split_seed
    manifest = split_dataset(
        pairs, split_seed, extra,
        carve_dn=not args.no_dn_split,
        metadata={"cost_model": args.model, "payload_bpp": args.payload, "embed_seed": args.seed},
    )
    path = manifest.write(out / "manifest.csv")
    logger.info("manifest written to %s: %s", path, manifest.counts())
    return EXIT_OK


def cmd_train_dn(args: argparse.Namespace) -> int:
    exp = _experiment(args)
    run_dir = Path(args.run_dir)
    with run_lock(run_dir):
        _prepare_run_dir(run_dir, exp)
        _configure_logging(args.verbose, run_dir / "logs" / "run.log")
        manifest = DatasetManifest.read(exp.run.manifest)
        result = train_denoiser(manifest, exp.dn_schedule, exp.model, run_dir=run_dir)
    print(f"denoiser: best epoch {result.best_epoch}, val loss {result.best_metric:.6g}, checkpoint {result.checkpoint}")
    return EXIT_OK


def _run_cell(exp: ExperimentConfig, run_dir: Path, resume: Optional[str] = None,
              eval_manifest: Optional[DatasetManifest] = None) -> dict[str, Any]:
    manifest = DatasetManifest.read(exp.run.manifest)
    resources = ExperimentResources(config=exp, manifest=manifest, eval_manifest=eval_manifest)
    state = run_experiment(resources, run_dir, dn_checkpoint=exp.run.dn_checkpoint or None, resume=resume)
    if state.get("error"):
        raise TrainingError(state["error"])
    return state


def cmd_train(args: argparse.Namespace) -> int:
    exp = _experiment(args)
    run_dir = Path(args.run_dir)
    with run_lock(run_dir):
        _prepare_run_dir(run_dir, exp)
        _configure_logging(args.verbose, run_dir / "logs" / "run.log")
        state = _run_cell(exp, run_dir, resume=args.resume)
    print(f"best epoch {state['best_epoch']}, val P_E {state['best_val_pe']:.4f}")
    for metric, value in (state.get("report") or {}).items():
        print(f"{metric}: {value}")
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    exp = _experiment(args)
    if not exp.run.source_checkpoint:
        raise ConfigError("finetune needs --source or [run] source_checkpoint")
    run_dir = Path(args.run_dir)
    with run_lock(run_dir):
        _prepare_run_dir(run_dir, exp)
        _configure_logging(args.verbose, run_dir / "logs" / "run.log")
        manifest = DatasetManifest.read(exp.run.manifest)
        result = curriculum_finetune(exp.run.source_checkpoint, manifest, exp.finetune, exp.model, run_dir=run_dir)
    print(f"fine-tuned: best epoch {result.best_epoch}, val P_E {result.best_metric:.4f}, checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if not Path(args.checkpoint).exists():
        raise McnetError(f"checkpoint {args.checkpoint} does not exist")
    manifest = DatasetManifest.read(args.manifest)
    report = evaluate_checkpoint(args.checkpoint, manifest, args.split, out_dir=args.out, orientation=args.orientation)
    for metric, value in report.rows():
        print(f"{metric}: {value}")
    return EXIT_OK


# --------------------------------------------------------------------------- ablation


def _flatten(table: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    # TOML parses `model.depth = [...]` into nested tables
    out: dict[str, Any] = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, f"{name}."))
        else:
            out[name] = value
    return out


def _grid_cells(doc: ConfigDocument) -> tuple[list[str], list[tuple[Any, ...]]]:
    grid = _flatten(doc.table("grid"))
    axes = [k for k in grid if k != "split_seeds"]
    if not axes or any(not isinstance(grid[k], list) or not grid[k] for k in axes):
        raise ConfigError(f"{doc.path}: [grid] needs at least one non-empty list axis such as model.depth = [2, 6]")
    for axis in axes:
        table, _, key = axis.partition(".")
        if table not in CONFIG_TABLES or not key:
            raise doc.error("grid", f'"{axis}"', f"axis must be <table>.<field> with table in {CONFIG_TABLES}")
    return axes, list(itertools.product(*(grid[a] for a in axes)))


def _cell_experiment(base: ExperimentConfig, axes: Sequence[str], values: Sequence[Any], doc: ConfigDocument) -> ExperimentConfig:
    updates: dict[str, dict[str, Any]] = {}
    for axis, value in zip(axes, values):
        table, _, key = axis.partition(".")
        updates.setdefault(table, {})[key] = value
    parts = {name: getattr(base, name) for name in CONFIG_TABLES}
    for table, values_ in updates.items():
        parts[table] = apply_overrides(parts[table], values_, doc, "grid")
    return ExperimentConfig(profile=base.profile, **parts)


def cmd_ablate(args: argparse.Namespace) -> int:
    doc = ConfigDocument.read(args.grid)
    base = load_experiment(None, profile=args.profile)
    base_tables = doc.table("base")
    parts = {name: getattr(base, name) for name in CONFIG_TABLES}
    for name, values in base_tables.items():
        if name not in CONFIG_TABLES or not isinstance(values, dict):
            raise doc.error("base", name, f"expected a [base.<table>] with table in {CONFIG_TABLES}")
        parts[name] = apply_overrides(parts[name], values, doc, f"base.{name}")
    if args.manifest:
        parts["run"] = apply_overrides(parts["run"], {"manifest": str(args.manifest)})
    base = ExperimentConfig(profile=args.profile, **parts)

    axes, cells = _grid_cells(doc)
    split_seeds = doc.table("grid").get("split_seeds", [None])
    mismatch = doc.table("mismatch")
    train_manifests = mismatch.get("train", [base.run.manifest])
    test_manifests = mismatch.get("test", [None])
    if not all(train_manifests):
        raise ConfigError("ablation needs a manifest ([base.run] manifest, --manifest or [mismatch] train)")

    out = Path(args.out)
    jobs = []
    for values, train_m, test_m, split_seed in itertools.product(cells, train_manifests, test_manifests, split_seeds):
        index = len(jobs)
        exp = _cell_experiment(base, axes, values, doc)
        jobs.append((index, exp, values, train_m, test_m, split_seed))
    logger.info("ablation: %d cells over axes %s", len(jobs), ", ".join(axes))

    def _job(job: tuple) -> dict[str, Any]:
        index, exp, values, train_m, test_m, split_seed = job
        cell_dir = out / "cells" / f"{index:03d}"
        manifest_path = Path(train_m)
        if split_seed is not None:
            manifest_path = resplit(DatasetManifest.read(train_m), int(split_seed)).write(cell_dir / "manifest.csv")
        exp = ExperimentConfig(
            model=exp.model, schedule=exp.schedule, dn_schedule=exp.dn_schedule, finetune=exp.finetune,
            run=apply_overrides(exp.run, {"manifest": str(manifest_path)}), profile=exp.profile,
        )
        eval_manifest = DatasetManifest.read(test_m) if test_m else None
        with run_lock(cell_dir):
            _prepare_run_dir(cell_dir, exp)
            state = _run_cell(exp, cell_dir, eval_manifest=eval_manifest)
        report = state["report"]
        row = dict(zip(axes, values))
        row.update(train_manifest=train_m, test_manifest=test_m or train_m, split_seed="" if split_seed is None else split_seed)
        row.update(P_E=report["P_E"], AUC=report["AUC"], WAUC=report["WAUC"])
        return row

    with ThreadPoolExecutor(max_workers=settings.num_threads) as pool:
        rows = list(pool.map(_job, jobs))

    out.mkdir(parents=True, exist_ok=True)
    columns = list(rows[0])
    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)

    groups: dict[tuple, list[float]] = {}
    for row in rows:
        key = tuple(str(row[c]) for c in axes + ["train_manifest", "test_manifest"])
        groups.setdefault(key, []).append(row["P_E"])
    with (out / "ablation_summary.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(axes + ["train_manifest", "test_manifest", "runs", "P_E_mean", "P_E_std"])
        for key, values in groups.items():
            mean, std = summarize_runs(values)
            writer.writerow(list(key) + [len(values), mean, std])
    for row in rows:
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    result = run_checks(seed=args.seed, only=args.only or None)
    print(result.summary())
    return EXIT_OK if result.ok else EXIT_FAILURE


# --------------------------------------------------------------------------- parser


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML experiment file ([model], [schedule], [run], ...)")
    p.add_argument("--profile", choices=PROFILES, default="desk")
    p.add_argument("--run-dir", required=True, type=Path)
    p.add_argument("--manifest", type=Path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcnet", description="Steganalysis lab: embedding, training, evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic PGM cover corpus")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--size", type=_positive_int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("embed", help="simulate embedding and write a split manifest")
    p.add_argument("--cover-dir", type=Path, required=True)
    p.add_argument("--secondary-dir", type=Path)
    p.add_argument("--model", choices=sorted(COST_MODELS), default="inverse_variance")
    p.add_argument("--payload", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int)
    p.add_argument("--no-dn-split", action="store_true", help="do not carve a denoiser subset from train")
    p.add_argument("--resize", action="store_true", help="resize covers to 256x256 first")
    p.add_argument("--noise-out", type=Path)
    p.add_argument("--noise-format", choices=("png", "txt"), default="png")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train-dn", help="train the denoiser subnetwork")
    _add_run_args(p)
    p.set_defaults(func=cmd_train_dn)

    p = sub.add_parser("train", help="train (and evaluate) the detector")
    _add_run_args(p)
    p.add_argument("--dn-checkpoint", type=Path)
    p.add_argument("--resume", type=Path, help="continue from a last.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="curriculum fine-tuning from a higher-payload checkpoint")
    _add_run_args(p)
    p.add_argument("--source", type=Path)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--orientation", choices=("reference", "prose"), default="reference")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a grid of experiments")
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--profile", choices=PROFILES, default="desk")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the gradient, oracle and persistence checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--only", action="append", help="run only the named check (repeatable)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except McnetError as e:
        logger.error("%s", e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
