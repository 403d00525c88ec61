"""Datasets, augmentation, schedules and the three training procedures."""
from __future__ import annotations

import csv
import json
import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Sequence, TypeVar

import numpy as np
from scipy import ndimage

from . import tensor as T
from .checkpoint import (
    check_config,
    load_checkpoint,
    load_denoiser_into,
    read_checkpoint,
    restore,
    save_checkpoint,
    transfer,
)
from .config import ConfigDocument, apply_overrides
from .errors import ConfigError, DatasetError, NonFiniteError, TrainingError
from .images import read_image
from .layers import Module
from .metrics import EvaluationReport, ScoreSet, evaluate, pe_min
from .model import Denoiser, MCNet, ModelConfig, build_denoiser, build_mcnet, desk_config
from .optim import Adamax, step_lr
from .stego import image_rng
from .tensor import Tensor

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "dn_train", "dn_val")
MANIFEST_HEADER = ("cover_path", "stego_path", "source", "split")

# primary source: 40% training pool, 10% validation, 50% test
VAL_FRACTION = 0.1
TEST_FRACTION = 0.5
# denoiser subset carved out of the training pool, split 80/20
DN_FRACTION = 1 / 7
DN_TRAIN_FRACTION = 0.8

ItemT = TypeVar("ItemT")


# --------------------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    cover_path: str
    stego_path: str
    source: str
    split: str


@dataclass
class DatasetManifest:
    """Cover/stego pairs with split labels; relative paths resolve against ``root``."""

    entries: list[ManifestEntry]
    seed: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)
    root: Path = Path(".")

    def __post_init__(self) -> None:
        owner: dict[str, str] = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise DatasetError(f"unknown split {e.split!r} for {e.cover_path}")
            previous = owner.setdefault(e.cover_path, e.split)
            if previous != e.split:
                raise DatasetError(f"{e.cover_path} appears in both {previous} and {e.split}")

    def split(self, name: str) -> list[ManifestEntry]:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r} (expected one of {SPLITS})")
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        return {name: len(self.split(name)) for name in SPLITS}

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(MANIFEST_HEADER)
            for e in self.entries:
                writer.writerow([e.cover_path, e.stego_path, e.source, e.split])
        sidecar = {"seed": self.seed, "metadata": self.metadata, "counts": self.counts()}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            with path.open(newline="", encoding="utf-8") as f:
                rows = list(csv.reader(f))
        except OSError as e:
            raise DatasetError(f"{path}: cannot read manifest: {e}") from e
        if not rows or tuple(rows[0]) != MANIFEST_HEADER:
            raise DatasetError(f"{path}: manifest header must be {','.join(MANIFEST_HEADER)}")
        entries = []
        for number, row in enumerate(rows[1:], start=2):
            if len(row) != len(MANIFEST_HEADER):
                raise DatasetError(f"{path}:{number}: expected {len(MANIFEST_HEADER)} columns, got {len(row)}")
            entries.append(ManifestEntry(*row))
        seed, metadata = 0, {}
        sidecar = path.with_suffix(".json")
        if sidecar.exists():
            info = json.loads(sidecar.read_text(encoding="utf-8"))
            seed, metadata = int(info.get("seed", 0)), info.get("metadata", {})
        return cls(entries=entries, seed=seed, metadata=metadata, root=path.parent)


def split_dataset(
    primary: Sequence[tuple[str, str]],
    seed: int,
    secondary: Sequence[tuple[str, str]] = (),
    primary_source: str = "primary",
    secondary_source: str = "secondary",
    carve_dn: bool = True,
    metadata: Optional[dict[str, Any]] = None,
) -> DatasetManifest:
    """Assign (cover, stego) pairs to splits.

    The primary source is split 40/10/50 into training pool, validation and
    test; every secondary pair joins the training pool. One seventh of the
    pool becomes the denoiser subset (80% dn_train, 20% dn_val) and is
    removed from ``train``.
    """
    if not primary:
        raise DatasetError("primary image list is empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(primary))
    n = len(primary)
    n_val, n_test = round(n * VAL_FRACTION), round(n * TEST_FRACTION)
    n_pool_primary = n - n_val - n_test
    if min(n_val, n_test, n_pool_primary) < 1:
        raise DatasetError(f"{n} primary images are too few for a 40/10/50 split")

    labelled: list[tuple[tuple[str, str], str, str]] = []
    val_idx = order[:n_val]
    test_idx = order[n_val : n_val + n_test]
    pool = [(primary[i], primary_source) for i in order[n_val + n_test :]]
    pool += [(pair, secondary_source) for pair in secondary]
    labelled += [(primary[i], primary_source, "val") for i in val_idx]
    labelled += [(primary[i], primary_source, "test") for i in test_idx]

    pool_order = rng.permutation(len(pool))
    n_dn = round(len(pool) * DN_FRACTION) if carve_dn else 0
    n_dn_train = round(n_dn * DN_TRAIN_FRACTION)
    if carve_dn and (n_dn_train < 1 or n_dn - n_dn_train < 1 or len(pool) - n_dn < 1):
        raise DatasetError(f"training pool of {len(pool)} pairs is too small to carve a denoiser subset")
    for rank, i in enumerate(pool_order):
        pair, source = pool[i]
        split = "dn_train" if rank < n_dn_train else "dn_val" if rank < n_dn else "train"
        labelled.append((pair, source, split))

    entries = [ManifestEntry(cover, stego, source, split) for (cover, stego), source, split in labelled]
    metadata = {**(metadata or {}), "primary_source": primary_source}
    manifest = DatasetManifest(entries=entries, seed=seed, metadata=metadata)
    logger.info("split %d pairs with seed %d: %s", len(entries), seed, manifest.counts())
    return manifest


def resplit(manifest: DatasetManifest, seed: int) -> DatasetManifest:
    """Re-draw the splits of an existing manifest with another seed."""
    primary_source = manifest.metadata.get("primary_source", "primary")
    primary = [(e.cover_path, e.stego_path) for e in manifest.entries if e.source == primary_source]
    secondary = [(e.cover_path, e.stego_path) for e in manifest.entries if e.source != primary_source]
    sources = {e.source for e in manifest.entries if e.source != primary_source}
    carve_dn = any(e.split.startswith("dn_") for e in manifest.entries)
    out = split_dataset(
        primary, seed, secondary, primary_source=primary_source,
        secondary_source=sources.pop() if len(sources) == 1 else "secondary",
        carve_dn=carve_dn, metadata=manifest.metadata,
    )
    out.root = manifest.root
    return out


@dataclass
class PairArrays:
    covers: np.ndarray  # (N, H, W) uint8
    stegos: np.ndarray

    def __len__(self) -> int:
        return len(self.covers)


def load_split(manifest: DatasetManifest, split: str) -> PairArrays:
    entries = manifest.split(split)
    if not entries:
        raise DatasetError(f"split {split!r} is empty")
    covers = [read_image(manifest.resolve(e.cover_path)) for e in entries]
    stegos = [read_image(manifest.resolve(e.stego_path)) for e in entries]
    shapes = {a.shape for a in covers + stegos}
    if len(shapes) != 1:
        raise DatasetError(f"split {split!r} mixes image sizes: {sorted(shapes)}")
    return PairArrays(np.stack(covers), np.stack(stegos))


# --------------------------------------------------------------------------- synthetic corpus


def synth_corpus(n: int, size: int, seed: int) -> list[np.ndarray]:
    """Textured grayscale covers: smoothed noise fields plus geometric edges.

    Amplitudes are spread geometrically over a 20x range, so per-image
    variance spans well over an order of magnitude.
    """
    if n < 1:
        raise DatasetError(f"need at least one image, got {n}")
    amplitudes = np.geomspace(3.0, 60.0, n) if n > 1 else np.array([20.0])
    amplitudes = np.random.default_rng(seed).permutation(amplitudes)
    images = []
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for i in range(n):
        rng = image_rng(seed, i)
        field_ = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=rng.uniform(0.5, 4.0), mode="wrap")
        field_ = (field_ - field_.mean()) / (field_.std() + 1e-12)
        edges = np.zeros((size, size))
        for _ in range(rng.integers(1, 4)):
            if rng.random() < 0.5:
                x0, y0 = rng.integers(0, size, 2)
                x1, y1 = x0 + rng.integers(size // 8, size // 2), y0 + rng.integers(size // 8, size // 2)
                edges[(xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)] += rng.choice([-1.5, 1.5])
            else:
                cx, cy, r = rng.uniform(0, size), rng.uniform(0, size), rng.uniform(size / 10, size / 3)
                edges[(xx - cx) ** 2 + (yy - cy) ** 2 < r * r] += rng.choice([-1.5, 1.5])
        combined = field_ + edges
        combined = (combined - combined.mean()) / (combined.std() + 1e-12)
        img = 128.0 + amplitudes[i] * combined
        images.append(np.clip(np.round(img), 0, 255).astype(np.uint8))
    return images


# --------------------------------------------------------------------------- augmentation and batching


def _dihedral(img: np.ndarray, rotate: bool, flip_v: bool, flip_h: bool) -> np.ndarray:
    if rotate:
        img = np.rot90(img)
    if flip_v:
        img = np.flipud(img)
    if flip_h:
        img = np.fliplr(img)
    return np.ascontiguousarray(img)


def augment(
    covers: np.ndarray, stegos: np.ndarray, p: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rotate by 90 degrees, flip vertically, flip horizontally, each with probability ``p``.

    A pair shares one draw. Returns the transformed arrays and the (N, 3)
    boolean draws in application order.
    """
    if covers.shape != stegos.shape:
        raise DatasetError(f"cover batch {covers.shape} and stego batch {stegos.shape} differ")
    draws = rng.random((len(covers), 3)) < p
    if p == 0:
        return covers.copy(), stegos.copy(), draws
    out_c = np.stack([_dihedral(c, *d) for c, d in zip(covers, draws)])
    out_s = np.stack([_dihedral(s, *d) for s, d in zip(stegos, draws)])
    return out_c, out_s, draws


@dataclass
class Batch:
    covers: np.ndarray
    stegos: np.ndarray

    def images(self) -> np.ndarray:
        """Covers first, then their stegos, as (2B, 1, H, W)."""
        return np.concatenate([self.covers, self.stegos])[:, None]

    def labels(self) -> np.ndarray:
        k = len(self.covers)
        return np.concatenate([np.zeros(k, dtype=np.int64), np.ones(k, dtype=np.int64)])


def iter_batches(pairs: PairArrays, pairs_per_batch: int, seed: int, epoch: int, augment_p: float) -> Iterator[Batch]:
    """Shuffled paired batches; shuffle and augmentation draw from their own streams."""
    order = np.random.default_rng([seed, epoch, 0]).permutation(len(pairs))
    for b, start in enumerate(range(0, len(pairs), pairs_per_batch)):
        idx = np.sort(order[start : start + pairs_per_batch])
        covers, stegos = pairs.covers[idx], pairs.stegos[idx]
        if augment_p > 0:
            covers, stegos, _ = augment(covers, stegos, augment_p, np.random.default_rng([seed, epoch, b + 1]))
        yield Batch(covers, stegos)


class _Failure:
    def __init__(self, error: BaseException) -> None:
        self.error = error


def prefetch(items: Iterable[ItemT], depth: int) -> Iterator[ItemT]:
    """Produce ``items`` on a background thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=max(1, depth))
    done = object()
    stop = threading.Event()

    def _put(item: Any) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _worker() -> None:
        try:
            for item in items:
                if not _put(item):
                    return
        except BaseException as e:  # re-raised on the consumer side
            _put(_Failure(e))
            return
        _put(done)

    thread = threading.Thread(target=_worker, name="batch-prefetch", daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is done:
                return
            if isinstance(item, _Failure):
                raise item.error
            yield item
    finally:
        stop.set()
        thread.join(timeout=1.0)


# --------------------------------------------------------------------------- schedules and experiment config


@dataclass(frozen=True)
class TrainSchedule:
    lr: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 40
    epochs: int = 400
    pairs_per_batch: int = 10
    augment_p: float = 0.4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    select_from_epoch: int = 1
    max_steps: int = 0  # 0 = no limit
    deterministic: bool = True
    prefetch: int = 2
    divergence_factor: float = 10.0
    divergence_patience: int = 5

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1 or self.epochs < 1 or self.pairs_per_batch < 1:
            raise ConfigError("decay_every, epochs and pairs_per_batch must be >= 1")
        if not 0 <= self.augment_p <= 1:
            raise ConfigError(f"augment_p must be in [0, 1], got {self.augment_p}")
        if not 1 <= self.select_from_epoch <= self.epochs:
            raise ConfigError(f"select_from_epoch must be in [1, {self.epochs}], got {self.select_from_epoch}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")

    def lr_at(self, epoch: int) -> float:
        return step_lr(self.lr, self.decay_factor, self.decay_every, epoch)


SCHEDULE_PROFILES: dict[str, dict[str, dict[str, Any]]] = {
    "paper": {
        "dn": dict(lr=1e-3, decay_every=25, epochs=100, pairs_per_batch=10),
        "mcnet": dict(lr=1e-3, decay_every=40, epochs=400, pairs_per_batch=10),
        "finetune": dict(lr=1e-7, decay_every=100, epochs=200, pairs_per_batch=10, select_from_epoch=51),
    },
    "desk": {
        "dn": dict(lr=1e-3, decay_every=10, epochs=30, pairs_per_batch=8),
        "mcnet": dict(lr=1e-3, decay_every=20, epochs=50, pairs_per_batch=8),
        "finetune": dict(lr=1e-7, decay_every=10, epochs=20, pairs_per_batch=8, select_from_epoch=6),
    },
}
PROFILES = tuple(SCHEDULE_PROFILES)


def schedule_profile(profile: str, stage: str) -> TrainSchedule:
    try:
        return TrainSchedule(**SCHEDULE_PROFILES[profile][stage])
    except KeyError:
        raise ConfigError(f"unknown profile/stage {profile}/{stage} (profiles: {', '.join(PROFILES)})") from None


def model_profile(profile: str) -> ModelConfig:
    if profile == "paper":
        return ModelConfig()
    if profile == "desk":
        return desk_config()
    raise ConfigError(f"unknown profile {profile!r} (expected one of {PROFILES})")


@dataclass(frozen=True)
class RunConfig:
    manifest: str = ""
    dn_checkpoint: str = ""
    source_checkpoint: str = ""
    eval_split: str = "test"
    wauc_orientation: str = "reference"


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    schedule: TrainSchedule
    dn_schedule: TrainSchedule
    finetune: TrainSchedule
    run: RunConfig = RunConfig()
    profile: str = "desk"

    def to_dict(self) -> dict[str, Any]:
        return {
            "profile": self.profile,
            "model": self.model.to_dict(),
            "schedule": asdict(self.schedule),
            "dn_schedule": asdict(self.dn_schedule),
            "finetune": asdict(self.finetune),
            "run": asdict(self.run),
        }


CONFIG_TABLES = ("model", "schedule", "dn_schedule", "finetune", "run")


def default_experiment(profile: str = "desk") -> ExperimentConfig:
    return ExperimentConfig(
        model=model_profile(profile),
        schedule=schedule_profile(profile, "mcnet"),
        dn_schedule=schedule_profile(profile, "dn"),
        finetune=schedule_profile(profile, "finetune"),
        profile=profile,
    )


def load_experiment(path: Optional[str | Path], profile: str = "desk") -> ExperimentConfig:
    """Profile defaults overridden by the ``[model]``/``[schedule]``/... tables of a TOML file."""
    exp = default_experiment(profile)
    if path is None:
        return exp
    doc = ConfigDocument.read(path)
    for table in doc.data:
        if table not in CONFIG_TABLES:
            raise doc.error(table, table, f"unknown table (expected one of: {', '.join(CONFIG_TABLES)})")
    parts = {name: getattr(exp, name) for name in CONFIG_TABLES}
    for name in CONFIG_TABLES:
        parts[name] = apply_overrides(parts[name], doc.table(name), doc, name)
    return ExperimentConfig(profile=profile, **parts)


def config_to_toml(exp: ExperimentConfig) -> str:
    """Render an experiment as TOML (copied into every run directory)."""

    def fmt(value: Any) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, (list, tuple)):
            return "[" + ", ".join(fmt(v) for v in value) + "]"
        if isinstance(value, str):
            return json.dumps(value)
        return repr(value)

    data = exp.to_dict()
    lines = [f"# profile: {data.pop('profile')}"]
    for table in CONFIG_TABLES:
        lines.append(f"\n[{table}]")
        lines.extend(f"{k} = {fmt(v)}" for k, v in data[table].items())
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_pe: Optional[float]
    lr: float


class MetricsLog:
    """Append-only ``epoch,train_loss,val_loss,val_pe,lr`` CSV."""

    columns = [f.name for f in fields(EpochRecord)]

    def __init__(self, path: Optional[Path]) -> None:
        self.path = path

    def append(self, record: EpochRecord) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        new = not self.path.exists()
        with self.path.open("a", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            if new:
                writer.writerow(self.columns)
            writer.writerow(["" if v is None else v for v in asdict(record).values()])


@dataclass
class TrainResult:
    model: Module
    history: list[EpochRecord]
    best_epoch: int
    best_metric: float
    checkpoint: Optional[Path]
    steps: int


def _batches(pairs: PairArrays, schedule: TrainSchedule, epoch: int) -> Iterator[Batch]:
    items = iter_batches(pairs, schedule.pairs_per_batch, schedule.seed, epoch, schedule.augment_p)
    return items if schedule.deterministic else prefetch(items, schedule.prefetch)


def _optimizer(model: Module, schedule: TrainSchedule) -> Adamax:
    return Adamax(model.trainable_parameters(), lr=schedule.lr, beta1=schedule.beta1, beta2=schedule.beta2, eps=schedule.eps)


def denoiser_target(batch: Batch, target: str) -> np.ndarray:
    """Residual |I - X| (zero for covers), or the input image itself."""
    images = batch.images().astype(np.float64)
    if target == "image":
        return images
    covers = np.concatenate([batch.covers, batch.covers])[:, None].astype(np.float64)
    return np.abs(images - covers)


def _denoiser_loss(model: Denoiser, batch: Batch, target: str) -> Tensor:
    pred = model(batch.images())
    return T.mse_loss(pred, Tensor(denoiser_target(batch, target).astype(pred.dtype)))


def train_denoiser(
    manifest: DatasetManifest,
    schedule: TrainSchedule,
    config: ModelConfig,
    run_dir: Optional[str | Path] = None,
) -> TrainResult:
    """Regress the denoiser onto residual targets; keep the lowest validation loss."""
    train, val = load_split(manifest, "dn_train"), load_split(manifest, "dn_val")
    logger.info("training denoiser on %d pairs (seed %d, %d epochs)", len(train), schedule.seed, schedule.epochs)
    model = build_denoiser(config, seed=schedule.seed)
    opt = _optimizer(model, schedule)
    run_dir = Path(run_dir) if run_dir else None
    log = MetricsLog(run_dir / "logs" / "dn_metrics.csv" if run_dir else None)

    history: list[EpochRecord] = []
    best_loss, best_epoch, best_state, steps = math.inf, 0, model.state_dict(), 0
    for epoch in range(1, schedule.epochs + 1):
        opt.lr = schedule.lr_at(epoch)
        losses = []
        for batch in _batches(train, schedule, epoch):
            try:
                loss = _denoiser_loss(model, batch, config.dn_target)
                loss.backward()
            except NonFiniteError as e:
                raise TrainingError(f"denoiser epoch {epoch} step {steps + 1}: {e}") from e
            opt.step()
            opt.zero_grad()
            losses.append(loss.item())
            steps += 1
        try:
            val_loss = float(np.mean([
                _denoiser_loss(model, batch, config.dn_target).item()
                for batch in iter_batches(val, schedule.pairs_per_batch, schedule.seed, 0, 0.0)
            ]))
        except NonFiniteError as e:
            raise TrainingError(f"denoiser validation loss is not finite at epoch {epoch} (lr {opt.lr:g}): {e}") from e
        if not np.isfinite(val_loss):
            raise TrainingError(f"denoiser validation loss is {val_loss} at epoch {epoch} (lr {opt.lr:g})")
        record = EpochRecord(epoch, float(np.mean(losses)), val_loss, None, opt.lr)
        history.append(record)
        log.append(record)
        logger.info("dn epoch %d: train %.6g val %.6g lr %g", epoch, record.train_loss, val_loss, opt.lr)
        if val_loss < best_loss:
            best_loss, best_epoch, best_state = val_loss, epoch, model.state_dict()

    model.load_state_dict(best_state)
    path = None
    if run_dir:
        path = save_checkpoint(run_dir / "checkpoints" / "dn_best.ckpt", model, config,
                               {"epoch": best_epoch, "val_loss": best_loss, "seed": schedule.seed}, with_optimizer=False)
    return TrainResult(model, history, best_epoch, best_loss, path, steps)


def predict_scores(model: MCNet, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Stego-class probabilities in eval mode."""
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        probs = model(images[start : start + batch_size])
        out.append(probs.data[:, 1].astype(np.float64))
    return np.concatenate(out)


def validation_metrics(model: MCNet, pairs: PairArrays, batch_size: int = 32) -> tuple[float, float]:
    """(mean BCE, P_E) over a split of pairs."""
    scores = np.concatenate([predict_scores(model, pairs.covers, batch_size), predict_scores(model, pairs.stegos, batch_size)])
    labels = np.r_[np.zeros(len(pairs)), np.ones(len(pairs))]
    loss = T.bce_loss(Tensor(scores), labels).item()
    return loss, pe_min(ScoreSet(scores, labels))


def train_mcnet(
    manifest: DatasetManifest,
    schedule: TrainSchedule,
    config: ModelConfig,
    dn_checkpoint: Optional[str | Path] = None,
    run_dir: Optional[str | Path] = None,
    model: Optional[MCNet] = None,
    resume: Optional[str | Path] = None,
    evaluate_initial: bool = False,
) -> TrainResult:
    """Minimize BCE with Adamax; keep the checkpoint with the lowest validation P_E."""
    fresh = model is None
    if model is None:
        model = build_mcnet(config, seed=schedule.seed)
    if config.preprocessing == "learned_dn":
        if dn_checkpoint:
            load_denoiser_into(model, dn_checkpoint)
        elif fresh and not config.end_to_end:
            raise TrainingError("learned_dn preprocessing with split training needs a denoiser checkpoint")
        model.denoiser.set_trainable(config.end_to_end)

    train, val = load_split(manifest, "train"), load_split(manifest, "val")
    run_dir = Path(run_dir) if run_dir else None
    log = MetricsLog(run_dir / "logs" / "metrics.csv" if run_dir else None)
    best_path = run_dir / "checkpoints" / "best.ckpt" if run_dir else None
    last_path = run_dir / "checkpoints" / "last.ckpt" if run_dir else None

    history: list[EpochRecord] = []
    best_pe, best_epoch, best_state = math.inf, 0, None
    start_epoch, steps, initial_loss, diverged = 1, 0, None, 0
    if resume:
        ckpt = read_checkpoint(resume)
        check_config(ckpt.config, config, resume)
        restore(model, ckpt)
        meta = ckpt.metadata
        start_epoch = int(meta.get("epoch", 0)) + 1
        steps = int(meta.get("steps", 0))
        initial_loss = meta.get("initial_loss")
        diverged = int(meta.get("diverged", 0))
        best_pe, best_epoch = float(meta.get("best_pe", math.inf)), int(meta.get("best_epoch", 0))
        if best_path is not None and best_path.exists():
            best_state = read_checkpoint(best_path).params()
        logger.info("resuming from %s at epoch %d", resume, start_epoch)

    opt = _optimizer(model, schedule)
    logger.info(
        "training on %d pairs, validating on %d (seed %d, epochs %d..%d)",
        len(train), len(val), schedule.seed, start_epoch, schedule.epochs,
    )
    if evaluate_initial:
        val_loss, val_pe = validation_metrics(model, val)
        history.append(EpochRecord(0, math.nan, val_loss, val_pe, 0.0))
        log.append(history[-1])

    for epoch in range(start_epoch, schedule.epochs + 1):
        opt.lr = schedule.lr_at(epoch)
        model.train()
        losses = []
        for batch in _batches(train, schedule, epoch):
            try:
                probs = model(batch.images())
                loss = T.bce_loss(T.select_column(probs, 1), batch.labels())
                loss.backward()
            except NonFiniteError as e:
                raise TrainingError(f"epoch {epoch} step {steps + 1} (lr {opt.lr:g}): {e}") from e
            opt.step()
            opt.zero_grad()
            value = loss.item()
            if initial_loss is None:
                initial_loss = value
            losses.append(value)
            steps += 1
            if schedule.max_steps and steps >= schedule.max_steps:
                break

        val_loss, val_pe = validation_metrics(model, val)
        record = EpochRecord(epoch, float(np.mean(losses)), val_loss, val_pe, opt.lr)
        history.append(record)
        log.append(record)
        logger.info("epoch %d: train %.4f val %.4f P_E %.4f lr %g", epoch, record.train_loss, val_loss, val_pe, opt.lr)

        if record.train_loss > schedule.divergence_factor * initial_loss:
            diverged += 1
            if diverged >= schedule.divergence_patience:
                raise TrainingError(
                    f"training diverged: loss {record.train_loss:.4g} above {schedule.divergence_factor}x "
                    f"initial {initial_loss:.4g} for {diverged} epochs"
                )
        else:
            diverged = 0

        if epoch >= schedule.select_from_epoch and val_pe < best_pe:
            best_pe, best_epoch, best_state = val_pe, epoch, model.state_dict()
            if best_path is not None:
                save_checkpoint(best_path, model, config, {"epoch": epoch, "val_pe": val_pe, "seed": schedule.seed}, with_optimizer=False)
        if last_path is not None:
            meta = {
                "epoch": epoch, "steps": steps, "initial_loss": initial_loss, "best_pe": best_pe,
                "best_epoch": best_epoch, "seed": schedule.seed, "diverged": diverged,
            }
            save_checkpoint(last_path, model, config, meta)
        if schedule.max_steps and steps >= schedule.max_steps:
            logger.info("stopping after %d steps", steps)
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_pe, best_path, steps)


def curriculum_finetune(
    source: str | Path,
    manifest: DatasetManifest,
    schedule: TrainSchedule,
    config: Optional[ModelConfig] = None,
    run_dir: Optional[str | Path] = None,
) -> TrainResult:
    """Transfer weights from a higher-payload checkpoint and fine-tune at a tiny learning rate."""
    model, ckpt = transfer(source, config)
    return train_mcnet(manifest, schedule, config or ckpt.config, model=model, run_dir=run_dir, evaluate_initial=True)


def evaluate_checkpoint(
    checkpoint: str | Path,
    manifest: DatasetManifest,
    split: str = "test",
    config: Optional[ModelConfig] = None,
    out_dir: Optional[str | Path] = None,
    orientation: str = "reference",
) -> EvaluationReport:
    model, _ = load_checkpoint(checkpoint, config)
    pairs = load_split(manifest, split)
    scores = np.concatenate([predict_scores(model, pairs.covers), predict_scores(model, pairs.stegos)])
    labels = np.r_[np.zeros(len(pairs)), np.ones(len(pairs))]
    report = evaluate(ScoreSet(scores, labels), orientation)
    if out_dir is not None:
        report.write(out_dir)
    return report
