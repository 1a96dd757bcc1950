"""Deterministic training loop, binary checkpoints, and experiment runner.

Training follows the fixed protocol: per episode a seeded shuffle,
batches of ``batch_size`` (the last partial batch is kept), per-sample
flip/rotation augmentation, forward, mean binary cross-entropy,
backward, one Adam step. "Episode" counts epochs by default; a
steps-based unit is selectable. All shuffle and augmentation draws are
pure functions of (seed, episode[, sample index]), which is also what
makes checkpoint resume bit-exact: the checkpoint stores the seed and
the number of completed episodes, and the schedule replays from there.

Checkpoint file layout (little-endian throughout)::

    magic b"UNCK" | uint32 version | uint64 meta_len | meta JSON (UTF-8)
    | raw tensor payloads in meta order | uint32 CRC-32 of all prior bytes

The metadata block names every tensor (model parameters, then Adam
first/second moments) with dtype and shape, and embeds the model and
train configs, the episode index, and the random-state snapshot.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, Sample, augment, merge_manifests, sample_arrays
from .metrics import MetricsReport, evaluate_dataset
from .ops import bce_loss
from .optim import Adam
from .tensor import Tensor, backward
from .unet import UNetConfig, UNetModel, build

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingDivergedError",
    "CheckpointError",
    "CheckpointVersionError",
    "CheckpointCorruptError",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "save_history",
    "ExperimentSpec",
    "ExperimentResult",
    "run_experiment",
]

EPISODE_UNITS = ("epochs", "steps")

# Stream tags keep shuffle and augmentation draws statistically independent.
_SHUFFLE_STREAM = 0
_AUGMENT_STREAM = 1

CHECKPOINT_MAGIC = b"UNCK"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; training aborted."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule hyperparameters.

    Defaults mirror the reference protocol: Adam at learning rate 1e-4,
    batch size 5, 1000 episodes. ``learning_rate == 0`` is allowed and
    leaves parameters untouched (useful for no-op schedule checks).
    """

    learning_rate: float = 1e-4
    batch_size: int = 5
    episodes: int = 1000
    episode_unit: str = "epochs"
    seed: int = 0
    eval_every: int = 0
    checkpoint_dir: str | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.episodes < 1:
            raise ValueError(f"episodes must be >= 1, got {self.episodes}")
        if self.episode_unit not in EPISODE_UNITS:
            raise ValueError(f"episode_unit must be one of {EPISODE_UNITS}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    """Everything needed to continue a run: model, optimizer, schedule position."""

    model: UNetModel
    adam: Adam
    config: TrainConfig
    episode: int  # completed episodes, in config.episode_unit


def _shuffle_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SHUFFLE_STREAM, epoch]))
    return rng.permutation(n)


def _augment_seed(seed: int, epoch: int, sample_index: int) -> int:
    ss = np.random.SeedSequence([seed, _AUGMENT_STREAM, epoch, sample_index])
    return int(ss.generate_state(1)[0])


def _resolve_train_samples(data: DatasetManifest | Sequence[Sample]) -> list[Sample]:
    if isinstance(data, DatasetManifest):
        samples = data.train()
    else:
        samples = list(data)
    if not samples:
        raise ValueError("training split is empty")
    missing = [s for s in samples if s.mask_path is None]
    if missing:
        raise ValueError(f"{len(missing)} training sample(s) lack masks, e.g. {missing[0].image_path}")
    return samples


def train(
    model: UNetModel,
    data: DatasetManifest | Sequence[Sample],
    config: TrainConfig,
    eval_data: DatasetManifest | None = None,
    adam: Adam | None = None,
    start_episode: int = 0,
    history_path: str | Path | None = None,
) -> tuple[UNetModel, list[dict]]:
    """Train in place and return (model, history).

    ``start_episode``/``adam`` support resuming: pass the values from a
    loaded checkpoint and the run continues exactly where it stopped.
    History holds one record per episode with the mean loss over its
    batches (for the steps unit, per-step loss), plus evaluation metrics
    every ``eval_every`` episodes when ``eval_data`` is given. Appends
    each record to ``history_path`` as JSON lines when set.
    """
    samples = _resolve_train_samples(data)
    n = len(samples)

    cached = []
    for s in samples:
        image, mask = sample_arrays(s)
        if image.shape[0] != model.config.in_channels:
            raise ValueError(
                f"sample {s.image_path} has {image.shape[0]} channels, "
                f"model expects {model.config.in_channels}"
            )
        cached.append((image, mask))

    if adam is None:
        adam = Adam(
            model.parameters(),
            lr=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.adam_eps,
        )

    steps_per_epoch = math.ceil(n / config.batch_size)
    by_steps = config.episode_unit == "steps"
    total_steps = config.episodes if by_steps else config.episodes * steps_per_epoch
    done_steps = start_episode if by_steps else start_episode * steps_per_epoch

    history: list[dict] = []
    hist_file = open(history_path, "a", encoding="utf-8") if history_path else None

    def emit(record: dict) -> None:
        history.append(record)
        if hist_file:
            hist_file.write(json.dumps(record) + "\n")
            hist_file.flush()

    def maybe_eval(record: dict, episode: int) -> None:
        if eval_data is not None and config.eval_every > 0 and episode % config.eval_every == 0:
            report = evaluate_dataset(model, eval_data)
            record["iou"] = report.iou
            record["f1"] = report.f1

    try:
        while done_steps < total_steps:
            epoch = done_steps // steps_per_epoch
            skip = done_steps % steps_per_epoch
            order = _shuffle_order(config.seed, epoch, n)
            epoch_losses: list[float] = []
            for b in range(steps_per_epoch):
                if b < skip:
                    continue
                if done_steps >= total_steps:
                    break
                idx = order[b * config.batch_size : (b + 1) * config.batch_size]
                images, masks = [], []
                for i in idx:
                    image, mask = cached[int(i)]
                    if config.augment:
                        image, mask = augment(
                            image, mask, _augment_seed(config.seed, epoch, int(i))
                        )
                    images.append(image)
                    masks.append(mask)
                x = Tensor(np.stack(images))
                y = np.stack(masks)
                pred = model.forward(x)
                loss = bce_loss(pred, y)
                loss_val = float(loss.data)
                if not math.isfinite(loss_val):
                    raise TrainingDivergedError(
                        f"non-finite loss {loss_val} at epoch {epoch}, batch {b}"
                    )
                backward(loss)
                adam.step()
                adam.zero_grad()
                epoch_losses.append(loss_val)
                done_steps += 1
                if by_steps:
                    record = {"episode": done_steps, "loss": loss_val}
                    maybe_eval(record, done_steps)
                    emit(record)
            if not by_steps:
                record = {"episode": epoch + 1, "loss": sum(epoch_losses) / len(epoch_losses)}
                maybe_eval(record, epoch + 1)
                emit(record)
            if config.checkpoint_dir is not None and config.eval_every > 0:
                episode = done_steps if by_steps else epoch + 1
                if episode % config.eval_every == 0:
                    ckpt_dir = Path(config.checkpoint_dir)
                    ckpt_dir.mkdir(parents=True, exist_ok=True)
                    save_checkpoint(
                        TrainState(model, adam, config, episode),
                        ckpt_dir / f"checkpoint_ep{episode:06d}.ckpt",
                    )
    finally:
        if hist_file:
            hist_file.close()

    return model, history


def save_history(history: list[dict], path: str | Path) -> None:
    """Write history records as JSON lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")


# -- checkpoint serialization -------------------------------------------------


class CheckpointError(RuntimeError):
    """Unreadable or inconsistent checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version differs from the supported one."""


class CheckpointCorruptError(CheckpointError):
    """Checksum mismatch or truncated payload."""


_DTYPE_TO_WIRE = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Serialize model, optimizer moments, configs, and schedule position."""
    model, adam = state.model, state.adam
    names = list(model.params)
    if len(adam.params) != len(names):
        raise CheckpointError("optimizer parameter list does not match the model")

    tensors: list[tuple[str, np.ndarray]] = [(name, model.params[name].data) for name in names]
    tensors += [(f"adam.m:{name}", m) for name, m in zip(names, adam.m)]
    tensors += [(f"adam.v:{name}", v) for name, v in zip(names, adam.v)]

    meta = {
        "model_config": model.config.to_dict(),
        "train_config": state.config.to_dict(),
        "episode": state.episode,
        "adam_t": adam.t,
        "random_state": {"seed": state.config.seed, "completed_episodes": state.episode},
        "tensors": [
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
            for name, arr in tensors
        ],
    }
    meta_bytes = json.dumps(meta).encode("utf-8")

    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<Q", len(meta_bytes)),
        meta_bytes,
    ]
    for name, arr in tensors:
        wire = _DTYPE_TO_WIRE.get(str(arr.dtype))
        if wire is None:
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        parts.append(np.ascontiguousarray(arr).astype(wire, copy=False).tobytes())
    body = b"".join(parts)
    payload = body + struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(payload)


def load_checkpoint(path: str | Path) -> TrainState:
    """Read a checkpoint back into a ready-to-train state.

    Raises :class:`CheckpointVersionError` on a version mismatch and
    :class:`CheckpointCorruptError` on truncation or checksum failure;
    no partial model is ever returned.
    """
    path = Path(path)
    blob = path.read_bytes()
    header = len(CHECKPOINT_MAGIC) + 4 + 8
    if len(blob) < header + 4:
        raise CheckpointCorruptError(f"{path}: file too short ({len(blob)} bytes)")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} unsupported (supported: {CHECKPOINT_VERSION})"
        )
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    body = blob[:-4]
    if zlib.crc32(body) != crc_stored:
        raise CheckpointCorruptError(f"{path}: checksum mismatch")

    (meta_len,) = struct.unpack_from("<Q", blob, 8)
    meta_end = header + meta_len
    if meta_end > len(body):
        raise CheckpointCorruptError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(blob[header:meta_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable metadata: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    offset = meta_end
    for spec in meta["tensors"]:
        wire = _DTYPE_TO_WIRE.get(spec["dtype"])
        if wire is None:
            raise CheckpointError(f"{path}: unsupported tensor dtype {spec['dtype']}")
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(wire).itemsize
        end = offset + nbytes
        if end > len(body):
            raise CheckpointCorruptError(f"{path}: truncated payload for tensor {spec['name']}")
        arr = np.frombuffer(body, dtype=wire, count=int(np.prod(shape, dtype=np.int64)), offset=offset)
        arrays[spec["name"]] = arr.reshape(shape).astype(spec["dtype"], copy=True)
        offset = end
    if offset != len(body):
        raise CheckpointCorruptError(f"{path}: {len(body) - offset} unexpected trailing bytes")

    model_config = UNetConfig(**meta["model_config"])
    train_config = TrainConfig(**meta["train_config"])

    params = {
        spec["name"]: Tensor(arrays[spec["name"]], requires_grad=True)
        for spec in meta["tensors"]
        if not spec["name"].startswith("adam.")
    }
    model = UNetModel(model_config, params)
    adam = Adam(
        model.parameters(),
        lr=train_config.learning_rate,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.adam_eps,
    )
    adam.t = int(meta["adam_t"])
    adam.m = [arrays[f"adam.m:{name}"] for name in params]
    adam.v = [arrays[f"adam.v:{name}"] for name in params]
    return TrainState(model=model, adam=adam, config=train_config, episode=int(meta["episode"]))


# -- experiment runner ----------------------------------------------------------


@dataclass
class ExperimentSpec:
    """A grid of training variants evaluated on named test sets over seeds."""

    model_config: UNetConfig
    train_config: TrainConfig
    variants: list[tuple[str, list[DatasetManifest]]]
    eval_sets: list[tuple[str, DatasetManifest]]
    seeds: list[int] = field(default_factory=lambda: [0])
    threshold: float = 0.5
    aggregation: str = "micro"


@dataclass
class ExperimentResult:
    rows: list[dict]

    def summary(self) -> list[dict]:
        """Mean/min/max IoU and F1 per (trained_on, evaluated_on) pair."""
        grouped: dict[tuple[str, str], list[dict]] = {}
        for row in self.rows:
            grouped.setdefault((row["trained_on"], row["evaluated_on"]), []).append(row)
        out = []
        for (trained, evaluated), rows in grouped.items():
            ious = [r["iou"] for r in rows]
            f1s = [r["f1"] for r in rows]
            out.append(
                {
                    "trained_on": trained,
                    "evaluated_on": evaluated,
                    "seeds": len(rows),
                    "iou_mean": sum(ious) / len(ious),
                    "iou_min": min(ious),
                    "iou_max": max(ious),
                    "f1_mean": sum(f1s) / len(f1s),
                }
            )
        return out

    def to_text(self) -> str:
        header = f"{'trained on':<20} {'evaluated on':<16} {'seeds':>5} {'IoU mean':>9} {'IoU min':>8} {'IoU max':>8} {'F1 mean':>8}"
        lines = [header, "-" * len(header)]
        for s in self.summary():
            lines.append(
                f"{s['trained_on']:<20} {s['evaluated_on']:<16} {s['seeds']:>5d} "
                f"{s['iou_mean']:>9.4f} {s['iou_min']:>8.4f} {s['iou_max']:>8.4f} {s['f1_mean']:>8.4f}"
            )
        return "\n".join(lines)


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Train every (variant, seed) model and evaluate it on every eval set.

    Mixed-source variants merge their manifests' train splits and
    shuffle jointly; each seed is used both for weight init and for the
    training schedule. Deterministic given an identical spec.
    """
    rows = []
    for variant_name, manifests in spec.variants:
        merged = merge_manifests(manifests, name=variant_name)
        for seed in spec.seeds:
            cfg = dataclasses.replace(spec.train_config, seed=seed)
            model = build(spec.model_config, seed=seed)
            train(model, merged, cfg)
            for eval_name, eval_manifest in spec.eval_sets:
                report: MetricsReport = evaluate_dataset(
                    model, eval_manifest, threshold=spec.threshold, aggregation=spec.aggregation
                )
                rows.append(
                    {
                        "trained_on": variant_name,
                        "evaluated_on": eval_name,
                        "seed": seed,
                        "iou": report.iou,
                        "f1": report.f1,
                        "precision": report.precision,
                        "recall": report.recall,
                    }
                )
    return ExperimentResult(rows=rows)
