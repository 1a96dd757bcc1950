"""Command-line surface: corpus generation, tiling, training, eval, inference.

Exit codes are stable: 0 success, 1 runtime failure, 2 usage error.
No command mutates its input files. The train/eval config file is JSON
with two objects::

    {"model": {"depth": 3, "base_channels": 8, "widen_factor": 1.5,
               "in_channels": 1, "input_size": 64},
     "train": {"learning_rate": 0.0001, "batch_size": 5, "episodes": 50,
               "episode_unit": "epochs", "seed": 0}}

Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    DataError,
    TileSpec,
    load_image,
    load_manifest,
    merge_manifests,
    stitch_predictions,
    tile_image,
)
from .metrics import evaluate_dataset
from .optim import Adam
from .synth import generate_corpus, style_by_name
from .tensor import Tensor, no_grad
from .train import TrainConfig, TrainState, load_checkpoint, save_checkpoint, train
from .unet import UNetConfig, build

__all__ = ["main", "render_overlay", "load_config_file"]

DEFAULT_OVERLAY_COLOR = (255, 0, 0)
DEFAULT_OVERLAY_ALPHA = 0.5


def render_overlay(
    base: np.ndarray,
    mask: np.ndarray,
    color: tuple[int, int, int] = DEFAULT_OVERLAY_COLOR,
    alpha: float = DEFAULT_OVERLAY_ALPHA,
) -> np.ndarray:
    """Blend a binary mask over an image; unmasked pixels stay untouched.

    base: uint8 (H,W) or (H,W,3); mask: (H,W), nonzero marks crack.
    Returns an RGB uint8 array of the base dimensions.
    """
    if base.shape[:2] != mask.shape[:2]:
        raise DataError(f"overlay: image {base.shape} and mask {mask.shape} dims differ")
    rgb = np.stack([base] * 3, axis=-1) if base.ndim == 2 else base.copy()
    sel = mask > 0
    tint = np.asarray(color, dtype=np.float64)
    rgb[sel] = np.clip(np.rint((1.0 - alpha) * rgb[sel] + alpha * tint), 0, 255).astype(np.uint8)
    return rgb


def _config_from_dict(cls, data: dict, section: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ValueError(f"unknown {section} config keys: {sorted(unknown)}")
    return cls(**data)


def load_config_file(path: str | Path) -> tuple[UNetConfig, TrainConfig]:
    """Parse the JSON config file into (UNetConfig, TrainConfig)."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValueError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"config file {path} is not valid JSON: {exc}") from exc
    model = _config_from_dict(UNetConfig, raw.get("model", {}), "model")
    train_cfg = _config_from_dict(TrainConfig, raw.get("train", {}), "train")
    return model, train_cfg


# -- commands ------------------------------------------------------------------


def _cmd_synth(args) -> int:
    style = style_by_name(args.style)
    manifest = generate_corpus(
        style,
        count=args.count,
        size=args.size,
        seed=args.seed,
        out_dir=args.out,
        crack_free_prob=args.crack_free_prob,
    )
    print(f"wrote {len(manifest.samples)} sample pairs under {args.out}")
    print(f"manifest: {Path(args.out) / 'manifest.jsonl'}")
    return 0


def _cmd_tile(args) -> int:
    image = load_image(args.input)
    tiles = tile_image(image, TileSpec(tile_size=args.tile_size))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for tile, ox, oy in tiles:
        Image.fromarray(tile).save(out_dir / f"tile_x{ox:05d}_y{oy:05d}.png")
    h, w = image.shape[0], image.shape[1]
    print(f"wrote {len(tiles)} tiles of {args.tile_size}px from {w}x{h} input to {out_dir}")
    return 0


def _cmd_train(args) -> int:
    model_config, train_config = load_config_file(args.config)
    manifests = [load_manifest(p) for p in args.manifest]
    merged = merge_manifests(manifests)

    train_samples = merged.train()
    if not train_samples:
        raise ValueError("no samples with split=train in the given manifest(s)")
    missing = [s for s in train_samples if s.mask_path is None]
    if missing:
        raise ValueError(
            f"{len(missing)} train sample(s) lack masks, e.g. {missing[0].image_path}"
        )

    if args.resume:
        # Continue with the checkpoint's hyperparameters (required for
        # bit-exact schedule replay); only the episode target comes from
        # the config file.
        state = load_checkpoint(args.resume)
        model, adam, start = state.model, state.adam, state.episode
        train_config = dataclasses.replace(state.config, episodes=train_config.episodes)
        print(f"resuming from {args.resume} at episode {start}")
    else:
        model = build(model_config, seed=train_config.seed)
        adam = Adam(
            model.parameters(),
            lr=train_config.learning_rate,
            beta1=train_config.beta1,
            beta2=train_config.beta2,
            eps=train_config.adam_eps,
        )
        start = 0

    history_path = args.history or (str(args.out) + ".history.jsonl")
    model, history = train(
        model,
        train_samples,
        train_config,
        adam=adam,
        start_episode=start,
        history_path=history_path,
    )
    save_checkpoint(
        TrainState(model, adam, train_config, train_config.episodes), args.out
    )
    print(f"trained to episode {train_config.episodes}; checkpoint: {args.out}")
    print(f"history: {history_path}")
    return 0


def _cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    report = evaluate_dataset(
        state.model,
        manifest,
        threshold=args.threshold,
        aggregation=args.aggregation,
        split=args.split,
    )
    print(report.to_text())
    return 0


def _adapt_channels(image: np.ndarray, wanted: int) -> np.ndarray:
    """Match an image's channel count to the model (L<->RGB), uint8 (H,W,C?)."""
    have = 1 if image.ndim == 2 else image.shape[2]
    if have == wanted:
        return image
    if wanted == 1 and have == 3:
        print("note: converting RGB input to grayscale for a 1-channel model")
        return np.asarray(Image.fromarray(image).convert("L"), dtype=np.uint8)
    if wanted == 3 and have == 1:
        print("note: replicating grayscale input for a 3-channel model")
        return np.stack([image] * 3, axis=-1)
    raise DataError(f"cannot adapt {have}-channel image to {wanted}-channel model")


def _cmd_predict(args) -> int:
    state = load_checkpoint(args.checkpoint)
    model = state.model
    tile_size = model.config.input_size
    image = _adapt_channels(load_image(args.input), model.config.in_channels)
    h, w = image.shape[0], image.shape[1]

    tiles = tile_image(image, TileSpec(tile_size=tile_size))
    mask_tiles = []
    with no_grad():
        for tile, ox, oy in tiles:
            chw = tile[None, :, :] if tile.ndim == 2 else np.moveaxis(tile, -1, 0)
            x = Tensor(chw[None].astype(np.float32) / np.float32(255.0))
            prob = model.forward(x).data[0, 0]
            mask_tiles.append(((prob > args.threshold).astype(np.uint8) * 255, ox, oy))
    mask = stitch_predictions(mask_tiles, width=w, height=h, dtype=np.uint8)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    mask_path = out_dir / f"{stem}_mask.png"
    Image.fromarray(mask, mode="L").save(mask_path)
    print(f"wrote {mask_path}")

    margin_x = w % tile_size
    margin_y = h % tile_size
    if margin_x or margin_y:
        note = out_dir / f"{stem}_coverage.txt"
        note.write_text(
            f"input {w}x{h}, tile size {tile_size}\n"
            f"uncovered right margin: {margin_x} px\n"
            f"uncovered bottom margin: {margin_y} px\n"
            "uncovered pixels are 0 in the mask\n",
            encoding="utf-8",
        )
        print(f"partial coverage; see {note}")

    if args.overlay:
        overlay = render_overlay(load_image(args.input), mask)
        overlay_path = out_dir / f"{stem}_overlay.png"
        Image.fromarray(overlay, mode="RGB").save(overlay_path)
        print(f"wrote {overlay_path}")
    return 0


# -- argument parsing ------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crackseg",
        description="Pixel-level crack segmentation: data prep, training, evaluation, inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus with ground-truth masks")
    p.add_argument("--style", required=True, choices=["A", "B"])
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--crack-free-prob", type=float, default=0.0, dest="crack_free_prob")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("tile", help="cut a large image into fixed-size tiles")
    p.add_argument("--input", required=True)
    p.add_argument("--tile-size", type=int, default=256, dest="tile_size")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("train", help="train a model from one or more manifests")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--history", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--aggregation", choices=["micro", "per_image_mean"], default="micro")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="run inference on an image, tiling and stitching")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=_cmd_predict)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
