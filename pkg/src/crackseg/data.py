"""Dataset handling: tiling, manifests, sample loading, augmentation, splits.

Images and masks are 8-bit PNG (JPEG accepted for images only). A
manifest is a UTF-8 JSON-lines file: an optional first line

    {"meta": {"name": ..., "params": {...}}}

followed by one record per sample

    {"image": "images/s_00001.png", "mask": "masks/s_00001.png",
     "source": "A", "split": "train"}

with paths relative to the manifest's directory and ``mask`` null for
inference-only samples. Tiling lays 256x256 (configurable) patches on a
regular grid from the top-left corner; partial edge tiles are dropped.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor

__all__ = [
    "DataError",
    "Sample",
    "DatasetManifest",
    "TileSpec",
    "tile_image",
    "stitch_predictions",
    "load_image",
    "load_mask",
    "load_sample",
    "dihedral_transform",
    "augment",
    "N_AUGMENT_TRANSFORMS",
    "make_splits",
    "load_manifest",
    "save_manifest",
    "merge_manifests",
]

SPLITS = ("train", "test")

MASK_THRESHOLD = 127  # 8-bit mask pixels above this are crack

_JPEG_SUFFIXES = (".jpg", ".jpeg")


class DataError(ValueError):
    """Unusable input data: bad files, bad dimensions, bad manifests."""


@dataclass(frozen=True)
class Sample:
    """One image/mask pair with its corpus tag and split assignment."""

    image_path: Path
    mask_path: Path | None
    source_tag: str
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"sample split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class DatasetManifest:
    """Ordered list of samples plus provenance metadata."""

    samples: list[Sample]
    name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for s in self.samples:
            key = str(s.image_path)
            if key in seen:
                raise DataError(f"duplicate image path in manifest: {key}")
            seen.add(key)

    def split(self, which: str) -> list[Sample]:
        if which not in SPLITS:
            raise DataError(f"unknown split {which!r}")
        return [s for s in self.samples if s.split == which]

    def train(self) -> list[Sample]:
        return self.split("train")

    def test(self) -> list[Sample]:
        return self.split("test")

    def counts(self) -> dict[tuple[str, str], int]:
        """Sample counts keyed by (source_tag, split)."""
        out: dict[tuple[str, str], int] = {}
        for s in self.samples:
            key = (s.source_tag, s.split)
            out[key] = out.get(key, 0) + 1
        return out


@dataclass(frozen=True)
class TileSpec:
    tile_size: int = 256
    remainder_policy: str = "drop"

    def __post_init__(self):
        if self.tile_size <= 0:
            raise DataError(f"tile_size must be positive, got {self.tile_size}")
        if self.remainder_policy != "drop":
            raise DataError(
                f"remainder_policy {self.remainder_policy!r} not implemented; only 'drop'"
            )


def tile_image(image: np.ndarray, spec: TileSpec = TileSpec()) -> list[tuple[np.ndarray, int, int]]:
    """Cut a (H, W[, C]) raster into (tile, origin_x, origin_y) triples.

    Origins form the grid {(i*T, j*T)} for i < floor(W/T), j < floor(H/T);
    pixels in partial edge tiles are dropped. Raises if the image is
    smaller than one tile in either dimension.
    """
    if image.ndim not in (2, 3):
        raise DataError(f"tile_image expects a (H,W) or (H,W,C) array, got shape {image.shape}")
    h, w = image.shape[0], image.shape[1]
    t = spec.tile_size
    if h < t or w < t:
        raise DataError(f"image {w}x{h} is smaller than the tile size {t}x{t}")
    tiles = []
    for oy in range(0, h - t + 1, t):
        for ox in range(0, w - t + 1, t):
            tiles.append((np.ascontiguousarray(image[oy : oy + t, ox : ox + t]), ox, oy))
    return tiles


def stitch_predictions(
    tiles: list[tuple[np.ndarray, int, int]],
    width: int,
    height: int,
    dtype=None,
) -> np.ndarray:
    """Paste (tile, origin_x, origin_y) triples back onto a zeroed canvas.

    Tiles must be disjoint and lie fully inside the canvas; pixels no
    tile covers stay 0. Inverse of :func:`tile_image` on the covered
    region.
    """
    if dtype is None:
        dtype = tiles[0][0].dtype if tiles else np.uint8
    sample = tiles[0][0] if tiles else None
    extra = sample.shape[2:] if sample is not None and sample.ndim == 3 else ()
    canvas = np.zeros((height, width) + extra, dtype=dtype)
    covered = np.zeros((height, width), dtype=bool)
    for tile, ox, oy in tiles:
        th, tw = tile.shape[0], tile.shape[1]
        if ox < 0 or oy < 0 or ox + tw > width or oy + th > height:
            raise DataError(
                f"tile at ({ox},{oy}) size {tw}x{th} does not fit canvas {width}x{height}"
            )
        region = covered[oy : oy + th, ox : ox + tw]
        if region.any():
            raise DataError(f"tile at ({ox},{oy}) overlaps previously placed tiles")
        region[:] = True
        canvas[oy : oy + th, ox : ox + tw] = tile
    return canvas


def _decode_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode in ("L", "RGB"):
                pass
            elif img.mode in ("P", "RGBA", "CMYK", "YCbCr"):
                img = img.convert("RGB")
            elif img.mode == "LA":
                img = img.convert("L")
            else:
                raise DataError(f"unsupported image mode {img.mode!r} in {path}")
            return np.asarray(img, dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"image file not found: {path}") from None
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit image as uint8 (H, W) grayscale or (H, W, 3) RGB."""
    return _decode_image(Path(path))


def load_mask(path: str | Path) -> np.ndarray:
    """Read an 8-bit PNG mask and binarize it: pixel > 127 becomes 1."""
    path = Path(path)
    if path.suffix.lower() in _JPEG_SUFFIXES:
        raise DataError(f"masks must be PNG, got {path}")
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                img = img.convert("L")
            raw = np.asarray(img, dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"mask file not found: {path}") from None
    except Exception as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from exc
    return (raw > MASK_THRESHOLD).astype(np.uint8)


def sample_arrays(sample: Sample) -> tuple[np.ndarray, np.ndarray | None]:
    """Decode a sample to (image [C,H,W] float32 in [0,1], mask [1,H,W] or None)."""
    img = load_image(sample.image_path)
    if img.ndim == 2:
        chw = img[None, :, :]
    else:
        chw = np.moveaxis(img, -1, 0)
    image = chw.astype(np.float32) / np.float32(255.0)
    if sample.mask_path is None:
        return image, None
    mask = load_mask(sample.mask_path)
    if mask.shape != img.shape[:2]:
        raise DataError(
            f"mask {sample.mask_path} is {mask.shape[1]}x{mask.shape[0]} but image "
            f"{sample.image_path} is {img.shape[1]}x{img.shape[0]}"
        )
    return image, mask[None, :, :].astype(np.float32)


def load_sample(sample: Sample) -> tuple[Tensor, Tensor | None]:
    """Load a sample as batched tensors: image [1,C,H,W], mask [1,1,H,W]."""
    image, mask = sample_arrays(sample)
    return Tensor(image[None]), None if mask is None else Tensor(mask[None])


# -- augmentation -------------------------------------------------------------

N_AUGMENT_TRANSFORMS = 6


def dihedral_transform(arr: np.ndarray, k: int) -> np.ndarray:
    """Apply transform k of {0: identity, 1: hflip, 2: vflip, 3/4/5: rot 90/180/270}.

    Acts on the last two axes, so it applies identically to [C,H,W]
    images and [1,H,W] masks. All six are pixel permutations: no
    interpolation, mask pixel counts are invariant.
    """
    if k == 0:
        out = arr
    elif k == 1:
        out = np.flip(arr, axis=-1)
    elif k == 2:
        out = np.flip(arr, axis=-2)
    elif k in (3, 4, 5):
        out = np.rot90(arr, k - 2, axes=(-2, -1))
    else:
        raise ValueError(f"transform index must be in 0..5, got {k}")
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, mask: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Apply one uniformly drawn flip/rotation to an image/mask pair.

    Deterministic given the seed; the identity is one of the six
    outcomes, and image and mask always receive the same transform.
    """
    if image.shape[-2:] != mask.shape[-2:]:
        raise DataError(
            f"augment: image {image.shape} and mask {mask.shape} spatial dims differ"
        )
    k = int(np.random.default_rng(seed).integers(N_AUGMENT_TRANSFORMS))
    return dihedral_transform(image, k), dihedral_transform(mask, k)


# -- splits -------------------------------------------------------------------


def make_splits(
    manifest: DatasetManifest,
    counts: dict[str, tuple[int, int]],
    seed: int,
) -> DatasetManifest:
    """Carve exact per-source train/test subsets with a seeded shuffle.

    ``counts`` maps source_tag -> (n_train, n_test). Only the listed
    sources appear in the result; train and test are disjoint by
    construction. Raises naming the source and shortfall when a source
    has too few samples.
    """
    rng = np.random.default_rng(seed)
    chosen: list[Sample] = []
    for source in sorted(counts):
        n_train, n_test = counts[source]
        if n_train < 0 or n_test < 0:
            raise DataError(f"negative split counts for source {source!r}")
        pool = [s for s in manifest.samples if s.source_tag == source]
        needed = n_train + n_test
        if needed > len(pool):
            raise DataError(
                f"source {source!r} has {len(pool)} samples, "
                f"{needed} requested (short by {needed - len(pool)})"
            )
        order = rng.permutation(len(pool))
        for j in order[:n_train]:
            chosen.append(dataclasses.replace(pool[j], split="train"))
        for j in order[n_train:needed]:
            chosen.append(dataclasses.replace(pool[j], split="test"))
    return DatasetManifest(
        samples=chosen,
        name=f"{manifest.name}-split" if manifest.name else "split",
        params={"counts": {k: list(v) for k, v in counts.items()}, "seed": seed},
    )


# -- manifest file I/O --------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest as JSON lines, paths relative to the file's directory."""
    path = Path(path)
    base = path.parent.resolve()
    lines = []
    if manifest.name or manifest.params:
        lines.append(json.dumps({"meta": {"name": manifest.name, "params": manifest.params}}))
    for s in manifest.samples:
        rec = {
            "image": os.path.relpath(Path(s.image_path).resolve(), base),
            "mask": (
                os.path.relpath(Path(s.mask_path).resolve(), base)
                if s.mask_path is not None
                else None
            ),
            "source": s.source_tag,
            "split": s.split,
        }
        lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a JSON-lines manifest, resolving paths against its directory."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest file not found: {path}")
    base = path.parent.resolve()
    name = ""
    params: dict = {}
    samples: list[Sample] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON record: {exc}") from exc
        if "meta" in rec:
            meta = rec["meta"]
            name = meta.get("name", "")
            params = meta.get("params", {})
            continue
        try:
            samples.append(
                Sample(
                    image_path=base / rec["image"],
                    mask_path=(base / rec["mask"]) if rec.get("mask") else None,
                    source_tag=rec["source"],
                    split=rec["split"],
                )
            )
        except KeyError as exc:
            raise DataError(f"{path}:{lineno}: record missing field {exc}") from exc
    return DatasetManifest(samples=samples, name=name, params=params)


def merge_manifests(manifests: list[DatasetManifest], name: str = "merged") -> DatasetManifest:
    """Concatenate manifests; duplicate image paths are rejected."""
    samples: list[Sample] = []
    for m in manifests:
        samples.extend(m.samples)
    return DatasetManifest(samples=samples, name=name)
