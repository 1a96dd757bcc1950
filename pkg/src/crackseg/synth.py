"""Seeded synthetic crack imagery with exact ground-truth masks.

Two built-in visual styles emulate a bright high-resolution corpus (A)
and a darker, blurrier, lower-contrast one (B), so cross-style
generalization experiments can run at desk scale. Cracks are bounded
random walks with heading persistence that span the full image, with an
optional branch. The mask marks exactly the rasterized crack pixels:
blur and contrast adjustments touch the image only, never the mask.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .data import DatasetManifest, Sample, save_manifest

__all__ = ["SynthStyle", "STYLE_A", "STYLE_B", "generate", "generate_corpus", "style_by_name"]


@dataclass(frozen=True)
class SynthStyle:
    """Rendering parameters for one synthetic corpus flavor."""

    name: str
    background_mean: float
    background_noise_sigma: float
    crack_darkness: float
    crack_width_px: tuple[int, int]
    blur_radius: float
    contrast_scale: float

    def __post_init__(self):
        lo, hi = self.crack_width_px
        if not (1 <= lo <= hi):
            raise ValueError(f"crack_width_px must satisfy 1 <= lo <= hi, got {self.crack_width_px}")
        if self.contrast_scale <= 0:
            raise ValueError(f"contrast_scale must be positive, got {self.contrast_scale}")

    @property
    def effective_contrast(self) -> float:
        """Crack-to-background gray gap after contrast scaling."""
        return abs(self.crack_darkness * self.contrast_scale)


# Style A: bright, sharp, high contrast. Style B: darker, blurrier, flatter.
STYLE_A = SynthStyle(
    name="A",
    background_mean=190.0,
    background_noise_sigma=13.0,
    crack_darkness=110.0,
    crack_width_px=(1, 4),
    blur_radius=0.0,
    contrast_scale=1.0,
)
STYLE_B = SynthStyle(
    name="B",
    background_mean=95.0,
    background_noise_sigma=10.0,
    crack_darkness=45.0,
    crack_width_px=(1, 3),
    blur_radius=1.2,
    contrast_scale=0.6,
)

assert STYLE_A.effective_contrast > STYLE_B.effective_contrast


def style_by_name(name: str) -> SynthStyle:
    styles = {"A": STYLE_A, "B": STYLE_B}
    if name not in styles:
        raise ValueError(f"unknown style {name!r}; available: {sorted(styles)}")
    return styles[name]


def _stamp(mask: np.ndarray, rows: np.ndarray, cols: np.ndarray, width: int) -> None:
    """Paint width x width squares centered on the given path points."""
    size_r, size_c = mask.shape
    lo = -(width // 2)
    for dr in range(lo, lo + width):
        for dc in range(lo, lo + width):
            r = rows + dr
            c = cols + dc
            ok = (r >= 0) & (r < size_r) & (c >= 0) & (c < size_c)
            mask[r[ok], c[ok]] = True


def _main_path(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """A crack spanning the full image along one axis, wobbling on the other."""
    axis = int(rng.integers(2))
    cross = float(rng.uniform(0.15, 0.85) * size)
    velocity = 0.0
    rows, cols = [], []
    prev = int(round(cross))
    for t in range(size):
        velocity = float(np.clip(0.85 * velocity + rng.normal(0.0, 0.35), -1.5, 1.5))
        cross = float(np.clip(cross + velocity, 1.0, size - 2.0))
        c = int(round(cross))
        # Keep the rasterized path 8-connected when the wobble jumps 2 px.
        if abs(c - prev) > 1 and t > 0:
            mid = (c + prev) // 2
            rows.append(t if axis else mid)
            cols.append(mid if axis else t)
        rows.append(t if axis else c)
        cols.append(c if axis else t)
        prev = c
    return np.asarray(rows), np.asarray(cols)


def _branch_path(
    rng: np.random.Generator, size: int, start: tuple[int, int], length: int
) -> tuple[np.ndarray, np.ndarray]:
    theta = float(rng.uniform(0.0, 2.0 * np.pi))
    r, c = float(start[0]), float(start[1])
    rows, cols = [], []
    for _ in range(length):
        theta += float(rng.normal(0.0, 0.25))
        r += float(np.sin(theta))
        c += float(np.cos(theta))
        if not (1.0 <= r <= size - 2.0 and 1.0 <= c <= size - 2.0):
            break
        rows.append(int(round(r)))
        cols.append(int(round(c)))
    return np.asarray(rows, dtype=int), np.asarray(cols, dtype=int)


def generate(
    style: SynthStyle,
    size: int,
    seed: int,
    crack_free_prob: float = 0.0,
    branch_prob: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one (image, mask) pair, both uint8 arrays of shape (size, size).

    Mask pixels are 255 on the crack and 0 elsewhere; the mask is empty
    exactly when the sample came up crack-free (probability
    ``crack_free_prob``). Fully deterministic per (style, size, seed).
    """
    if size < 64:
        raise ValueError(f"size must be >= 64, got {size}")
    rng = np.random.default_rng(seed)
    crack_free = bool(rng.random() < crack_free_prob)

    img = style.background_mean + style.background_noise_sigma * rng.standard_normal((size, size))
    # Coarse texture: low-resolution noise blown up 8x.
    n_coarse = size // 8 + 1
    coarse = rng.standard_normal((n_coarse, n_coarse))
    img += 0.6 * style.background_noise_sigma * np.repeat(np.repeat(coarse, 8, 0), 8, 1)[:size, :size]

    mask = np.zeros((size, size), dtype=bool)
    if not crack_free:
        lo, hi = style.crack_width_px
        width = int(rng.integers(lo, hi + 1))
        rows, cols = _main_path(rng, size)
        _stamp(mask, rows, cols, width)
        if rng.random() < branch_prob:
            k = int(rng.integers(size // 4, 3 * size // 4))
            start = (int(rows[k]), int(cols[k]))
            length = int(rng.integers(size // 4, size // 2))
            brows, bcols = _branch_path(rng, size, start, length)
            if brows.size:
                _stamp(mask, brows, bcols, max(1, width - 1))

    img = np.where(mask, img - style.crack_darkness, img)
    img = style.background_mean + (img - style.background_mean) * style.contrast_scale
    if style.blur_radius > 0:
        img = gaussian_filter(img, sigma=style.blur_radius)

    image8 = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image8, mask.astype(np.uint8) * 255


def generate_corpus(
    style: SynthStyle,
    count: int,
    size: int,
    seed: int,
    out_dir: str | Path,
    crack_free_prob: float = 0.0,
    branch_prob: float = 0.3,
) -> DatasetManifest:
    """Write ``count`` PNG pairs plus a manifest under ``out_dir``.

    Per-sample seeds derive from (seed, index), so sample content does
    not depend on generation order. The manifest records all generation
    parameters and tags every sample with the style name.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    mask_dir = out_dir / "masks"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directories under {out_dir}: {exc}") from exc

    samples = []
    for i in range(count):
        sample_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        image, mask = generate(style, size, sample_seed, crack_free_prob, branch_prob)
        img_path = img_dir / f"sample_{i:05d}.png"
        mask_path = mask_dir / f"sample_{i:05d}.png"
        try:
            Image.fromarray(image, mode="L").save(img_path)
            Image.fromarray(mask, mode="L").save(mask_path)
        except OSError as exc:
            raise OSError(f"cannot write sample {i} under {out_dir}: {exc}") from exc
        samples.append(
            Sample(image_path=img_path, mask_path=mask_path, source_tag=style.name, split="train")
        )

    manifest = DatasetManifest(
        samples=samples,
        name=f"synth-{style.name}",
        params={
            "style": asdict(style),
            "count": count,
            "size": size,
            "seed": seed,
            "crack_free_prob": crack_free_prob,
            "branch_prob": branch_prob,
        },
    )
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
