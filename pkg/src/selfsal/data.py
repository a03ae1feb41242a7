"""Dataset ingestion and the synthetic desk-scale corpus.

Directory layout: ``<root>/images/*.png|jpg`` with optional
``<root>/masks/<stem>.png`` (8-bit grayscale, >=128 means foreground).
Masks exist for evaluation only; the training path never touches them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .errors import ConfigurationError, CorpusError
from .seeding import derive_rng

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class Corpus:
    """Ordered (id, image path) records with optional parallel mask paths."""

    images: list                      # list[(str, Path)]
    masks: list | None = None        # list[Path] parallel to images, or None

    def __len__(self):
        return len(self.images)

    def ids(self):
        return [i for i, _ in self.images]


def load_image(path, dtype=torch.float32) -> torch.Tensor:
    """Decode an RGB image to a (3,H,W) tensor in [0,1]."""
    try:
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise CorpusError(f"unreadable image {path}: {exc}") from exc
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()).to(dtype)


def load_mask(path, dtype=torch.float32) -> torch.Tensor:
    """Decode a grayscale mask to a binary (H,W) tensor (>=128 -> 1)."""
    try:
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.uint8)
    except Exception as exc:
        raise CorpusError(f"unreadable mask {path}: {exc}") from exc
    return torch.from_numpy((arr >= 128).astype(np.float64)).to(dtype)


def save_gray_image(path, values: torch.Tensor) -> None:
    """Write a [0,1] map as 8-bit grayscale, x255 rounded half-up."""
    arr = values.detach().cpu().numpy().astype(np.float64)
    quantized = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    PILImage.fromarray(quantized, mode="L").save(path)


def _image_size(path) -> tuple:
    try:
        with PILImage.open(path) as img:
            return img.size  # (W, H)
    except Exception as exc:
        raise CorpusError(f"unreadable image {path}: {exc}") from exc


def load_corpus(root, with_masks: bool = False) -> Corpus:
    """Scan a dataset directory into an ordered corpus.

    Image order is lexicographic by filename; masks are matched by stem.
    All per-file problems are collected and reported in one error.
    """
    root = Path(root)
    if not root.is_dir():
        raise CorpusError(f"corpus directory not found: {root}")
    image_dir = root / "images" if (root / "images").is_dir() else root
    mask_dir = root / "masks"

    files = sorted(p for p in image_dir.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    problems = []
    seen = set()
    for path in files:
        if path.stem in seen:
            problems.append(f"duplicate image id {path.stem!r}")
        seen.add(path.stem)
    images, masks = [], []
    for path in files:
        try:
            size = _image_size(path)
        except CorpusError as exc:
            problems.append(str(exc))
            continue
        images.append((path.stem, path))
        if not with_masks:
            continue
        mask_path = mask_dir / f"{path.stem}.png"
        if not mask_path.exists():
            problems.append(f"no mask for image {path.stem!r}")
            masks.append(None)
            continue
        try:
            mask_size = _image_size(mask_path)
        except CorpusError as exc:
            problems.append(str(exc))
            masks.append(None)
            continue
        if mask_size != size:
            problems.append(
                f"mask/image size mismatch for {path.stem!r}: {mask_size} vs {size}")
        masks.append(mask_path)
    if problems:
        raise CorpusError("corpus errors:\n  " + "\n  ".join(problems))
    return Corpus(images=images, masks=masks if with_masks else None)


def random_crop(image: torch.Tensor, side: int, seed: int) -> torch.Tensor:
    """Square crop at a uniform-random corner, seeded."""
    h, w = image.shape[-2:]
    if side > min(h, w):
        raise ConfigurationError(f"crop side {side} exceeds image {h}x{w}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return image[..., top:top + side, left:left + side]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SyntheticSpec:
    """One high-contrast shape per image on a lightly textured background."""

    count: int = 8
    side: int = 64
    families: tuple = ("disc", "rectangle", "blob")
    fg_range: tuple = (0.72, 0.95)
    bg_range: tuple = (0.05, 0.22)
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.count < 1 or self.side < 8:
            raise ConfigurationError("need count >= 1 and side >= 8")
        for fam in self.families:
            if fam not in ("disc", "rectangle", "blob"):
                raise ConfigurationError(f"unknown shape family {fam!r}")


def _shape_mask(family: str, side: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy = side * rng.uniform(0.38, 0.62)
    cx = side * rng.uniform(0.38, 0.62)
    margin = 2.0
    reach = min(cy, cx, side - 1 - cy, side - 1 - cx) - margin
    if family == "disc":
        r = min(side * rng.uniform(0.26, 0.4), reach)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if family == "rectangle":
        hy = min(side * rng.uniform(0.22, 0.4), reach)
        hx = min(side * rng.uniform(0.22, 0.4), reach)
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    # blob: disc with low-order radial perturbation
    r0 = min(side * rng.uniform(0.24, 0.36), reach / 1.25)
    a1, a2 = rng.uniform(0.06, 0.16, 2)
    p1, p2 = rng.uniform(0.0, 2.0 * np.pi, 2)
    theta = np.arctan2(yy - cy, xx - cx)
    radius = r0 * (1.0 + a1 * np.sin(3.0 * theta + p1) + a2 * np.sin(5.0 * theta + p2))
    return np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) <= radius


def make_synthetic(spec: SyntheticSpec, out_dir) -> Corpus:
    """Render the corpus to ``out_dir/images`` and ``out_dir/masks``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    for i in range(spec.count):
        rng = derive_rng(spec.seed, "synthetic", i)
        family = spec.families[i % len(spec.families)]
        mask = _shape_mask(family, spec.side, rng)
        bg = rng.uniform(*spec.bg_range) + rng.uniform(-0.03, 0.03, 3)
        fg = rng.uniform(*spec.fg_range) + rng.uniform(-0.05, 0.05, 3)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        if spec.noise > 0.0:
            img = img + rng.uniform(-spec.noise, spec.noise, img.shape)
        img = np.clip(img, 0.0, 1.0)
        quantized = np.floor(img.transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)
        PILImage.fromarray(quantized, mode="RGB").save(out_dir / "images" / f"img_{i:03d}.png")
        PILImage.fromarray(mask.astype(np.uint8) * 255, mode="L").save(
            out_dir / "masks" / f"img_{i:03d}.png")
    return load_corpus(out_dir, with_masks=True)
