"""Synthetic toy classification set: class-coded shapes on noisy, hard-to-compress
backgrounds. The noise is irrelevant to the task, which gives a preprocessing
filter real headroom to trade bitrate for accuracy."""

from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from . import data_io

SHAPES = 5
# luma-matched chroma offsets (reddish vs bluish). The class signal lives in
# the chroma channels, which low-quality JPEG degrades far more than luma, so
# task accuracy falls off smoothly as the codec quality drops.
CHROMA = [
    (0.16, -0.08, -0.08),
    (-0.08, -0.08, 0.16),
]


def _shape_mask(shape_type: int, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    r = np.hypot(dx, dy)
    if shape_type == 0:  # disk
        return (r <= radius).astype(np.float64)
    if shape_type == 1:  # ring
        return ((r <= radius) & (r >= radius * 0.6)).astype(np.float64)
    if shape_type == 2:  # square
        return ((np.abs(dx) <= radius * 0.85) & (np.abs(dy) <= radius * 0.85)).astype(np.float64)
    if shape_type == 3:  # plus
        arm = radius * 0.4
        return (((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
                & (np.abs(dx) <= radius) & (np.abs(dy) <= radius)).astype(np.float64)
    # thin stripes clipped to a disk; fine enough to suffer at low quality
    stripes = (np.sin(yy * np.pi / 2.0) > 0).astype(np.float64)
    return stripes * (r <= radius)


def make_image(class_idx: int, size: int, rng: np.random.Generator,
               noise_sigma: float = 0.10) -> np.ndarray:
    """One C x H x W unit-range image for the given class."""
    shape_type = class_idx % SHAPES
    chroma = np.array(CHROMA[class_idx // SHAPES], dtype=np.float64)

    # smooth background gradient plus strong white noise
    g0, g1 = rng.uniform(0.3, 0.6, size=2)
    ramp = np.linspace(g0, g1, size)
    direction = rng.integers(0, 2)
    base = np.tile(ramp, (size, 1)) if direction == 0 else np.tile(ramp[:, None], (1, size))
    img = np.stack([base, base, base])

    cx = size / 2 + rng.uniform(-size / 8, size / 8)
    cy = size / 2 + rng.uniform(-size / 8, size / 8)
    radius = size * rng.uniform(0.16, 0.24)
    mask = _shape_mask(shape_type, size, cx, cy, radius)
    # the shape is a chroma offset over the ramp; its mean luma matches the
    # background, and the noise covers foreground and background alike, so no
    # amount of filtering can recover class evidence the noise destroyed
    for c in range(3):
        img[c] = img[c] + chroma[c] * mask
    img = img + rng.normal(0.0, noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_toy_dataset(root, train_per_class: int = 500, test_per_class: int = 100,
                     class_count: int = 10, size: int = 64, seed: int = 0,
                     noise_sigma: float = 0.10) -> None:
    """Write an on-disk image-folder toy dataset (PNG) under root/{train,test}."""
    if class_count > SHAPES * len(CHROMA):
        raise ValueError(f"at most {SHAPES * len(CHROMA)} classes supported")
    root = Path(root)
    for split, per_class in (("train", train_per_class), ("test", test_per_class)):
        for k in range(class_count):
            cdir = root / split / f"class_{k}"
            cdir.mkdir(parents=True, exist_ok=True)
            rng = np.random.default_rng(seed * 100_003 + k * 1009 + (0 if split == "train" else 1))
            for i in range(per_class):
                img = make_image(k, size, rng, noise_sigma=noise_sigma)
                data_io.encode_image(img[None], cdir / f"img_{i:05d}.png")


def load_split(root, split: str, image_size: Optional[int] = None
               ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Load a split into (images N x 3 x S x S, labels) tensors, center-cropping
    to image_size when given."""
    ds = data_io.load_image_folder(root, split)
    images = []
    labels = []
    for path, cls in ds.items:
        batch = data_io.decode_image(path)
        if batch.shape[1] == 1:
            batch = np.repeat(batch, 3, axis=1)
        if image_size is not None:
            _, _, h, w = batch.shape
            if h < image_size or w < image_size:
                raise ValueError(f"image {path} smaller than crop size {image_size}")
            top, left = (h - image_size) // 2, (w - image_size) // 2
            batch = batch[:, :, top:top + image_size, left:left + image_size]
        images.append(batch[0])
        labels.append(cls)
    return torch.from_numpy(np.stack(images)), torch.tensor(labels, dtype=torch.long)


def make_blob_batch(n_per_class: int, size: int = 32, seed: int = 0
                    ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Two-class, linearly separable color blobs (sanity set for the classifier)."""
    rng = np.random.default_rng(seed)
    images = []
    labels = []
    for cls, color in ((0, (0.9, 0.1, 0.1)), (1, (0.1, 0.1, 0.9))):
        for _ in range(n_per_class):
            img = rng.uniform(0.4, 0.6, size=(3, size, size))
            for c in range(3):
                img[c] = 0.5 * img[c] + 0.5 * color[c]
            images.append(img.astype(np.float32))
            labels.append(cls)
    return torch.from_numpy(np.stack(images)), torch.tensor(labels, dtype=torch.long)
