"""Frozen downstream classifier: supplies the task loss and the accuracy metric."""

from dataclasses import dataclass, fields
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import codec_bridge, data_io
from .npp import arrays_to_state, state_to_arrays

MODULE_KIND = "classifier"


@dataclass
class ClassifierConfig:
    class_count: int = 10
    base_channels: int = 16

    def to_meta(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))

    @classmethod
    def from_meta(cls, meta: str) -> "ClassifierConfig":
        kwargs = {}
        for line in meta.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key not in ("class_count", "base_channels"):
                raise ValueError(f"unknown classifier config key: {key}")
            kwargs[key] = int(value)
        return cls(**kwargs)


class SmallClassifier(nn.Module):
    """Four stride-2 conv blocks with group normalization, global average
    pooling, linear head. Normalization matters here: the training images are
    deliberately noisy and an unnormalized stack underfits badly."""

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        c = config.base_channels

        def block(ch_in, ch_out):
            return [
                nn.Conv2d(ch_in, ch_out, 3, stride=2, padding=1),
                nn.GroupNorm(min(8, ch_out), ch_out),
                nn.ReLU(),
            ]

        self.blocks = nn.Sequential(
            *block(3, c), *block(c, 2 * c), *block(2 * c, 4 * c), *block(4 * c, 4 * c)
        )
        self.head = nn.Linear(4 * c, config.class_count)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.blocks(x)
        return self.head(h.mean(dim=(2, 3)))


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def task_loss(classifier: SmallClassifier, x_hat: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy on the reconstruction; gradients flow into x_hat only."""
    if labels.min() < 0 or labels.max() >= classifier.config.class_count:
        raise ValueError("label out of range")
    return F.cross_entropy(classifier(x_hat), labels)


@torch.no_grad()
def accuracy(classifier: SmallClassifier, images: torch.Tensor, labels: torch.Tensor,
             batch_size: int = 256) -> float:
    """Top-1 fraction; argmax ties resolve to the lowest class index."""
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        logits = classifier(images[start:start + batch_size])
        pred = torch.argmax(logits, dim=1)
        correct += int((pred == labels[start:start + batch_size]).sum())
    return correct / images.shape[0]


def train_classifier(images: torch.Tensor, labels: torch.Tensor, class_count: int,
                     epochs: int = 10, seed: int = 0, batch_size: int = 64,
                     lr: float = 1e-3, base_channels: int = 16,
                     augment_quality: Optional[Tuple[int, int]] = None) -> SmallClassifier:
    """Train with cross-entropy; returns the trained (unfrozen) model.

    augment_quality, given as a (low, high) pair, round-trips a random two out
    of three batches through JPEG at a quality drawn from that range. Task
    models deployed behind lossy codecs see compressed imagery in training;
    a model trained purely on originals treats every codec output as out of
    distribution and its accuracy collapses even at the highest quality."""
    if int(labels.max()) >= class_count:
        raise ValueError("class_count smaller than the largest label")
    torch.manual_seed(seed)
    model = SmallClassifier(ClassifierConfig(class_count=class_count, base_channels=base_channels))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    codec = codec_bridge.JpegCodec()
    n = images.shape[0]
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            batch = images[idx]
            if augment_quality is not None and float(torch.rand((), generator=gen)) < 2 / 3:
                lo, hi = augment_quality
                q = int(torch.randint(lo, hi + 1, (), generator=gen))
                point = codec_bridge.RatePoint(0, float(q), 1.0)
                batch = codec_bridge.encode_decode(codec, batch, point).recon
            opt.zero_grad()
            loss = F.cross_entropy(model(batch), labels[idx])
            loss.backward()
            opt.step()
    return model


def save_classifier(module: SmallClassifier, path) -> None:
    data_io.save_checkpoint(state_to_arrays(module), MODULE_KIND, module.config.to_meta(), path)


def load_classifier(path) -> SmallClassifier:
    params, kind, meta = data_io.load_checkpoint(path)
    if kind != MODULE_KIND:
        raise data_io.CheckpointError(f"incompatible checkpoint: kind {kind!r}, expected {MODULE_KIND!r}")
    module = SmallClassifier(ClassifierConfig.from_meta(meta))
    arrays_to_state(module, params)
    return module
