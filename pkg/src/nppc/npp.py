"""Neural preprocessing filter: pixel-level 1x1 branch plus a U-Net semantic branch,
with per-channel quantization-adaptive feature scaling driven by the codec quality setting."""

import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data_io

MODULE_KIND = "npp"


@dataclass
class NPPConfig:
    base_channels: int = 32
    unet_depth: int = 3
    pixel_branch_layers: int = 3
    pixel_hidden: int = 16
    qa_hidden: int = 16
    qa_enabled: bool = True
    rate_point_min: float = 20.0
    rate_point_max: float = 85.0

    def __post_init__(self):
        if self.unet_depth < 1:
            raise ValueError("unet_depth must be >= 1")
        if min(self.base_channels, self.pixel_hidden, self.qa_hidden) < 1:
            raise ValueError("channel widths must be >= 1")
        if self.rate_point_max <= self.rate_point_min:
            raise ValueError("rate_point_max must exceed rate_point_min")

    def to_meta(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))

    @classmethod
    def from_meta(cls, meta: str) -> "NPPConfig":
        kwargs = {}
        casts = {f.name: f.type for f in fields(cls)}
        for line in meta.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if key not in casts:
                raise ValueError(f"unknown npp config key: {key}")
            if casts[key] == "bool" or casts[key] is bool:
                kwargs[key] = value in ("True", "true", "1")
            elif casts[key] == "int" or casts[key] is int:
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


def _codec_param(rate_point) -> float:
    return float(getattr(rate_point, "codec_param", rate_point))


class QAModulator(nn.Module):
    """2-layer MLP mapping the normalized quality setting to a positive channel scale."""

    def __init__(self, hidden: int, channels: int):
        super().__init__()
        self.fc1 = nn.Linear(1, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, q_norm: torch.Tensor) -> torch.Tensor:
        return torch.exp(self.fc2(F.relu(self.fc1(q_norm))))


class PixelBranch(nn.Module):
    def __init__(self, layers: int, hidden: int, channels: int = 3):
        super().__init__()
        widths = [channels] + [hidden] * (layers - 1) + [channels]
        self.convs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], kernel_size=1) for i in range(layers)
        )

    def forward(self, x):
        h = x
        for conv in self.convs[:-1]:
            h = F.gelu(conv(h))
        return self.convs[-1](h)


class UNetBranch(nn.Module):
    """Stride-2 encoder/decoder with skip connections; one QA site per stage."""

    def __init__(self, cfg: NPPConfig):
        super().__init__()
        self.depth = cfg.unet_depth
        ch = [cfg.base_channels * (2 ** i) for i in range(self.depth + 1)]
        self.stem = nn.Conv2d(3, ch[0], 3, padding=1)
        self.enc = nn.ModuleList(
            nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1) for i in range(self.depth)
        )
        self.enc_qa = nn.ModuleList(QAModulator(cfg.qa_hidden, ch[i + 1]) for i in range(self.depth))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in reversed(range(self.depth))
        )
        self.fuse = nn.ModuleList(
            nn.Conv2d(2 * ch[i], ch[i], 3, padding=1) for i in reversed(range(self.depth))
        )
        self.dec_qa = nn.ModuleList(
            QAModulator(cfg.qa_hidden, ch[i]) for i in reversed(range(self.depth))
        )
        self.head = nn.Conv2d(ch[0], 3, 3, padding=1)

    def forward(self, x, scales):
        skips = []
        h = F.gelu(self.stem(x))
        for i, enc in enumerate(self.enc):
            skips.append(h)
            h = F.gelu(enc(h))
            h = h * scales[f"enc{i}"].view(1, -1, 1, 1)
        for j, (up, fuse) in enumerate(zip(self.up, self.fuse)):
            h = up(h)
            h = F.gelu(fuse(torch.cat([h, skips[-1 - j]], dim=1)))
            h = h * scales[f"dec{j}"].view(1, -1, 1, 1)
        return self.head(h)


class NPPModule(nn.Module):
    def __init__(self, config: NPPConfig):
        super().__init__()
        self.config = config
        self.pixel = PixelBranch(config.pixel_branch_layers, config.pixel_hidden)
        self.unet = UNetBranch(config)

    def site_ids(self):
        d = self.config.unet_depth
        return [f"enc{i}" for i in range(d)] + [f"dec{j}" for j in range(d)]

    def q_norm(self, rate_point) -> torch.Tensor:
        cfg = self.config
        q = _codec_param(rate_point)
        qn = (q - cfg.rate_point_min) / (cfg.rate_point_max - cfg.rate_point_min)
        if qn < 0.0 or qn > 1.0:
            warnings.warn(f"codec_param {q} outside [{cfg.rate_point_min}, {cfg.rate_point_max}], clamping")
            qn = min(max(qn, 0.0), 1.0)
        p = next(self.parameters())
        return torch.tensor([[qn]], dtype=p.dtype, device=p.device)

    def qa_scale(self, rate_point, site: str) -> torch.Tensor:
        """Positive per-channel scale for one modulation site."""
        qn = self.q_norm(rate_point)
        mods = dict(zip(self.site_ids(), list(self.unet.enc_qa) + list(self.unet.dec_qa)))
        if site not in mods:
            raise ValueError(f"unknown modulation site {site!r}")
        return mods[site](qn).squeeze(0)

    def _all_scales(self, rate_point, qa_enabled: bool):
        if qa_enabled:
            qn = self.q_norm(rate_point)
            enc = {f"enc{i}": m(qn).squeeze(0) for i, m in enumerate(self.unet.enc_qa)}
            dec = {f"dec{j}": m(qn).squeeze(0) for j, m in enumerate(self.unet.dec_qa)}
            return {**enc, **dec}
        p = next(self.parameters())
        ones = {}
        for i, m in enumerate(self.unet.enc_qa):
            ones[f"enc{i}"] = torch.ones(m.fc2.out_features, dtype=p.dtype, device=p.device)
        for j, m in enumerate(self.unet.dec_qa):
            ones[f"dec{j}"] = torch.ones(m.fc2.out_features, dtype=p.dtype, device=p.device)
        return ones

    def forward(self, x: torch.Tensor, rate_point, qa_enabled=None, return_raw: bool = False):
        if x.ndim != 4 or x.shape[-2] < 8 or x.shape[-1] < 8:
            raise ValueError(f"input must be N x C x H x W with H, W >= 8, got {tuple(x.shape)}")
        if qa_enabled is None:
            qa_enabled = self.config.qa_enabled
        mult = 2 ** self.config.unet_depth
        h, w = x.shape[-2], x.shape[-1]
        pad_h = (-h) % mult
        pad_w = (-w) % mult
        xp = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect") if (pad_h or pad_w) else x
        scales = self._all_scales(rate_point, qa_enabled)
        residual = self.pixel(xp) + self.unet(xp, scales)
        raw = xp + residual
        out = torch.clamp(raw, 0.0, 1.0)[..., :h, :w]
        if return_raw:
            return out, raw[..., :h, :w]
        return out


def npp_init(config: NPPConfig, seed: int) -> NPPModule:
    """Build an NPP that is exactly the identity map: final convolutions and all
    QA output layers start at zero; everything else uses seeded fan-in-scaled init."""
    module = NPPModule(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.ndim > 1:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
            else:
                p.zero_()
        for zero_layer in [module.pixel.convs[-1], module.unet.head]:
            zero_layer.weight.zero_()
            zero_layer.bias.zero_()
        for qa in list(module.unet.enc_qa) + list(module.unet.dec_qa):
            qa.fc2.weight.zero_()
            qa.fc2.bias.zero_()
    return module


def npp_forward(module: NPPModule, x: torch.Tensor, rate_point, qa_enabled=None) -> torch.Tensor:
    return module(x, rate_point, qa_enabled=qa_enabled)


def state_to_arrays(module: nn.Module) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict(
        (name, tensor.detach().cpu().numpy().astype(np.float32))
        for name, tensor in module.state_dict().items()
    )


def arrays_to_state(module: nn.Module, params: "OrderedDict[str, np.ndarray]") -> None:
    state = OrderedDict((name, torch.from_numpy(np.asarray(arr))) for name, arr in params.items())
    module.load_state_dict(state)


def save_npp(module: NPPModule, path) -> None:
    data_io.save_checkpoint(state_to_arrays(module), MODULE_KIND, module.config.to_meta(), path)


def load_npp(path) -> NPPModule:
    params, kind, meta = data_io.load_checkpoint(path)
    if kind != MODULE_KIND:
        raise data_io.CheckpointError(f"incompatible checkpoint: kind {kind!r}, expected {MODULE_KIND!r}")
    module = NPPModule(NPPConfig.from_meta(meta))
    arrays_to_state(module, params)
    return module
