"""Differentiable stand-in codec: a stride-2 convolutional autoencoder with a
per-channel logistic factorized entropy model. Pretrained with a rate-distortion
loss, then finetuned per rate point to mimic the real codec's reconstructions."""

from dataclasses import dataclass, fields
from typing import Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import codec_bridge, data_io
from .npp import arrays_to_state, state_to_arrays

MODULE_KIND = "proxy"


@dataclass
class ProxyConfig:
    stages: int = 3
    latent_channels: int = 96
    hidden_channels: int = 64
    likelihood_floor: float = 1e-9
    lambda_p: float = 100.0

    def __post_init__(self):
        if self.stages < 2:
            raise ValueError("need at least 2 analysis/synthesis stages")
        if self.latent_channels < 8:
            raise ValueError("latent_channels must be >= 8")
        if not (0.0 < self.likelihood_floor <= 1e-3):
            raise ValueError("likelihood_floor must be in (0, 1e-3]")

    def to_meta(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))

    @classmethod
    def from_meta(cls, meta: str) -> "ProxyConfig":
        kwargs = {}
        for line in meta.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            if key in ("stages", "latent_channels", "hidden_channels"):
                kwargs[key] = int(value)
            elif key in ("likelihood_floor", "lambda_p"):
                kwargs[key] = float(value)
            else:
                raise ValueError(f"unknown proxy config key: {key}")
        return cls(**kwargs)


@dataclass
class ProxyOutput:
    recon: torch.Tensor
    rate_bits: torch.Tensor
    bpp: torch.Tensor


class _RoundSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, y):
        return torch.round(y)

    @staticmethod
    def backward(ctx, grad):
        return grad


def quantize_latent(y: torch.Tensor, mode: str, seed: Optional[int] = None) -> torch.Tensor:
    """Training surrogate for quantization: additive uniform noise ("noise") or
    round-half-to-even with pass-through gradient ("round")."""
    if mode == "noise":
        gen = None
        if seed is not None:
            gen = torch.Generator(device=y.device).manual_seed(seed)
        noise = torch.rand(y.shape, generator=gen, dtype=y.dtype, device=y.device) - 0.5
        return y + noise
    if mode == "round":
        return _RoundSTE.apply(y)
    raise ValueError(f"unknown quantization mode {mode!r}")


class EntropyModel(nn.Module):
    """Per-channel logistic density over integer bins, with learned location/scale."""

    def __init__(self, channels: int, likelihood_floor: float = 1e-9):
        super().__init__()
        self.mu = nn.Parameter(torch.zeros(channels))
        self.log_sigma = nn.Parameter(torch.zeros(channels))
        self.likelihood_floor = likelihood_floor

    def likelihood(self, y_q: torch.Tensor) -> torch.Tensor:
        mu = self.mu.view(1, -1, 1, 1)
        sigma = torch.exp(self.log_sigma).view(1, -1, 1, 1)
        upper = torch.sigmoid((y_q + 0.5 - mu) / sigma)
        lower = torch.sigmoid((y_q - 0.5 - mu) / sigma)
        return upper - lower


def rate_estimate(y_q: torch.Tensor, model: EntropyModel) -> torch.Tensor:
    """Total bits: sum of -log2 of the (floored) per-element likelihood."""
    p = torch.clamp(model.likelihood(y_q), min=model.likelihood_floor)
    return (-torch.log2(p)).sum()


class ProxyCodec(nn.Module):
    def __init__(self, config: ProxyConfig):
        super().__init__()
        self.config = config
        c = config.hidden_channels
        m = config.latent_channels
        enc = []
        ch_in = 3
        for i in range(config.stages):
            ch_out = m if i == config.stages - 1 else c
            enc.append(nn.Conv2d(ch_in, ch_out, 3, stride=2, padding=1))
            ch_in = ch_out
        self.analysis = nn.ModuleList(enc)
        dec = []
        ch_in = m
        for i in range(config.stages):
            dec.append(nn.ConvTranspose2d(ch_in, c, 4, stride=2, padding=1))
            ch_in = c
        self.synthesis = nn.ModuleList(dec)
        # full-resolution refinement; upsampling alone leaves block artifacts
        # the mimicry target is full of
        self.refine = nn.Sequential(
            nn.Conv2d(c, c, 3, padding=1), nn.GELU(), nn.Conv2d(c, 3, 3, padding=1)
        )
        self.entropy = EntropyModel(m, config.likelihood_floor)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for i, conv in enumerate(self.analysis):
            h = conv(h)
            if i < len(self.analysis) - 1:
                h = F.gelu(h)
        return h

    def decode(self, y: torch.Tensor) -> torch.Tensor:
        h = y
        for conv in self.synthesis:
            h = F.gelu(conv(h))
        return self.refine(h)


def proxy_init(config: ProxyConfig, seed: int) -> ProxyCodec:
    module = ProxyCodec(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.ndim > 1:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
            elif "bias" in name:
                p.zero_()
    return module


def proxy_forward(module: ProxyCodec, x: torch.Tensor, mode: str, seed: Optional[int] = None,
                  quantize: bool = True) -> ProxyOutput:
    """Full analysis -> quantize -> synthesis pass with a differentiable rate estimate.

    `quantize=False` skips the quantization surrogate (used by gradient checks)."""
    n, _, h, w = x.shape
    mult = 2 ** module.config.stages
    pad_h, pad_w = (-h) % mult, (-w) % mult
    xp = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect") if (pad_h or pad_w) else x
    y = module.encode(xp)
    y_q = quantize_latent(y, mode, seed=seed) if quantize else y
    recon = module.decode(y_q)[..., :h, :w]
    rate_bits = rate_estimate(y_q, module.entropy)
    bpp = rate_bits / float(n * h * w)
    return ProxyOutput(recon=recon, rate_bits=rate_bits, bpp=bpp)


def rd_loss(module: ProxyCodec, x: torch.Tensor, target: torch.Tensor, lambda_p: float,
            mode: str, seed: Optional[int]) -> Dict[str, torch.Tensor]:
    out = proxy_forward(module, x, mode=mode, seed=seed)
    mse = F.mse_loss(out.recon, target)
    loss = out.bpp + lambda_p * mse
    return {"loss": loss, "bpp": out.bpp, "mse": mse}


def pretrain_step(module: ProxyCodec, optimizer, batch: torch.Tensor, lambda_p: float,
                  seed: Optional[int] = None) -> Dict[str, float]:
    """One rate-distortion step against the original images (noise-mode quantization)."""
    optimizer.zero_grad()
    parts = rd_loss(module, batch, batch, lambda_p, mode="noise", seed=seed)
    if not torch.isfinite(parts["loss"]):
        raise RuntimeError(
            f"non-finite proxy loss: bpp={float(parts['bpp'].detach())} mse={float(parts['mse'].detach())}"
        )
    parts["loss"].backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in parts.items()}


def finetune_step(module: ProxyCodec, optimizer, batch: torch.Tensor,
                  rate_point: codec_bridge.RatePoint, codec, lambda_p: float,
                  seed: Optional[int] = None) -> Dict[str, float]:
    """One mimicry step: reconstruct toward the real codec's output at this rate point."""
    with torch.no_grad():
        x_q = codec_bridge.quantize8_ste(batch)
        target = codec_bridge.encode_decode(codec, x_q, rate_point).recon
    optimizer.zero_grad()
    parts = rd_loss(module, batch, target, lambda_p, mode="noise", seed=seed)
    if not torch.isfinite(parts["loss"]):
        raise RuntimeError(
            f"non-finite proxy loss: bpp={float(parts['bpp'].detach())} mse={float(parts['mse'].detach())}"
        )
    parts["loss"].backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in parts.items()}


def calibrate_lambda_p(pretrained: Dict[float, ProxyCodec], calib: torch.Tensor,
                       codec, rate_point: codec_bridge.RatePoint) -> float:
    """Pick the lambda_p whose pretrained proxy matches the real codec's mean bpp."""
    with torch.no_grad():
        x_q = codec_bridge.quantize8_ste(calib)
        real_bpp = codec_bridge.encode_decode(codec, x_q, rate_point).bpp
        best, best_gap = None, float("inf")
        for lam_p, module in sorted(pretrained.items()):
            proxy_bpp = float(proxy_forward(module, calib, mode="round").bpp)
            gap = abs(proxy_bpp - real_bpp)
            if gap < best_gap:
                best, best_gap = lam_p, gap
    return best


def save_proxy(module: ProxyCodec, path) -> None:
    data_io.save_checkpoint(state_to_arrays(module), MODULE_KIND, module.config.to_meta(), path)


def load_proxy(path) -> ProxyCodec:
    params, kind, meta = data_io.load_checkpoint(path)
    if kind != MODULE_KIND:
        raise data_io.CheckpointError(f"incompatible checkpoint: kind {kind!r}, expected {MODULE_KIND!r}")
    module = ProxyCodec(ProxyConfig.from_meta(meta))
    arrays_to_state(module, params)
    return module
