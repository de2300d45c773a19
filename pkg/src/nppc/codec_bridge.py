"""Real-codec wrappers plus the two gradient tricks that let training see them:
pass-through 8-bit quantization and forward-real/backward-proxy value substitution."""

import io
import os
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np
import torch
from PIL import Image

from . import data_io


@dataclass(frozen=True)
class RatePoint:
    """One operating point: codec quality setting and its loss trade-off weight."""

    id: int
    codec_param: float
    lam: float

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lambda must be positive")


# JPEG qualities standing in for the BPG QP sweep; lambda rises as quality falls.
DEFAULT_SCHEDULE: List[RatePoint] = [
    RatePoint(1, 85, 0.5),
    RatePoint(2, 70, 1.0),
    RatePoint(3, 50, 2.0),
    RatePoint(4, 35, 4.0),
    RatePoint(5, 20, 8.0),
]


@dataclass
class CodecResult:
    recon: torch.Tensor
    bpp: float
    byte_size: int
    per_image_bpp: List[float]


class CodecError(RuntimeError):
    """Raised when an external codec is unavailable or fails."""


class JpegCodec:
    """In-process JPEG via Pillow; codec_param is JPEG quality (1-95)."""

    name = "jpeg"

    def encode(self, u8: np.ndarray, codec_param: float) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(u8).save(buf, format="JPEG", quality=int(round(codec_param)))
        return buf.getvalue()

    def decode(self, payload: bytes) -> np.ndarray:
        with Image.open(io.BytesIO(payload)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)


class BpgCodec:
    """BPG via bpgenc/bpgdec subprocesses; codec_param is the BPG QP.

    Binary locations can be overridden with NPPC_BPG_PATH (directory containing both)."""

    name = "bpg"

    def __init__(self):
        root = os.environ.get("NPPC_BPG_PATH", "")
        self._enc = str(Path(root) / "bpgenc") if root else "bpgenc"
        self._dec = str(Path(root) / "bpgdec") if root else "bpgdec"
        for exe in (self._enc, self._dec):
            try:
                subprocess.run([exe, "-h"], capture_output=True, check=False)
            except FileNotFoundError:
                raise CodecError(f"codec unavailable: {exe} not found (set NPPC_BPG_PATH)")

    def encode(self, u8: np.ndarray, codec_param: float) -> bytes:
        with tempfile.TemporaryDirectory() as tmp:
            src = Path(tmp) / "in.png"
            dst = Path(tmp) / "out.bpg"
            Image.fromarray(u8).save(src)
            proc = subprocess.run(
                [self._enc, "-q", str(int(round(codec_param))), "-o", str(dst), str(src)],
                capture_output=True,
            )
            if proc.returncode != 0:
                raise CodecError(f"bpgenc failed: {proc.stderr.decode(errors='replace')}")
            return dst.read_bytes()

    def decode(self, payload: bytes) -> np.ndarray:
        with tempfile.TemporaryDirectory() as tmp:
            src = Path(tmp) / "in.bpg"
            dst = Path(tmp) / "out.png"
            src.write_bytes(payload)
            proc = subprocess.run([self._dec, "-o", str(dst), str(src)], capture_output=True)
            if proc.returncode != 0:
                raise CodecError(f"bpgdec failed: {proc.stderr.decode(errors='replace')}")
            return np.asarray(Image.open(dst).convert("RGB"), dtype=np.uint8)


def make_codec(name: str):
    if name == "jpeg":
        return JpegCodec()
    if name == "bpg":
        return BpgCodec()
    raise ValueError(f"unknown codec {name!r}")


class _Quantize8STE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return torch.round(x * 255.0) / 255.0

    @staticmethod
    def backward(ctx, grad):
        return grad


def quantize8_ste(x: torch.Tensor) -> torch.Tensor:
    """Snap unit-range values to the 8-bit grid; gradient passes through unchanged."""
    return _Quantize8STE.apply(x)


class _ValueSubstitute(torch.autograd.Function):
    @staticmethod
    def forward(ctx, real, proxy):
        return real.clone()

    @staticmethod
    def backward(ctx, grad):
        return None, grad


def value_substitute(real: torch.Tensor, proxy: torch.Tensor) -> torch.Tensor:
    """Forward value is `real`, bit for bit; the backward pass routes the incoming
    gradient entirely to `proxy` (out = proxy + stop_gradient(real - proxy))."""
    real = torch.as_tensor(real, dtype=proxy.dtype, device=proxy.device)
    if real.shape != proxy.shape:
        raise ValueError(f"shape mismatch: real {tuple(real.shape)} vs proxy {tuple(proxy.shape)}")
    return _ValueSubstitute.apply(real.detach(), proxy)


def encode_decode(codec, x: torch.Tensor, rate_point: RatePoint) -> CodecResult:
    """Round-trip a batch through the real codec, measuring exact payload bits.

    Input must already be on the 8-bit grid (see quantize8_ste). No gradients flow."""
    if x.ndim != 4:
        raise ValueError("expected an N x C x H x W batch")
    x_np = x.detach().cpu().numpy()
    n, c, h, w = x_np.shape
    recons = []
    per_image_bpp = []
    total_bytes = 0
    for i in range(n):
        u8 = data_io.u8_from_unit(x_np[i].transpose(1, 2, 0))
        if c == 1:
            u8 = np.repeat(u8, 3, axis=2)
        payload = codec.encode(u8, rate_point.codec_param)
        total_bytes += len(payload)
        per_image_bpp.append(8.0 * len(payload) / (h * w))
        dec = codec.decode(payload)
        rec = data_io.unit_from_u8(dec).transpose(2, 0, 1)
        if c == 1:
            rec = rec.mean(axis=0, keepdims=True)
        recons.append(rec)
    recon = torch.from_numpy(np.stack(recons)).to(dtype=x.dtype, device=x.device)
    return CodecResult(
        recon=recon,
        bpp=float(np.mean(per_image_bpp)),
        byte_size=total_bytes,
        per_image_bpp=per_image_bpp,
    )
