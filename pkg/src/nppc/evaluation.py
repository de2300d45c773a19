"""Rate-accuracy evaluation: curve sweeps over the codec quality schedule,
Bjontegaard delta-rate between curves, PSNR, and residual visualization."""

import warnings
from typing import List, Optional

import numpy as np
import torch
from scipy.interpolate import PchipInterpolator

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import codec_bridge, data_io, task_head
from .codec_bridge import RatePoint
from .data_io import CurvePoint, RateAccuracyCurve
from .npp import NPPModule


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    """Peak signal-to-noise ratio on unit-range images, capped at 100 dB."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float(torch.mean((x - y) ** 2))
    if mse < 1e-10:
        return 100.0
    return 10.0 * np.log10(1.0 / mse)


def residual_map(x: torch.Tensor, x_bar: torch.Tensor) -> np.ndarray:
    """Per-pixel mean absolute difference, normalized to [0, 1] by its maximum."""
    if x.shape != x_bar.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_bar.shape)}")
    diff = torch.mean(torch.abs(x - x_bar), dim=-3).squeeze()
    arr = diff.detach().cpu().numpy()
    peak = arr.max()
    if peak > 0:
        arr = arr / peak
    return arr


@torch.no_grad()
def eval_curve(codec, schedule: List[RatePoint], images: torch.Tensor,
               labels: torch.Tensor, classifier, npp_module: Optional[NPPModule] = None,
               tag: str = "", batch_size: int = 64) -> RateAccuracyCurve:
    """Sweep the schedule over the test set; one (bpp, accuracy, psnr) point per
    rate point. With no filter module this is the plain-codec baseline."""
    if images.shape[0] == 0:
        raise ValueError("empty test set")
    task_head.freeze(classifier)
    if npp_module is not None:
        npp_module.eval()
    points = []
    for rp in schedule:
        bpps: List[float] = []
        psnrs: List[float] = []
        correct = 0
        for start in range(0, images.shape[0], batch_size):
            x = images[start:start + batch_size]
            y = labels[start:start + batch_size]
            filtered = npp_module(x, rp) if npp_module is not None else x
            x_q = codec_bridge.quantize8_ste(filtered)
            result = codec_bridge.encode_decode(codec, x_q, rp)
            bpps.extend(result.per_image_bpp)
            for i in range(x.shape[0]):
                psnrs.append(psnr(x[i], result.recon[i]))
            pred = torch.argmax(classifier(result.recon), dim=1)
            correct += int((pred == y).sum())
        points.append(
            CurvePoint(
                rate_point=rp.id,
                codec_param=rp.codec_param,
                bpp=float(np.mean(bpps)),
                accuracy=correct / images.shape[0],
                psnr=float(np.mean(psnrs)),
            )
        )
    return RateAccuracyCurve(points=points, tag=tag)


def _fit_points(curve: RateAccuracyCurve):
    """Sort by accuracy; collapse equal-accuracy points to the minimum bpp."""
    by_acc = {}
    for p in curve.points:
        if p.bpp <= 0:
            raise ValueError("bpp must be positive for BD-rate")
        if p.accuracy in by_acc:
            by_acc[p.accuracy] = min(by_acc[p.accuracy], p.bpp)
        else:
            by_acc[p.accuracy] = p.bpp
    acc = np.array(sorted(by_acc.keys()), dtype=np.float64)
    log_bpp = np.log10([by_acc[a] for a in acc])
    return acc, log_bpp


def _integrate(acc: np.ndarray, log_bpp: np.ndarray, lo: float, hi: float) -> float:
    if len(acc) >= 4:
        # monotone piecewise-cubic fit; a global cubic polyfit oscillates when
        # the accuracy axis saturates and can flip the sign of the delta
        fit = PchipInterpolator(acc, log_bpp).antiderivative()
        return float(fit(hi) - fit(lo))
    warnings.warn("fewer than 4 distinct points: piecewise-linear BD-rate fallback")
    grid = np.linspace(lo, hi, 256)
    vals = np.interp(grid, acc, log_bpp)
    return float(np.trapezoid(vals, grid))


def bd_rate(anchor: RateAccuracyCurve, test: RateAccuracyCurve) -> float:
    """Average percent bitrate difference (test vs anchor) at equal accuracy.

    Fits log10(bpp) as a function of accuracy with a monotone piecewise
    cubic, integrates both fits over the overlapping accuracy range, and
    exponentiates the mean gap. Negative results are bitrate savings."""
    if len(anchor.points) < 2 or len(test.points) < 2:
        raise ValueError("curves need at least 2 points")
    a_acc, a_log = _fit_points(anchor)
    t_acc, t_log = _fit_points(test)
    lo = max(a_acc.min(), t_acc.min())
    hi = min(a_acc.max(), t_acc.max())
    if hi <= lo:
        raise ValueError("curves disjoint: no overlapping accuracy range")
    int_a = _integrate(a_acc, a_log, lo, hi)
    int_t = _integrate(t_acc, t_log, lo, hi)
    delta = (int_t - int_a) / (hi - lo)
    return (10.0 ** delta - 1.0) * 100.0


def save_residual_png(res: np.ndarray, path) -> None:
    data_io.encode_image(res[None, None].astype(np.float32), path)


def plot_curves(curves: List[RateAccuracyCurve], out_path, metric: str = "accuracy") -> None:
    """Render rate-accuracy (or rate-PSNR) curves to a PNG/SVG file."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for curve in curves:
        pts = sorted(curve.points, key=lambda p: p.bpp)
        xs = [p.bpp for p in pts]
        ys = [getattr(p, metric) for p in pts]
        ax.plot(xs, ys, marker="o", label=curve.tag or None)
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("top-1 accuracy" if metric == "accuracy" else "PSNR (dB)")
    ax.grid(True, alpha=0.3)
    if any(c.tag for c in curves):
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
