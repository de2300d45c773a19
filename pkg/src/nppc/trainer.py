"""Joint training: the rate + task + fidelity loss with forward-real/backward-proxy
substitution, and the staged schedule (proxy mimicry, fixed-quality filter training,
quality-adaptive training)."""

import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import codec_bridge, data_io, proxy_codec, task_head
from .codec_bridge import RatePoint
from .npp import NPPConfig, NPPModule, npp_init, state_to_arrays, arrays_to_state
from .proxy_codec import ProxyConfig

log = logging.getLogger("nppc.trainer")

# Full-scale reference schedule; desk-scale defaults below are this divided by 20.
FULL_SCALE_STEPS = (400_000, 120_000, 100_000)
FULL_SCALE_DROPS = (320_000, 80_000, 60_000)


@dataclass
class TrainConfig:
    image_size: int = 64
    batch_size: int = 8
    seed: int = 0
    beta: float = 0.5
    forward_mode: str = "real"
    codec: str = "jpeg"
    schedule: str = "1:85:0.5,2:70:1,3:50:2,4:35:4,5:20:8"
    lambda_p: str = "1000,400,100,50,10"
    lr: float = 1e-4
    lr_low: float = 1e-5
    stage1_pretrain_steps: int = 4000
    stage1_steps: int = 20000
    stage1_drop: int = 16000
    stage2_steps: int = 6000
    stage2_drop: int = 4000
    stage3_steps: int = 5000
    stage3_drop: int = 3000
    multi_steps: int = 2000
    multi_drop: int = 1600
    eval_interval: int = 500
    val_size: int = 64
    state_interval: int = 1000
    classifier_epochs: int = 10
    clf_channels: int = 16
    clf_lr: float = 1e-3
    clf_batch: int = 64
    clf_augment: str = ""
    npp_base_channels: int = 32
    npp_unet_depth: int = 3
    npp_pixel_layers: int = 3
    npp_pixel_hidden: int = 16
    npp_qa_hidden: int = 16
    proxy_stages: int = 3
    proxy_latent: int = 96
    proxy_hidden: int = 64

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.forward_mode not in ("real", "proxy"):
            raise ValueError("forward_mode must be 'real' or 'proxy'")
        if min(self.stage1_steps, self.stage2_steps, self.stage3_steps) < 1:
            raise ValueError("stage step counts must be >= 1")

    def rate_points(self) -> List[RatePoint]:
        points = []
        for part in self.schedule.split(","):
            rp_id, q, lam = part.split(":")
            points.append(RatePoint(int(rp_id), float(q), float(lam)))
        if len({p.id for p in points}) != len(points):
            raise ValueError("rate point ids must be unique")
        return points

    def lambda_p_for(self, rate_point: RatePoint) -> float:
        values = [float(v) for v in self.lambda_p.split(",")]
        points = self.rate_points()
        if len(values) == 1:
            return values[0]
        if len(values) != len(points):
            raise ValueError("lambda_p list must match the schedule length")
        return values[[p.id for p in points].index(rate_point.id)]

    def clf_augment_range(self) -> Optional[tuple]:
        """JPEG quality range for classifier training augmentation, or None."""
        if not self.clf_augment:
            return None
        lo, hi = (int(v) for v in self.clf_augment.split(","))
        if not 1 <= lo <= hi <= 95:
            raise ValueError("clf_augment must be 'low,high' with 1 <= low <= high <= 95")
        return lo, hi

    def npp_config(self, qa_enabled: bool = True) -> NPPConfig:
        points = self.rate_points()
        qs = [p.codec_param for p in points]
        return NPPConfig(
            base_channels=self.npp_base_channels,
            unet_depth=self.npp_unet_depth,
            pixel_branch_layers=self.npp_pixel_layers,
            pixel_hidden=self.npp_pixel_hidden,
            qa_hidden=self.npp_qa_hidden,
            qa_enabled=qa_enabled,
            rate_point_min=min(qs),
            rate_point_max=max(qs),
        )

    def proxy_config(self, lambda_p: float) -> ProxyConfig:
        return ProxyConfig(
            stages=self.proxy_stages,
            latent_channels=self.proxy_latent,
            hidden_channels=self.proxy_hidden,
            lambda_p=lambda_p,
        )

    def to_text(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self)) + "\n"


def parse_config(path) -> TrainConfig:
    """Read a flat key=value config file; unknown keys are rejected."""
    known = {f.name: f for f in fields(TrainConfig)}
    kwargs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        ftype = known[key].type
        value = value.strip()
        if ftype == "int" or ftype is int:
            kwargs[key] = int(value)
        elif ftype == "float" or ftype is float:
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return TrainConfig(**kwargs)


def _step_seed(seed: int, step: int, stream: int) -> int:
    return (seed * 1_000_003 + step * 7919 + stream * 104_729) % (2 ** 63 - 1)


def sample_batch(images: torch.Tensor, labels: torch.Tensor, batch_size: int,
                 seed: int, step: int):
    gen = torch.Generator().manual_seed(_step_seed(seed, step, 0))
    idx = torch.randint(images.shape[0], (batch_size,), generator=gen)
    return images[idx], labels[idx]


def sample_rate_point(points: List[RatePoint], seed: int, step: int) -> RatePoint:
    gen = torch.Generator().manual_seed(_step_seed(seed, step, 1))
    return points[int(torch.randint(len(points), (1,), generator=gen))]


def joint_loss(npp_module: NPPModule, proxy_module, classifier, x: torch.Tensor,
               labels: torch.Tensor, rate_point: RatePoint, beta: float,
               forward_mode: str, codec=None, qa_enabled: Optional[bool] = None,
               differentiable: bool = False):
    """Rate + lambda * task loss + beta * preprocessing distortion.

    In real forward mode the loss value is computed from genuine codec outputs,
    with gradients routed through the frozen proxy via value substitution.
    `differentiable=True` bypasses both hard-quantization sites (gradient checks)."""
    x_bar, x_bar_raw = npp_module(x, rate_point, qa_enabled=qa_enabled, return_raw=True)
    d_pre = F.mse_loss(x, x_bar_raw)
    x_q = x_bar if differentiable else codec_bridge.quantize8_ste(x_bar)
    proxy_out = proxy_codec.proxy_forward(
        proxy_module, x_q, mode="round", quantize=not differentiable
    )
    real_bpp = None
    if forward_mode == "real":
        if codec is None:
            raise ValueError("real forward mode requires a codec")
        with torch.no_grad():
            result = codec_bridge.encode_decode(codec, x_q.detach(), rate_point)
        real_bpp = result.bpp
        x_hat = codec_bridge.value_substitute(result.recon, proxy_out.recon)
        rate = codec_bridge.value_substitute(
            torch.tensor(result.bpp, dtype=proxy_out.bpp.dtype), proxy_out.bpp
        )
    elif forward_mode == "proxy":
        x_hat = proxy_out.recon
        rate = proxy_out.bpp
    else:
        raise ValueError(f"unknown forward mode {forward_mode!r}")
    d_m = task_head.task_loss(classifier, x_hat, labels)
    loss = rate + rate_point.lam * d_m + beta * d_pre
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"non-finite loss: R={float(rate.detach())} D_m={float(d_m.detach())} "
            f"D_pre={float(d_pre.detach())}"
        )
    components = {
        "L": float(loss.detach()),
        "R": float(rate.detach()),
        "D_m": float(d_m.detach()),
        "D_pre": float(d_pre.detach()),
        "lambda": rate_point.lam,
    }
    if real_bpp is not None:
        components["real_bpp"] = real_bpp
    return loss, components


def _trainable_params(module: NPPModule, include_qa: bool):
    params = []
    for name, p in module.named_parameters():
        if ("enc_qa" in name or "dec_qa" in name) and not include_qa:
            continue
        params.append((name, p))
    return params


def save_train_state(module: NPPModule, optimizer, step: int, path) -> None:
    """Checkpoint parameters plus optimizer moments so a run can resume bit-exactly."""
    records: "OrderedDict[str, np.ndarray]" = state_to_arrays(module)
    for group in optimizer.param_groups:
        for p in group["params"]:
            name = getattr(p, "_nppc_name", None)
            state = optimizer.state.get(p, {})
            if name is None or not state:
                continue
            records[f"opt.{name}.m"] = state["exp_avg"].detach().numpy().astype(np.float32)
            records[f"opt.{name}.v"] = state["exp_avg_sq"].detach().numpy().astype(np.float32)
            records[f"opt.{name}.step"] = np.array(float(state["step"]), dtype=np.float32)
    meta = module.config.to_meta() + f"\n__step__={step}"
    data_io.save_checkpoint(records, "npp_train_state", meta, path)


def load_train_state(path, module: NPPModule, optimizer) -> int:
    records, kind, meta = data_io.load_checkpoint(path)
    if kind != "npp_train_state":
        raise data_io.CheckpointError(f"incompatible checkpoint: kind {kind!r}")
    step = 0
    for line in meta.splitlines():
        if line.startswith("__step__="):
            step = int(line.split("=", 1)[1])
    model_records = OrderedDict(
        (k, v) for k, v in records.items() if not k.startswith("opt.")
    )
    arrays_to_state(module, model_records)
    for group in optimizer.param_groups:
        for p in group["params"]:
            name = getattr(p, "_nppc_name", None)
            key = f"opt.{name}.m"
            if name is None or key not in records:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(records[f"opt.{name}.step"])),
                "exp_avg": torch.from_numpy(records[key].copy()),
                "exp_avg_sq": torch.from_numpy(records[f"opt.{name}.v"].copy()),
            }
    return step


def _run_stage(stage: str, npp_module: NPPModule, proxies: Dict[int, proxy_codec.ProxyCodec],
               classifier, codec, config: TrainConfig, images: torch.Tensor,
               labels: torch.Tensor, points: List[RatePoint], steps: int, drop: int,
               include_qa: bool, qa_enabled: bool, fixed_point: Optional[RatePoint],
               state_path=None) -> NPPModule:
    """Shared loop for the fixed-quality and adaptive stages.

    Randomness is derived per step from the seed, so a resumed run replays the
    same trajectory. Keeps the best-by-validation parameter state."""
    for proxy in proxies.values():
        task_head.freeze(proxy)
    task_head.freeze(classifier)
    named = _trainable_params(npp_module, include_qa=include_qa)
    for name, p in named:
        p._nppc_name = name
        p.requires_grad_(True)
    for name, p in npp_module.named_parameters():
        if name not in {n for n, _ in named}:
            p.requires_grad_(False)
    optimizer = torch.optim.Adam([p for _, p in named], lr=config.lr)

    start = 0
    if state_path is not None and Path(state_path).exists():
        start = load_train_state(state_path, npp_module, optimizer)
        log.info("resumed %s from step %d", stage, start)

    n_val = min(config.val_size, images.shape[0] // 4)
    val_images, val_labels = images[:n_val], labels[:n_val]
    train_images, train_labels = images[n_val:], labels[n_val:]
    val_point = fixed_point or points[len(points) // 2]

    best_val = float("inf")
    best_state = state_to_arrays(npp_module)
    for step in range(start, steps):
        lr = config.lr_low if step >= drop else config.lr
        for group in optimizer.param_groups:
            group["lr"] = lr
        point = fixed_point or sample_rate_point(points, config.seed, step)
        bx, by = sample_batch(train_images, train_labels, config.batch_size, config.seed, step)
        optimizer.zero_grad()
        loss, parts = joint_loss(
            npp_module, proxies[point.id], classifier, bx, by, point,
            beta=config.beta, forward_mode=config.forward_mode, codec=codec,
            qa_enabled=qa_enabled,
        )
        loss.backward()
        optimizer.step()
        if step % 50 == 0 or step == steps - 1:
            log.info(
                "step=%d stage=%s rate_point=%d L=%.6f R=%.6f D_m=%.6f D_pre=%.6f lr=%.2e",
                step, stage, point.id, parts["L"], parts["R"], parts["D_m"],
                parts["D_pre"], lr,
            )
        if (step + 1) % config.eval_interval == 0 or step == steps - 1:
            with torch.no_grad():
                _, val_parts = joint_loss(
                    npp_module, proxies[val_point.id], classifier, val_images, val_labels,
                    val_point, beta=config.beta, forward_mode=config.forward_mode,
                    codec=codec, qa_enabled=qa_enabled,
                )
            log.info("step=%d stage=%s val_L=%.6f", step, stage, val_parts["L"])
            if val_parts["L"] < best_val:
                best_val = val_parts["L"]
                best_state = state_to_arrays(npp_module)
        if state_path is not None and (step + 1) % config.state_interval == 0:
            save_train_state(npp_module, optimizer, step + 1, state_path)
    arrays_to_state(npp_module, best_state)
    return npp_module


def stage2_train(config: TrainConfig, images: torch.Tensor, labels: torch.Tensor,
                 classifier, proxy_mid: proxy_codec.ProxyCodec, codec,
                 npp_module: Optional[NPPModule] = None,
                 state_path=None) -> NPPModule:
    """Train the filter at the fixed middle rate point, adaptive scaling disabled."""
    points = config.rate_points()
    mid = points[len(points) // 2]
    if npp_module is None:
        npp_module = npp_init(config.npp_config(qa_enabled=False), config.seed)
    return _run_stage(
        "2", npp_module, {mid.id: proxy_mid}, classifier, codec, config, images, labels,
        points, config.stage2_steps, config.stage2_drop, include_qa=False,
        qa_enabled=False, fixed_point=mid, state_path=state_path,
    )


def stage3_train(config: TrainConfig, images: torch.Tensor, labels: torch.Tensor,
                 classifier, proxies: Dict[int, proxy_codec.ProxyCodec], codec,
                 npp_module: NPPModule, state_path=None) -> NPPModule:
    """Continue from the fixed-quality checkpoint, sampling a rate point per step
    with the adaptive scaling layers enabled (zero-initialized, so step 0 is
    continuous with the previous stage)."""
    points = config.rate_points()
    missing = [p.id for p in points if p.id not in proxies]
    if missing:
        raise ValueError(f"missing finetuned proxies for rate points {missing}")
    npp_module.config.qa_enabled = True
    return _run_stage(
        "3", npp_module, proxies, classifier, codec, config, images, labels,
        points, config.stage3_steps, config.stage3_drop, include_qa=True,
        qa_enabled=True, fixed_point=None, state_path=state_path,
    )


def train_multi(config: TrainConfig, images: torch.Tensor, labels: torch.Tensor,
                classifier, proxies: Dict[int, proxy_codec.ProxyCodec], codec
                ) -> Dict[int, NPPModule]:
    """One independent fixed-quality filter per rate point (the multi-model ablation)."""
    points = config.rate_points()
    out: Dict[int, NPPModule] = {}
    for point in points:
        module = npp_init(config.npp_config(qa_enabled=False), config.seed)
        out[point.id] = _run_stage(
            f"multi-{point.id}", module, {point.id: proxies[point.id]}, classifier,
            codec, config, images, labels, points, config.multi_steps,
            config.multi_drop, include_qa=False, qa_enabled=False, fixed_point=point,
        )
    return out


def train_proxy_for_point(config: TrainConfig, images: torch.Tensor,
                          rate_point: RatePoint, codec,
                          pretrain_steps: Optional[int] = None,
                          finetune_steps: Optional[int] = None) -> proxy_codec.ProxyCodec:
    """Rate-distortion pretraining followed by real-codec mimicry finetuning."""
    lambda_p = config.lambda_p_for(rate_point)
    module = proxy_codec.proxy_init(config.proxy_config(lambda_p), config.seed + rate_point.id)
    optimizer = torch.optim.Adam(module.parameters(), lr=config.lr)
    pre_steps = config.stage1_pretrain_steps if pretrain_steps is None else pretrain_steps
    fin_steps = config.stage1_steps if finetune_steps is None else finetune_steps
    dummy_labels = torch.zeros(images.shape[0], dtype=torch.long)
    for step in range(pre_steps):
        bx, _ = sample_batch(images, dummy_labels, config.batch_size, config.seed, step)
        parts = proxy_codec.pretrain_step(
            module, optimizer, bx, lambda_p, seed=_step_seed(config.seed, step, 2)
        )
        if step % 100 == 0:
            log.info("step=%d stage=1-pre rate_point=%d L=%.6f R=%.6f D=%.6f lr=%.2e",
                     step, rate_point.id, parts["loss"], parts["bpp"], parts["mse"], config.lr)
    failures = 0
    for step in range(fin_steps):
        lr = config.lr_low if step >= config.stage1_drop else config.lr
        for group in optimizer.param_groups:
            group["lr"] = lr
        bx, _ = sample_batch(images, dummy_labels, config.batch_size, config.seed, pre_steps + step)
        try:
            parts = proxy_codec.finetune_step(
                module, optimizer, bx, rate_point, codec, lambda_p,
                seed=_step_seed(config.seed, pre_steps + step, 2),
            )
            failures = 0
        except codec_bridge.CodecError as exc:
            failures += 1
            warnings.warn(f"codec failure, skipping batch: {exc}")
            if failures >= 3:
                raise
            continue
        if step % 100 == 0:
            log.info("step=%d stage=1-fit rate_point=%d L=%.6f R=%.6f D=%.6f lr=%.2e",
                     step, rate_point.id, parts["loss"], parts["bpp"], parts["mse"], lr)
    return module
