"""Command-line entry point. Results go to files (checkpoints, CSVs, figures);
progress goes to stderr; every run writes a manifest next to its output."""

import argparse
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import torch

from . import __version__, codec_bridge, data_io, evaluation, npp as npp_mod, proxy_codec, task_head, toydata, trainer


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _data_fingerprint(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(f"{p.relative_to(root)}:{p.stat().st_size}\n".encode())
    return h.hexdigest()


def _version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, cwd=Path(__file__).parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return __version__


def write_manifest(out_path, args, config: "trainer.TrainConfig") -> None:
    inputs = {}
    for name in ("config", "ckpt", "classifier_ckpt", "anchor", "test", "image"):
        value = getattr(args, name, None)
        if value and Path(value).is_file():
            inputs[name] = _sha256(Path(value))
    if getattr(args, "data", None) and Path(args.data).is_dir():
        inputs["data"] = _data_fingerprint(Path(args.data))
    manifest = {
        "command": args.command,
        "version": _version(),
        "seed": config.seed,
        "config": config.to_text(),
        "input_hashes": inputs,
    }
    path = Path(str(out_path) + ".manifest.json")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def _load_config(args) -> trainer.TrainConfig:
    cfg = trainer.parse_config(args.config) if getattr(args, "config", None) else trainer.TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "forward_mode", None):
        cfg.forward_mode = args.forward_mode
    if getattr(args, "codec", None):
        cfg.codec = args.codec
    return cfg


def _rate_point(cfg: trainer.TrainConfig, rp_id: int) -> codec_bridge.RatePoint:
    for p in cfg.rate_points():
        if p.id == rp_id:
            return p
    raise ValueError(f"rate point id {rp_id} not in schedule")


def _load_proxies(proxy_dir, points):
    proxies = {}
    for p in points:
        path = Path(proxy_dir) / f"proxy_rp{p.id}.nppc"
        if not path.exists():
            raise FileNotFoundError(f"missing proxy checkpoint {path}")
        proxies[p.id] = proxy_codec.load_proxy(path)
    return proxies


def cmd_train_classifier(args) -> int:
    cfg = _load_config(args)
    images, labels = toydata.load_split(args.data, "train", image_size=cfg.image_size)
    model = task_head.train_classifier(
        images, labels, class_count=int(labels.max()) + 1, epochs=cfg.classifier_epochs,
        seed=cfg.seed, batch_size=cfg.clf_batch, lr=cfg.clf_lr,
        base_channels=cfg.clf_channels, augment_quality=cfg.clf_augment_range(),
    )
    test_images, test_labels = toydata.load_split(args.data, "test", image_size=cfg.image_size)
    acc = task_head.accuracy(model, test_images, test_labels)
    logging.info("clean test accuracy: %.4f", acc)
    task_head.save_classifier(model, args.out)
    write_manifest(args.out, args, cfg)
    return 0


def cmd_train_proxy(args) -> int:
    cfg = _load_config(args)
    point = _rate_point(cfg, args.rate_point)
    codec = codec_bridge.make_codec(cfg.codec)
    images, _ = toydata.load_split(args.data, "train", image_size=cfg.image_size)
    module = trainer.train_proxy_for_point(cfg, images, point, codec)
    out = Path(args.out)
    if out.is_dir() or not out.suffix:
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"proxy_rp{point.id}.nppc"
    proxy_codec.save_proxy(module, out)
    write_manifest(out, args, cfg)
    return 0


def _load_training_inputs(args, cfg):
    codec = codec_bridge.make_codec(cfg.codec)
    images, labels = toydata.load_split(args.data, "train", image_size=cfg.image_size)
    classifier = task_head.load_classifier(args.classifier_ckpt)
    return codec, images, labels, classifier


def cmd_train_npp(args) -> int:
    cfg = _load_config(args)
    codec, images, labels, classifier = _load_training_inputs(args, cfg)
    points = cfg.rate_points()
    mid = points[len(points) // 2]
    proxy_mid = _load_proxies(args.proxy_dir, [mid])[mid.id]
    state_path = Path(args.out).with_suffix(".state.nppc")
    module = trainer.stage2_train(
        cfg, images, labels, classifier, proxy_mid, codec, state_path=state_path
    )
    npp_mod.save_npp(module, args.out)
    write_manifest(args.out, args, cfg)
    return 0


def cmd_train_npp_adaptive(args) -> int:
    cfg = _load_config(args)
    codec, images, labels, classifier = _load_training_inputs(args, cfg)
    proxies = _load_proxies(args.proxy_dir, cfg.rate_points())
    module = npp_mod.load_npp(args.ckpt)
    state_path = Path(args.out).with_suffix(".state.nppc")
    module = trainer.stage3_train(
        cfg, images, labels, classifier, proxies, codec, module, state_path=state_path
    )
    npp_mod.save_npp(module, args.out)
    write_manifest(args.out, args, cfg)
    return 0


def cmd_train_npp_multi(args) -> int:
    cfg = _load_config(args)
    codec, images, labels, classifier = _load_training_inputs(args, cfg)
    proxies = _load_proxies(args.proxy_dir, cfg.rate_points())
    modules = trainer.train_multi(cfg, images, labels, classifier, proxies, codec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rp_id, module in modules.items():
        npp_mod.save_npp(module, out_dir / f"npp_multi_rp{rp_id}.nppc")
    write_manifest(out_dir / "npp_multi", args, cfg)
    return 0


def cmd_eval_curve(args) -> int:
    cfg = _load_config(args)
    codec = codec_bridge.make_codec(cfg.codec)
    images, labels = toydata.load_split(args.data, "test", image_size=cfg.image_size)
    classifier = task_head.load_classifier(args.classifier_ckpt)
    module = npp_mod.load_npp(args.ckpt) if args.ckpt else None
    tag = Path(args.out).stem
    curve = evaluation.eval_curve(
        codec, cfg.rate_points(), images, labels, classifier, npp_module=module, tag=tag
    )
    data_io.write_curve_csv(curve, args.out)
    evaluation.plot_curves([curve], Path(args.out).with_suffix(".png"))
    write_manifest(args.out, args, cfg)
    return 0


def cmd_bdrate(args) -> int:
    anchor = data_io.read_curve_csv(args.anchor)
    test = data_io.read_curve_csv(args.test)
    print(f"{evaluation.bd_rate(anchor, test):.2f}")
    return 0


def cmd_visualize(args) -> int:
    cfg = _load_config(args)
    module = npp_mod.load_npp(args.ckpt)
    x = torch.from_numpy(data_io.decode_image(args.image))
    point = _rate_point(cfg, args.rate_point)
    with torch.no_grad():
        x_bar = module(x, point)
    res = evaluation.residual_map(x, x_bar)
    evaluation.save_residual_png(res, args.out)
    filtered_path = Path(args.out).with_name(Path(args.out).stem + "_filtered.png")
    data_io.encode_image(x_bar.numpy(), filtered_path)
    write_manifest(args.out, args, cfg)
    return 0


def cmd_plot(args) -> int:
    curves = [data_io.read_curve_csv(p) for p in args.curves]
    evaluation.plot_curves(curves, args.out, metric=args.metric)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nppc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, config=True):
        if data:
            p.add_argument("--data", required=True, help="dataset root (image-folder layout)")
        if config:
            p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--codec", choices=["jpeg", "bpg"], help="real codec")
        p.add_argument("--forward-mode", dest="forward_mode", choices=["real", "proxy"])

    p = sub.add_parser("train-classifier", help="train the frozen downstream classifier")
    common(p, data=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("train-proxy", help="pretrain + finetune the proxy for one rate point")
    common(p, data=True)
    p.add_argument("--rate-point", dest="rate_point", type=int, required=True)
    p.add_argument("--out", required=True, help="output file or directory")
    p.set_defaults(func=cmd_train_proxy)

    p = sub.add_parser("train-npp", help="train the filter at the fixed middle rate point")
    common(p, data=True)
    p.add_argument("--classifier-ckpt", dest="classifier_ckpt", required=True)
    p.add_argument("--proxy-dir", dest="proxy_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_npp)

    p = sub.add_parser("train-npp-adaptive", help="quality-adaptive training over the schedule")
    common(p, data=True)
    p.add_argument("--ckpt", required=True, help="fixed-quality filter checkpoint to start from")
    p.add_argument("--classifier-ckpt", dest="classifier_ckpt", required=True)
    p.add_argument("--proxy-dir", dest="proxy_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_npp_adaptive)

    p = sub.add_parser("train-npp-multi", help="one independent filter per rate point")
    common(p, data=True)
    p.add_argument("--classifier-ckpt", dest="classifier_ckpt", required=True)
    p.add_argument("--proxy-dir", dest="proxy_dir", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train_npp_multi)

    p = sub.add_parser("eval-curve", help="rate-accuracy sweep; writes CSV and a figure")
    common(p, data=True)
    p.add_argument("--ckpt", help="filter checkpoint (omit for the plain-codec baseline)")
    p.add_argument("--classifier-ckpt", dest="classifier_ckpt", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_eval_curve)

    p = sub.add_parser("bdrate", help="Bjontegaard delta-rate between two curve CSVs")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("visualize", help="residual map of the filter on one image")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rate-point", dest="rate_point", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("plot", help="render curve CSVs to a figure")
    p.add_argument("--curves", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metric", choices=["accuracy", "psnr"], default="accuracy")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(asctime)s %(name)s %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failures map to exit 1 with a diagnostic
        print(f"nppc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
