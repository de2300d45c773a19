"""Dataset ingestion, image codecs for the pipeline, checkpoint and curve persistence."""

import io
import struct
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

CHECKPOINT_MAGIC = b"NPPC"
CHECKPOINT_VERSION = 1
CURVE_CSV_HEADER = "rate_point,codec_param,bpp,accuracy,psnr"

IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".jpg", ".jpeg"}


class CheckpointError(RuntimeError):
    """Raised for incompatible or corrupt checkpoint files."""


class DatasetError(RuntimeError):
    """Raised for unusable dataset layouts."""


def unit_from_u8(u8: np.ndarray) -> np.ndarray:
    """Map 8-bit samples to unit-range float32 (v/255)."""
    return u8.astype(np.float32) / np.float32(255.0)


def u8_from_unit(x: np.ndarray) -> np.ndarray:
    """Map unit-range values to 8-bit with round-half-to-even."""
    return np.clip(np.rint(np.asarray(x, dtype=np.float32) * 255.0), 0, 255).astype(np.uint8)


def validate_batch(x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ValueError(f"image batch must be N x C x H x W, got shape {x.shape}")
    n, c, h, w = x.shape
    if c not in (1, 3):
        raise ValueError(f"image batch must have 1 or 3 channels, got {c}")
    if n < 1 or h < 8 or w < 8:
        raise ValueError(f"image batch too small: shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image batch contains non-finite values")


@dataclass
class LabeledDataset:
    items: List[Tuple[Path, int]]
    class_count: int
    split: str
    class_names: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)


def decode_image(path) -> np.ndarray:
    """Decode one PNG/PPM/JPEG file to a 1 x C x H x W unit-range batch (RGB order)."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB") if im.mode not in ("L", "RGB") else im.copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"cannot decode image {path}: {exc}") from exc
    arr = np.asarray(im, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    batch = unit_from_u8(arr).transpose(2, 0, 1)[None]
    return batch


def encode_image(batch: np.ndarray, path) -> None:
    """Write a single-image batch as PNG or PPM (by suffix), 8-bit."""
    validate_batch(batch)
    if batch.shape[0] != 1:
        raise ValueError("encode_image expects a single-image batch")
    u8 = u8_from_unit(batch[0]).transpose(1, 2, 0)
    if u8.shape[2] == 1:
        u8 = u8[:, :, 0]
    Image.fromarray(u8).save(path)


def load_image_folder(root_path, split: str) -> LabeledDataset:
    """Load an image-folder dataset: root/split/<class>/<image files>.

    Class index is the lexicographic rank of the class directory name;
    items are ordered lexicographically by path.
    """
    split_dir = Path(root_path) / split
    if not split_dir.is_dir():
        raise DatasetError(f"missing dataset directory: {split_dir}")
    class_dirs = sorted(d for d in split_dir.iterdir() if d.is_dir())
    if len(class_dirs) < 2:
        raise DatasetError(f"need at least 2 class directories under {split_dir}")
    items: List[Tuple[Path, int]] = []
    for idx, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        kept = []
        for p in files:
            try:
                with Image.open(p) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError):
                warnings.warn(f"skipping undecodable file {p}")
                continue
            kept.append(p)
        if not kept:
            raise DatasetError(f"empty class directory: {cdir}")
        items.extend((p, idx) for p in kept)
    return LabeledDataset(
        items=items,
        class_count=len(class_dirs),
        split=split,
        class_names=[d.name for d in class_dirs],
    )


def _write_str(buf, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_exact(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError("corrupt checkpoint: truncated file")
    return raw


def _read_str(buf) -> str:
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    return _read_exact(buf, n).decode("utf-8")


def save_checkpoint(params: "OrderedDict[str, np.ndarray]", kind: str, meta: str, path) -> None:
    """Serialize named float32 parameter arrays to the NPPC binary container."""
    names = list(params.keys())
    if len(set(names)) != len(names):
        raise ValueError("parameter names must be unique")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_str(buf, kind)
    _write_str(buf, meta)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(params[name], dtype=np.float32, order="C")
        _write_str(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.astype("<f4", copy=False).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Tuple["OrderedDict[str, np.ndarray]", str, str]:
    """Load an NPPC checkpoint; returns (params, kind, meta)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"incompatible checkpoint: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"incompatible checkpoint: version {version}")
        kind = _read_str(f)
        meta = _read_str(f)
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            name = _read_str(f)
            (ndim,) = struct.unpack("<I", _read_exact(f, 4))
            shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim))
            nbytes = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
            if shape == ():
                nbytes = 4
            arr = np.frombuffer(_read_exact(f, nbytes), dtype="<f4").reshape(shape).copy()
            if name in params:
                raise CheckpointError(f"corrupt checkpoint: duplicate parameter {name}")
            params[name] = arr
        if f.read(1):
            raise CheckpointError("corrupt checkpoint: trailing bytes")
    return params, kind, meta


@dataclass
class CurvePoint:
    rate_point: int
    codec_param: float
    bpp: float
    accuracy: float
    psnr: float


@dataclass
class RateAccuracyCurve:
    points: List[CurvePoint]
    tag: str = ""

    def __len__(self) -> int:
        return len(self.points)


def write_curve_csv(curve: RateAccuracyCurve, path) -> None:
    if not curve.points:
        raise ValueError("cannot write an empty curve")
    lines = [CURVE_CSV_HEADER]
    for p in curve.points:
        lines.append(
            f"{p.rate_point},{p.codec_param:.12g},{p.bpp:.12g},{p.accuracy:.12g},{p.psnr:.12g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_curve_csv(path) -> RateAccuracyCurve:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != CURVE_CSV_HEADER:
        raise ValueError(f"malformed curve CSV header in {path}")
    points = []
    for ln in lines[1:]:
        fields = ln.split(",")
        if len(fields) != 5:
            raise ValueError(f"malformed curve CSV row: {ln!r}")
        points.append(
            CurvePoint(
                rate_point=int(fields[0]),
                codec_param=float(fields[1]),
                bpp=float(fields[2]),
                accuracy=float(fields[3]),
                psnr=float(fields[4]),
            )
        )
    return RateAccuracyCurve(points=points, tag=Path(path).stem)
