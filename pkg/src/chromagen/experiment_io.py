"""Checkpoints, append-only metric logs and image grids.

Checkpoint file layout (all integers little-endian)::

    MAGIC (12 bytes) | version u32 | header length u64 | header JSON
    | blob bytes | sha256 of everything before it (32 bytes)

The header JSON holds the bundle's structure with every array replaced by a
``{"__blob__": i}`` reference into a manifest of ``(dtype, shape, offset,
nbytes)`` entries. Arrays are written as raw little-endian bytes, so a
save/load round trip is bitwise exact and independent of the backend.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch

from chromagen.errors import (
    CheckpointVersionError,
    CorruptCheckpointError,
    ManifestMismatchError,
    MetricLogError,
    ShapeError,
)

MAGIC = b"CHROMAGENCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<IQ")
_DIGEST = 32


@dataclass
class CheckpointBundle:
    model: str
    epoch: int
    networks: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    optimizers: Dict[str, Any] = field(default_factory=dict)
    rng: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def state_to_numpy(state: Dict[str, torch.Tensor]) -> Dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in state.items()}


def numpy_to_state(arrays: Dict[str, np.ndarray]) -> Dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.array(v, copy=True)) for k, v in arrays.items()}


def _le(dtype: np.dtype) -> np.dtype:
    return dtype.newbyteorder("<") if dtype.byteorder not in ("|", "<") else dtype


def _encode(obj, blobs: List[np.ndarray]):
    if isinstance(obj, torch.Tensor):
        obj = obj.detach().cpu().numpy()
    if isinstance(obj, np.ndarray):
        # np.ascontiguousarray would promote 0-d arrays to 1-d
        blobs.append(np.array(obj, dtype=_le(obj.dtype), order="C", copy=True))
        return {"__blob__": len(blobs) - 1}
    if isinstance(obj, dict):
        return {"__dict__": [[k, _encode(v, blobs)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_encode(v, blobs) for v in obj]}
    if isinstance(obj, list):
        return [_encode(v, blobs) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return {"__float__": repr(obj)}
    return obj


def _decode(obj, blobs: List[np.ndarray]):
    if isinstance(obj, dict):
        if "__blob__" in obj:
            return blobs[obj["__blob__"]]
        if "__dict__" in obj:
            return {k: _decode(v, blobs) for k, v in obj["__dict__"]}
        if "__tuple__" in obj:
            return tuple(_decode(v, blobs) for v in obj["__tuple__"])
        if "__float__" in obj:
            return float(obj["__float__"])
        return {k: _decode(v, blobs) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v, blobs) for v in obj]
    return obj


def _pack(header: dict, blob_bytes: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + _PREFIX.pack(header.get("version", FORMAT_VERSION), len(head)) + head + blob_bytes
    return body + hashlib.sha256(body).digest()


def atomic_write(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def save_checkpoint(bundle: CheckpointBundle, path) -> Path:
    blobs: List[np.ndarray] = []
    tree = _encode({
        "networks": bundle.networks, "optimizers": bundle.optimizers, "rng": bundle.rng,
    }, blobs)
    manifest, offset = [], 0
    for b in blobs:
        manifest.append({"dtype": b.dtype.str, "shape": list(b.shape), "offset": offset,
                         "nbytes": b.nbytes})
        offset += b.nbytes
    header = {
        "version": bundle.version, "model": bundle.model, "epoch": bundle.epoch,
        "config": _encode(bundle.config, []), "extra": _encode(bundle.extra, []),
        "tree": tree, "manifest": manifest, "blob_bytes": offset,
    }
    return atomic_write(path, _pack(header, b"".join(b.tobytes() for b in blobs)))


def load_checkpoint(path) -> CheckpointBundle:
    raw = Path(path).read_bytes()
    fixed = len(MAGIC) + _PREFIX.size
    if len(raw) < fixed or raw[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic or too short)")
    version, head_len = _PREFIX.unpack_from(raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    if len(raw) < fixed + head_len + _DIGEST:
        raise CorruptCheckpointError(f"{path}: truncated inside the header")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    try:
        header = json.loads(raw[fixed:fixed + head_len])
    except ValueError as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    blob_region = body[fixed + head_len:]
    if len(blob_region) != header.get("blob_bytes"):
        raise CorruptCheckpointError(
            f"{path}: truncated, expected {header.get('blob_bytes')} blob bytes, "
            f"found {len(blob_region)}"
        )
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    blobs, expected_offset = [], 0
    for i, entry in enumerate(header["manifest"]):
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] != expected_offset or count * dtype.itemsize != entry["nbytes"]:
            raise ManifestMismatchError(
                f"{path}: manifest entry {i} ({entry}) disagrees with its blob"
            )
        expected_offset += entry["nbytes"]
        chunk = blob_region[entry["offset"]:entry["offset"] + entry["nbytes"]]
        blobs.append(np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy())
    if expected_offset != len(blob_region):
        raise ManifestMismatchError(f"{path}: manifest covers {expected_offset} of "
                                    f"{len(blob_region)} blob bytes")
    tree = _decode(header["tree"], blobs)
    return CheckpointBundle(
        model=header["model"], epoch=header["epoch"], networks=tree["networks"],
        optimizers=tree["optimizers"], rng=tree["rng"],
        config=_decode(header["config"], []), extra=_decode(header["extra"], []),
        version=version,
    )


@dataclass
class MetricRecord:
    epoch: int
    losses: Dict[str, float] = field(default_factory=dict)
    is_mean: Optional[float] = None
    is_std: Optional[float] = None
    fid: Optional[float] = None
    wall_seconds: float = 0.0

    def validate(self) -> "MetricRecord":
        values = list(self.losses.values()) + [self.wall_seconds] + [
            v for v in (self.is_mean, self.is_std, self.fid) if v is not None
        ]
        for v in values:
            if not math.isfinite(v):
                raise MetricLogError(f"epoch {self.epoch}: non-finite value in record")
        return self

    def columns(self) -> Dict[str, float]:
        out = dict(self.losses)
        for name in ("is_mean", "is_std", "fid"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        out["wall_seconds"] = self.wall_seconds
        return out


@dataclass
class MetricLog:
    records: List[MetricRecord]
    truncated: bool = False


def read_metrics(path) -> MetricLog:
    """Parse a metric log; a damaged final line is skipped and flagged."""
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    tail = lines.pop()  # empty when the file ends with a newline
    records, truncated = [], bool(tail.strip())
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(MetricRecord(**json.loads(line)))
        except (ValueError, TypeError):
            if i == len(lines) - 1 and not tail:
                truncated = True
                continue
            raise MetricLogError(f"{path}: corrupt record on line {i + 1}")
    return MetricLog(records, truncated)


def append_metrics(log_path, record: MetricRecord) -> None:
    record.validate()
    path = Path(log_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        existing = read_metrics(path)
        if existing.records and record.epoch <= existing.records[-1].epoch:
            raise MetricLogError(
                f"epoch {record.epoch} does not follow logged epoch {existing.records[-1].epoch}"
            )
        if existing.truncated:
            # drop the partial tail left by a crash before appending
            raw = path.read_bytes()
            complete = raw if not raw.endswith(b"\n") else raw[:-1]
            keep = complete.rfind(b"\n") + 1
            with open(path, "r+b") as fh:
                fh.truncate(keep)
    line = json.dumps(asdict(record), sort_keys=True) + "\n"
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(line)
        fh.flush()
        os.fsync(fh.fileno())


SEPARATOR = 2
SEPARATOR_VALUE = 255


def _to_uint8(images) -> np.ndarray:
    if isinstance(images, torch.Tensor):
        images = images.detach().cpu().numpy()
    images = np.asarray(images, dtype=np.float64)
    return np.clip(np.rint((images + 1.0) * 127.5), 0, 255).astype(np.uint8)


def emit_image_grid(rows, path, captions=None) -> Path:
    """Tile rows of ``(n, 3, H, W)`` images in [-1, 1] into a PNG.

    Tiles are separated (and framed) by 2-pixel white borders; rows shorter
    than the longest are padded with border color. Captions are stored as
    PNG text chunks so the pixel layout stays exact.
    """
    from PIL import Image, PngImagePlugin

    rows = [_to_uint8(r) for r in rows]
    if not rows or any(len(r) == 0 for r in rows):
        raise ShapeError("image grid needs at least one image per row")
    shapes = {r.shape[1:] for r in rows}
    if len(shapes) != 1:
        raise ShapeError(f"mixed image shapes in grid: {sorted(shapes)}")
    c, h, w = shapes.pop()
    if c != 3:
        raise ShapeError(f"grid images must have 3 channels, got {c}")
    n_cols = max(len(r) for r in rows)
    height = len(rows) * h + (len(rows) + 1) * SEPARATOR
    width = n_cols * w + (n_cols + 1) * SEPARATOR
    canvas = np.full((height, width, 3), SEPARATOR_VALUE, dtype=np.uint8)
    for i, row in enumerate(rows):
        top = SEPARATOR + i * (h + SEPARATOR)
        for j, img in enumerate(row):
            left = SEPARATOR + j * (w + SEPARATOR)
            canvas[top:top + h, left:left + w] = img.transpose(1, 2, 0)
    info = PngImagePlugin.PngInfo()
    for i, caption in enumerate(captions or []):
        info.add_text(f"row{i}", str(caption))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    Image.fromarray(canvas).save(tmp, format="PNG", pnginfo=info)
    os.replace(tmp, path)
    return path


def make_run_id(config: Dict[str, Any]) -> str:
    digest = hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()
    return time.strftime("%Y%m%d-%H%M%S") + "-" + digest[:8]


def checkpoint_path(run_dir, epoch: int) -> Path:
    return Path(run_dir) / f"ckpt-{epoch}"


def latest_checkpoint(run_dir) -> Optional[Path]:
    found = []
    for p in Path(run_dir).glob("ckpt-*"):
        suffix = p.name[len("ckpt-"):]
        if suffix.isdigit():
            found.append((int(suffix), p))
    return max(found)[1] if found else None
