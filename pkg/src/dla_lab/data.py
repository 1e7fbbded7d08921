"""Synthetic line images, dataset persistence and the checkpoint format.

Random numbers
--------------
Record ``i`` of a dataset generated with ``seed`` draws from a Philox4x64-10
counter-based stream keyed by the two 64-bit words ``(seed, i)`` with the
counter starting at zero (numpy's ``Philox`` bit generator). Only raw 64-bit
outputs are consumed; a uniform double is ``(u >> 11) * 2**-53``. Per record
the draw order is: line count, then for each line four endpoint coordinates
(repeated until the segment is long enough) and one stroke intensity, then
the background level, then one noise value per pixel in row-major order.

Dataset layout
--------------
``<dir>/index.json`` lists the records; each image lives in ``<id>.lnimg``:
magic ``LNIMG1``, three little-endian u32 (C, H, W), then C*H*W little-endian
float32 values. Endpoints are stored in the index as decimal text with nine
significant digits (generated endpoints are already rounded to that
precision, so they round-trip exactly).

Checkpoint layout
-----------------
magic ``DLACKPT1``, little-endian u64 header length, UTF-8 JSON header
(format version, preset, config, parameter inventory with byte offsets), then
the contiguous little-endian float32 payload.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import ConfigError, LineSegment

__all__ = [
    "DatasetRecord",
    "DatasetFormatError",
    "BadMagicError",
    "TruncatedRecordError",
    "VersionMismatchError",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointTruncatedError",
    "CheckpointMismatchError",
    "PhiloxStream",
    "gen_synthetic",
    "gen_record",
    "render_lines",
    "augment",
    "save_dataset",
    "load_dataset",
    "save_checkpoint",
    "read_checkpoint",
    "load_checkpoint",
    "stack_images",
]

IMAGE_MAGIC = b"LNIMG1"
DATASET_FORMAT = "dla-lab-dataset"
DATASET_VERSION = 1
CKPT_MAGIC = b"DLACKPT1"
CKPT_VERSION = 1
RNG_NAME = "philox4x64-10"
MIN_LINE_LENGTH = 0.2
NOISE_AMPLITUDE = 0.1


class DatasetFormatError(ValueError):
    pass


class BadMagicError(DatasetFormatError):
    pass


class TruncatedRecordError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass


@dataclass
class DatasetRecord:
    image: np.ndarray  # (C, H, W), values in [0, 1]
    lines: np.ndarray  # (n, 4) normalized endpoints x1, y1, x2, y2
    id: str

    def segments(self) -> list[LineSegment]:
        return [LineSegment.from_array(r) for r in self.lines]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


class PhiloxStream:
    def __init__(self, seed: int, stream: int):
        key = np.array([seed & (2**64 - 1), stream & (2**64 - 1)], dtype=np.uint64)
        self._bits = np.random.Philox(key=key)

    def raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64).reshape(n)

    def uniform(self, n: int = 1) -> np.ndarray:
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def below(self, bound: int) -> int:
        return int(self.uniform(1)[0] * bound)


def _round9(x: float) -> float:
    return float(f"{x:.9g}")


def render_lines(lines: np.ndarray, intensities: Sequence[float], height: int, width: int,
                 background: np.ndarray) -> np.ndarray:
    """Composite anti-aliased 1-pixel strokes over ``background`` (H, W).

    Coverage falls linearly from 1 on the segment to 0 at one pixel distance.
    """
    img = background.copy()
    py, px = np.mgrid[0:height, 0:width] + 0.5
    for (x1, y1, x2, y2), inten in zip(lines, intensities):
        ax, ay, bx, by = x1 * width, y1 * height, x2 * width, y2 * height
        dx, dy = bx - ax, by - ay
        ll = dx * dx + dy * dy
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / ll, 0.0, 1.0) if ll > 0 else np.zeros_like(px)
        dist = np.hypot(px - (ax + t * dx), py - (ay + t * dy))
        cov = np.clip(1.0 - dist, 0.0, 1.0)
        img = img * (1.0 - cov) + inten * cov
    return img


def gen_record(index: int, size: tuple[int, int], max_lines: int, seed: int) -> DatasetRecord:
    h, w = size
    rs = PhiloxStream(seed, index)
    n_lines = 1 + rs.below(max_lines)
    lo_x, hi_x = 0.5 / w, 1.0 - 0.5 / w
    lo_y, hi_y = 0.5 / h, 1.0 - 0.5 / h
    lines, intens = [], []
    for _ in range(n_lines):
        while True:
            u = rs.uniform(4)
            seg = [lo_x + u[0] * (hi_x - lo_x), lo_y + u[1] * (hi_y - lo_y),
                   lo_x + u[2] * (hi_x - lo_x), lo_y + u[3] * (hi_y - lo_y)]
            seg = [_round9(v) for v in seg]
            if np.hypot(seg[0] - seg[2], seg[1] - seg[3]) >= MIN_LINE_LENGTH:
                break
        lines.append(seg)
        intens.append(0.6 + 0.4 * rs.uniform(1)[0])
    bg_level = 0.3 * rs.uniform(1)[0]
    noise = NOISE_AMPLITUDE * (rs.uniform(h * w).reshape(h, w) - 0.5)
    arr = np.array(lines, dtype=np.float64)
    img = render_lines(arr, intens, h, w, np.full((h, w), bg_level))
    img = np.clip(img + noise, 0.0, 1.0)
    return DatasetRecord(image=img[None], lines=arr, id=f"rec-{index:06d}")


def gen_synthetic(n: int, size: tuple[int, int] = (32, 32), max_lines: int = 3, seed: int = 0,
                  start: int = 0, jobs: int = 1) -> list[DatasetRecord]:
    """``n`` records with 1..max_lines segments each; deterministic per (seed, index).

    ``jobs > 1`` generates records in worker processes; the output is identical.
    """
    h, w = size
    if h < 16 or w < 16:
        raise ConfigError(f"image size must be at least 16x16, got {size}")
    if max_lines < 1:
        raise ConfigError(f"max_lines must be >= 1, got {max_lines}")
    indices = range(start, start + n)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(gen_record, indices, [size] * n, [max_lines] * n, [seed] * n, chunksize=16))
    return [gen_record(i, size, max_lines, seed) for i in indices]


def augment(record: DatasetRecord, rng: np.random.Generator) -> DatasetRecord:
    """Random horizontal/vertical flips and brightness/contrast jitter.

    Annotations are flipped with the pixels (pixel centers map to pixel centers).
    """
    img = record.image
    lines = record.lines.copy()
    if rng.random() < 0.5:
        img = img[..., ::-1]
        lines[:, [0, 2]] = 1.0 - lines[:, [0, 2]]
    if rng.random() < 0.5:
        img = img[..., ::-1, :]
        lines[:, [1, 3]] = 1.0 - lines[:, [1, 3]]
    contrast = rng.uniform(0.8, 1.2)
    brightness = rng.uniform(-0.1, 0.1)
    mean = img.mean()
    img = np.clip((img - mean) * contrast + mean + brightness, 0.0, 1.0)
    return DatasetRecord(image=np.ascontiguousarray(img), lines=lines, id=record.id)


def stack_images(records: Sequence[DatasetRecord]) -> np.ndarray:
    return np.stack([r.image for r in records]).astype(np.float64)


# ---------------------------------------------------------------------------
# dataset persistence
# ---------------------------------------------------------------------------


def _write_image(path: Path, image: np.ndarray) -> None:
    c, h, w = image.shape
    payload = np.ascontiguousarray(image, dtype="<f4").tobytes()
    path.write_bytes(IMAGE_MAGIC + struct.pack("<III", c, h, w) + payload)


def _read_image(path: Path, record_id: str) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise TruncatedRecordError(f"record {record_id}: image file {path.name} is missing") from None
    if raw[: len(IMAGE_MAGIC)] != IMAGE_MAGIC:
        raise BadMagicError(f"record {record_id}: bad magic {raw[:len(IMAGE_MAGIC)]!r} in {path.name}")
    hdr = len(IMAGE_MAGIC) + 12
    if len(raw) < hdr:
        raise TruncatedRecordError(f"record {record_id}: header truncated in {path.name}")
    c, h, w = struct.unpack("<III", raw[len(IMAGE_MAGIC) : hdr])
    need = c * h * w * 4
    if len(raw) - hdr < need:
        raise TruncatedRecordError(f"record {record_id}: payload has {len(raw) - hdr} bytes, expected {need}")
    return np.frombuffer(raw, dtype="<f4", count=c * h * w, offset=hdr).reshape(c, h, w).astype(np.float64)


def _fmt_line(row: Iterable[float]) -> str:
    return " ".join(f"{v:.9g}" for v in row)


def save_dataset(path, records: Sequence[DatasetRecord], meta: dict | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        fname = f"{rec.id}.lnimg"
        _write_image(root / fname, rec.image)
        entries.append({"id": rec.id, "image": fname, "lines": [_fmt_line(r) for r in rec.lines]})
    index = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "rng": RNG_NAME,
             "meta": meta or {}, "records": entries}
    (root / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return root


def load_dataset(path) -> list[DatasetRecord]:
    root = Path(path)
    try:
        index = json.loads((root / "index.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"no index.json under {root}") from None
    if index.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"{root}: not a {DATASET_FORMAT} index")
    if index.get("version") != DATASET_VERSION:
        raise VersionMismatchError(f"{root}: index version {index.get('version')}, reader expects {DATASET_VERSION}")
    out = []
    for entry in index["records"]:
        rid = entry["id"]
        image = _read_image(root / entry["image"], rid)
        lines = np.array([[float(v) for v in s.split()] for s in entry["lines"]], dtype=np.float64).reshape(-1, 4)
        out.append(DatasetRecord(image=image, lines=lines, id=rid))
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    manifest: dict
    params: dict[str, np.ndarray] = field(repr=False)


def save_checkpoint(path, named_params: Iterable[tuple[str, np.ndarray]], preset: str, config: dict | None = None,
                    extra: dict | None = None) -> Path:
    inventory, blobs, offset = [], [], 0
    for name, arr in named_params:
        a = np.ascontiguousarray(np.asarray(getattr(arr, "value", arr)), dtype="<f4")
        inventory.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = {"format_version": CKPT_VERSION, "preset": preset, "config": config or {}, "extra": extra or {},
              "dtype": "float32-le", "params": inventory, "blob_bytes": offset}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CKPT_MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs))
    return path


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad checkpoint magic")
    pos = len(CKPT_MAGIC) + 8
    if len(raw) < pos:
        raise CheckpointTruncatedError(f"{path}: header length truncated")
    (hlen,) = struct.unpack("<Q", raw[len(CKPT_MAGIC) : pos])
    if len(raw) < pos + hlen:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: format version {header.get('format_version')}, expected {CKPT_VERSION}")
    blob = raw[pos + hlen :]
    if len(blob) < header["blob_bytes"]:
        raise CheckpointTruncatedError(f"{path}: payload has {len(blob)} bytes, manifest declares {header['blob_bytes']}")
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        params[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"]).reshape(entry["shape"])
    return Checkpoint(header, params)


def load_checkpoint(path, module) -> Checkpoint:
    """Copy checkpoint values into ``module``'s parameters (same names and shapes required)."""
    ckpt = read_checkpoint(path)
    expected = [(n, p.shape) for n, p in module.named_parameters()]
    stored = [(e["name"], tuple(e["shape"])) for e in ckpt.manifest["params"]]
    for i in range(max(len(expected), len(stored))):
        want = expected[i] if i < len(expected) else None
        got = stored[i] if i < len(stored) else None
        if want != got:
            name = (want or got)[0]
            raise CheckpointMismatchError(
                f"parameter inventory differs at #{i} {name!r}: model has {want}, checkpoint has {got}")
    for name, p in module.named_parameters():
        p.value[...] = ckpt.params[name].astype(np.float64)
    return ckpt
