"""Image and mask files, synthetic datasets, manifests and the CCUB cube cache."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .checkpoint import FormatError
from .codec import ConnectivityCube
from .grid import Pattern, as_mask, remove_isolated
from .tensor import resize_array

LUMA_THRESHOLD = 127


class DataError(ValueError):
    """Unreadable or inconsistent input data."""


# rasters ------------------------------------------------------------------------

_EIGHT_BIT_MODES = {"1", "L", "LA", "P", "RGB", "RGBA"}


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (OSError, SyntaxError) as e:
        raise DataError(f"cannot read image {path}: {e}") from None
    if img.mode not in _EIGHT_BIT_MODES:
        raise DataError(f"{path}: unsupported pixel format {img.mode!r} (need 8-bit grey or RGB)")
    return img


def load_mask(path) -> np.ndarray:
    """Boolean mask: a pixel is salient iff its luma exceeds 127."""
    return np.asarray(_open(path).convert("L")) > LUMA_THRESHOLD


def save_mask(path, mask) -> None:
    Image.fromarray(as_mask(mask).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_saliency(path) -> np.ndarray:
    """Grey-level map in [0, 1] (luma / 255)."""
    return np.asarray(_open(path).convert("L"), dtype=np.float64) / 255.0


def save_saliency(path, saliency) -> None:
    a = np.clip(np.asarray(saliency, dtype=np.float64), 0, 1)
    Image.fromarray(np.round(a * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """RGB image as float32 ``(3, H, W)`` in [0, 1]."""
    rgb = np.asarray(_open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def save_image(path, image) -> None:
    a = np.clip(np.asarray(image, dtype=np.float64), 0, 1)
    if a.ndim == 3 and a.shape[0] == 3:
        a = a.transpose(1, 2, 0)
    Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path, format="PNG")


# manifests ----------------------------------------------------------------------

@dataclass(frozen=True)
class Record:
    image: Path
    mask: Path
    instances: Path | None = None

    def instance_masks(self) -> list[np.ndarray]:
        if self.instances is None:
            return []
        return [load_mask(p) for p in sorted(self.instances.glob("*.png"))]


def read_manifest(path, validate: bool = True) -> list[Record]:
    """Parse ``image,mask[,instances_dir]`` lines; relative paths resolve against the manifest.

    With ``validate`` every file is decoded and image/mask sizes are compared;
    errors name the offending line.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from None
    base = path.parent
    records = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        row = [c.strip() for c in row]
        if len(row) not in (2, 3) or not row[0] or not row[1]:
            raise DataError(f"{path}:{lineno}: expected image,mask[,instances_dir], got {row}")
        inst = base / row[2] if len(row) == 3 and row[2] else None
        rec = Record(base / row[0], base / row[1], inst)
        if validate:
            _validate(rec, f"{path}:{lineno}")
        records.append(rec)
    if not records:
        raise DataError(f"{path}: manifest lists no records")
    return records


def _validate(rec: Record, where: str) -> None:
    for p in (rec.image, rec.mask):
        if not p.is_file():
            raise DataError(f"{where}: missing file {p}")
    try:
        image, mask = _open(rec.image), _open(rec.mask)
    except DataError as e:
        raise DataError(f"{where}: {e}") from None
    if image.size != mask.size:
        raise DataError(f"{where}: image {rec.image.name} is {image.size[0]}x{image.size[1]} "
                        f"but mask {rec.mask.name} is {mask.size[0]}x{mask.size[1]}")
    if rec.instances is not None and not rec.instances.is_dir():
        raise DataError(f"{where}: missing instance directory {rec.instances}")


def write_manifest(path, records: Iterable[Record]) -> None:
    path = Path(path)
    base = path.parent
    rows = []
    for r in records:
        row = [r.image.relative_to(base).as_posix(), r.mask.relative_to(base).as_posix()]
        if r.instances is not None:
            row.append(r.instances.relative_to(base).as_posix())
        rows.append(",".join(row))
    path.write_text("# image,mask,instances_dir\n" + "\n".join(rows) + "\n", encoding="utf-8")


def load_dataset(records: Sequence[Record]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    images = [load_image(r.image) for r in records]
    masks = [load_mask(r.mask) for r in records]
    return images, masks


# synthetic data -----------------------------------------------------------------

SHAPE_KINDS = ("rectangle", "ellipse", "ring")


@dataclass
class SyntheticSpec:
    count: int = 250
    size: int = 64
    shapes_per_image: tuple[int, int] = (1, 3)
    kinds: tuple[str, ...] = SHAPE_KINDS
    contrast: tuple[float, float] = (0.4, 0.65)
    background: tuple[float, float] = (0.0, 0.35)
    noise: float = 0.05
    salient_fraction: tuple[float, float] = (0.02, 0.6)
    seed: int = 0

    def __post_init__(self):
        self.shapes_per_image = tuple(int(v) for v in self.shapes_per_image)
        self.kinds = tuple(self.kinds)
        self.contrast = tuple(float(v) for v in self.contrast)
        self.background = tuple(float(v) for v in self.background)
        self.salient_fraction = tuple(float(v) for v in self.salient_fraction)
        if self.count < 1 or self.size < 8:
            raise ValueError("need count >= 1 and size >= 8")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ValueError("shapes_per_image must be an increasing pair starting at >= 1")
        bad = set(self.kinds) - set(SHAPE_KINDS)
        if not self.kinds or bad:
            raise ValueError(f"shape kinds must be drawn from {SHAPE_KINDS}, got {self.kinds}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        f_lo, f_hi = self.salient_fraction
        if not 0 <= f_lo < f_hi <= 1:
            raise ValueError("salient_fraction must satisfy 0 <= lo < hi <= 1")

    @classmethod
    def from_dict(cls, d) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _shape(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    ry, rx = rng.uniform(0.08, 0.3, 2) * size
    if kind == "rectangle":
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    if kind == "ellipse":
        return d <= 1
    inner = rng.uniform(0.35, 0.6)
    return (d <= 1) & (d >= inner ** 2)


def _texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth low-frequency field in [-1, 1]."""
    coarse = rng.uniform(-1, 1, (1, 4, 4))
    return resize_array(coarse, (size, size))[0]


def _clean(mask: np.ndarray) -> np.ndarray:
    # no lone salient pixels, and no one-pixel holes where shapes overlap
    return remove_isolated(~remove_isolated(~mask))


def synth_sample(spec: SyntheticSpec, index: int):
    """Draw image ``index``: returns ``(image (3,H,W) float, mask, instance masks)``."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.size
    f_lo, f_hi = spec.salient_fraction
    for _ in range(1000):
        count = int(rng.integers(spec.shapes_per_image[0], spec.shapes_per_image[1] + 1))
        shapes = [_shape(spec.kinds[int(rng.integers(len(spec.kinds)))], n, rng) for _ in range(count)]
        mask = _clean(np.logical_or.reduce(shapes))
        if f_lo <= mask.mean() <= f_hi:
            break
    else:
        raise DataError(f"could not draw a mask with salient fraction in {spec.salient_fraction}")
    # later shapes sit on top of earlier ones
    instances, covered = [], np.zeros_like(mask)
    for s in reversed(shapes):
        inst = s & mask & ~covered
        covered |= inst
        if inst.any():
            instances.append(inst)
    instances.reverse()
    # filled holes belong to no shape: give each to the topmost instance touching it
    for i, j in np.argwhere(mask & ~covered):
        window = (slice(max(i - 1, 0), i + 2), slice(max(j - 1, 0), j + 2))
        owner = next((inst for inst in reversed(instances) if inst[window].any()), instances[-1])
        owner[i, j] = True

    bg = rng.uniform(*spec.background)
    tint = rng.uniform(-0.05, 0.05, 3)
    image = np.empty((3, n, n))
    texture = _texture(n, rng) * 0.05
    for ch in range(3):
        image[ch] = bg + tint[ch] + texture
    for inst in instances:
        level = bg + rng.uniform(*spec.contrast)
        colour = level + rng.uniform(-0.05, 0.05, 3)
        for ch in range(3):
            image[ch][inst] = colour[ch]
    image += rng.normal(0, spec.noise, image.shape)
    return np.clip(image, 0, 1).astype(np.float32), mask, instances


def generate_synthetic(spec: SyntheticSpec, out_dir) -> list[Record]:
    """Write images, masks, per-instance masks and ``manifest.csv`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        for sub in ("images", "masks", "instances"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        records = []
        width = max(4, len(str(spec.count - 1)))
        for i in range(spec.count):
            image, mask, instances = synth_sample(spec, i)
            name = f"{i:0{width}d}"
            rec = Record(out / "images" / f"{name}.png", out / "masks" / f"{name}.png",
                         out / "instances" / name)
            save_image(rec.image, image)
            save_mask(rec.mask, mask)
            rec.instances.mkdir(exist_ok=True)
            for k, inst in enumerate(instances):
                save_mask(rec.instances / f"{k}.png", inst)
            records.append(rec)
        write_manifest(out / "manifest.csv", records)
    except OSError as e:
        raise DataError(f"cannot write synthetic dataset to {out}: {e}") from None
    return records


# CCUB cube cache -----------------------------------------------------------------

CCUB_MAGIC = b"CCUB"
CCUB_VERSION = 1
_HEADER = struct.Struct("<4sBBIIB")


def dumps_cube(cube: ConnectivityCube, binary: bool | None = None) -> bytes:
    """Serialise a cube; binary cubes are bit-packed row by row, others stored as float32."""
    if binary is None:
        binary = cube.is_binary
    elif binary and not cube.is_binary:
        raise ValueError("cube has non-binary entries")
    h, w, c = cube.shape
    head = _HEADER.pack(CCUB_MAGIC, CCUB_VERSION, cube.pattern.value, h, w, int(binary))
    if binary:
        bits = (cube.values != 0).reshape(h, w * c)
        payload = np.packbits(bits, axis=1).tobytes()
    else:
        payload = np.ascontiguousarray(cube.values, dtype="<f4").tobytes()
    return head + payload


def ccub_payload_size(height: int, width: int, channels: int, binary: bool) -> int:
    if binary:
        return height * math.ceil(width * channels / 8)
    return 4 * height * width * channels


def loads_cube(buf: bytes) -> ConnectivityCube:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated cube header ({len(buf)} of {_HEADER.size} bytes)")
    magic, version, pid, h, w, binary = _HEADER.unpack_from(buf)
    if magic != CCUB_MAGIC:
        raise FormatError("bad magic: not a CCUB cube file")
    if version != CCUB_VERSION:
        raise FormatError(f"unsupported CCUB version {version}")
    try:
        pattern = Pattern(pid)
    except ValueError:
        raise FormatError(f"unknown pattern id {pid}") from None
    if binary not in (0, 1):
        raise FormatError(f"binary flag must be 0 or 1, got {binary}")
    c = pattern.channels
    need = ccub_payload_size(h, w, c, bool(binary))
    payload = buf[_HEADER.size:]
    if len(payload) < need:
        raise FormatError(f"truncated cube payload ({len(payload)} of {need} bytes)")
    if len(payload) > need:
        raise FormatError(f"{len(payload) - need} trailing bytes after cube payload")
    if binary:
        rows = np.frombuffer(payload, np.uint8).reshape(h, -1) if h else np.zeros((0, 0), np.uint8)
        bits = np.unpackbits(rows, axis=1, count=w * c) if h else np.zeros((0, w * c), np.uint8)
        values = bits.reshape(h, w, c)
    else:
        values = np.frombuffer(payload, "<f4").astype(np.float32).reshape(h, w, c)
    return ConnectivityCube(values, pattern)


def write_cube(path, cube: ConnectivityCube, binary: bool | None = None) -> None:
    Path(path).write_bytes(dumps_cube(cube, binary))


def read_cube(path) -> ConnectivityCube:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read cube {path}: {e}") from None
    return loads_cube(buf)
