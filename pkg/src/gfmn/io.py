"""Binary file formats: checkpoints, datasets and PNM images.

Checkpoint container (little-endian)::

    b"GFMN" | u32 version | u32 section count | sections...
    section: 4-byte tag | u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | f32 payload

Native dataset (little-endian)::

    b"TNSR" | u32 version | u32 rank | u32 dims[rank] | f32 payload

IDX files (big-endian, as that format requires) are also accepted; unsigned
byte images are rescaled from [0, 255] to [-1, 1] on load.
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import FormatError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GFMN"
CHECKPOINT_VERSION = 1
KNOWN_TAGS = (b"GENP", b"STAT", b"AMAS", b"ENCP")
DATASET_MAGIC = b"TNSR"
DATASET_VERSION = 1
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- checkpoints


@dataclass
class Section:
    tag: str
    name: str
    array: np.ndarray


def encode_checkpoint(sections: Iterable[Section]) -> bytes:
    sections = list(sections)
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(sections))]
    for s in sections:
        tag = s.tag.encode("ascii")
        if len(tag) != 4:
            raise FormatError(f"section tag must be 4 bytes, got {s.tag!r}")
        name = s.name.encode("utf-8")
        arr = np.asarray(s.array, dtype="<f4")
        out.append(tag + struct.pack("<I", len(name)) + name)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def decode_checkpoint(payload: bytes, keep_unknown: bool = False) -> list[Section]:
    if payload[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(payload):
            raise FormatError("truncated checkpoint")
        chunk = payload[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    sections = []
    for _ in range(count):
        tag = take(4)
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        if tag not in KNOWN_TAGS:
            log.warning("skipping unknown checkpoint section %r (%s)", tag, name)
            if not keep_unknown:
                continue
        sections.append(Section(tag.decode("ascii", "replace"), name, arr))
    if pos != len(payload):
        raise FormatError("trailing bytes after last checkpoint section")
    return sections


def write_checkpoint(path, sections: Iterable[Section]) -> None:
    atomic_write(path, encode_checkpoint(sections))


def read_checkpoint(path) -> list[Section]:
    return decode_checkpoint(Path(path).read_bytes())


def by_tag(sections: Iterable[Section], tag: str) -> dict[str, np.ndarray]:
    return {s.name: s.array for s in sections if s.tag == tag}


def scalar(x: float) -> np.ndarray:
    return np.array(x, dtype=np.float32)


# ---------------------------------------------------------------- datasets


def encode_tensor(data: np.ndarray) -> bytes:
    arr = np.asarray(data, dtype="<f4")
    return (DATASET_MAGIC + struct.pack(f"<II{arr.ndim}I", DATASET_VERSION, arr.ndim, *arr.shape)
            + arr.tobytes(order="C"))


def write_tensor(path, data: np.ndarray) -> None:
    arr = np.asarray(data, dtype=np.float32)
    if arr.size and (np.abs(arr).max() > 1.0 or not np.all(np.isfinite(arr))):
        log.warning("dataset values outside [-1, 1] written to %s", path)
    atomic_write(path, encode_tensor(arr))


def _read_tnsr(raw: bytes) -> np.ndarray:
    if len(raw) < 12:
        raise FormatError("truncated TNSR header")
    version, rank = struct.unpack("<II", raw[4:12])
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    header = 12 + 4 * rank
    if len(raw) < header:
        raise FormatError("truncated TNSR header")
    dims = struct.unpack(f"<{rank}I", raw[12:header])
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(raw) != header + 4 * n:
        raise FormatError(f"TNSR payload holds {len(raw) - header} bytes, dims {dims} need {4 * n}")
    return np.frombuffer(raw, dtype="<f4", offset=header).reshape(dims).astype(np.float32)


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError("truncated IDX header")
    dtype_code, rank = raw[2], raw[3]
    if dtype_code not in _IDX_TYPES:
        raise FormatError(f"unknown IDX element type 0x{dtype_code:02x}")
    header = 4 + 4 * rank
    if len(raw) < header:
        raise FormatError("truncated IDX header")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    dt = np.dtype(_IDX_TYPES[dtype_code])
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(raw) != header + dt.itemsize * n:
        raise FormatError(f"IDX payload size does not match dims {dims}")
    arr = np.frombuffer(raw, dtype=dt, offset=header).reshape(dims)
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_LABELS or rank == 1:
        return arr.astype(np.int64)
    images = arr.astype(np.float32)
    if dtype_code == 0x08:
        images = images / 255.0 * 2.0 - 1.0
    if rank == 3:
        images = images[:, None]
    return images.astype(np.float32)


def read_dataset(path) -> np.ndarray:
    """Load a TNSR or IDX file; images come back as ``(N, C, H, W)`` in [-1, 1]."""
    raw = Path(path).read_bytes()
    if raw[:4] == DATASET_MAGIC:
        return _read_tnsr(raw)
    if raw[:2] == b"\x00\x00":
        return _read_idx(raw)
    raise FormatError(f"{path}: unrecognised dataset magic {raw[:4]!r}")


def encode_idx(images: np.ndarray) -> bytes:
    """Unsigned-byte IDX encoding of an ``(N, H, W)`` uint8 array."""
    arr = np.asarray(images, dtype=np.uint8)
    return struct.pack(f">I{arr.ndim}I", 0x0800 | arr.ndim, *arr.shape) + arr.tobytes()


# ---------------------------------------------------------------- images


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Map [-1, 1] linearly onto [0, 255] with rounding."""
    x = np.clip(np.asarray(images, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def encode_pnm(image: np.ndarray) -> bytes:
    """Binary PGM (one channel) or PPM (three channels) from a CHW byte image."""
    c, h, w = image.shape
    if c == 1:
        return f"P5\n{w} {h}\n255\n".encode() + image[0].tobytes()
    if c == 3:
        return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes()
    raise FormatError(f"cannot write a {c}-channel image as PNM")


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM written by :func:`write_images` as a CHW uint8 array."""
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM")
    header_len = len(b" ".join(parts[:4])) + 1
    pixels = np.frombuffer(raw[header_len:], dtype=np.uint8)
    if magic == b"P5":
        return pixels.reshape(1, h, w)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1)


def tile(images: np.ndarray, columns: int | None = None, pad: int = 1) -> np.ndarray:
    n, c, h, w = images.shape
    columns = columns or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / columns))
    grid = np.zeros((c, rows * (h + pad) + pad, columns * (w + pad) + pad), dtype=images.dtype)
    for i, img in enumerate(images):
        r, q = divmod(i, columns)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[:, y:y + h, x:x + w] = img
    return grid


def write_images(batch: np.ndarray, directory, prefix: str = "sample") -> list[Path]:
    """One PGM/PPM per image plus a tiled grid; returns the written paths."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise FormatError(f"cannot create output directory {directory}: {e}") from None
    if not os.access(directory, os.W_OK):
        raise FormatError(f"output directory {directory} is not writable")
    data = to_bytes(batch)
    ext = ".pgm" if data.shape[1] == 1 else ".ppm"
    paths = []
    for i, img in enumerate(data):
        p = directory / f"{prefix}_{i:04d}{ext}"
        atomic_write(p, encode_pnm(img))
        paths.append(p)
    grid = directory / f"{prefix}_grid{ext}"
    atomic_write(grid, encode_pnm(tile(data)))
    paths.append(grid)
    return paths


# ---------------------------------------------------------------- model payloads


def config_sections(tag: str, config) -> list[Section]:
    out = []
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name == "kind":
            value = ("dcgan", "resnet", "linear").index(value)
        elif value is None:
            value = -1
        out.append(Section(tag, f"arch.{f.name}", scalar(float(value))))
    return out


def config_from_sections(cls, entries: dict[str, np.ndarray]):
    kwargs = {}
    for f in fields(cls):
        key = f"arch.{f.name}"
        if key not in entries:
            continue
        v = float(entries[key])
        if f.name == "kind":
            kwargs[f.name] = ("dcgan", "resnet", "linear")[int(v)]
        elif f.type in ("bool",) or isinstance(f.default, bool):
            kwargs[f.name] = bool(v)
        elif v == -1 and f.default is None:
            kwargs[f.name] = None
        else:
            kwargs[f.name] = int(v)
    return cls(**kwargs)


def save_extractor(path, E) -> None:
    """ENCP sections: architecture fields plus every parameter and buffer."""
    from .nets import EncoderConfig, FeatureExtractor, IdentityExtractor

    if isinstance(E, IdentityExtractor):
        sections = [Section("ENCP", "arch.identity", scalar(1.0)),
                    Section("ENCP", "arch.width", scalar(-1 if E.width is None else E.width))]
    elif isinstance(E, FeatureExtractor):
        config = EncoderConfig(**{f.name: getattr(E.config, f.name) for f in fields(E.config)})
        config.taps = E.num_taps
        sections = [Section("ENCP", "arch.identity", scalar(0.0)),
                    Section("ENCP", "arch.frozen", scalar(float(E.frozen)))]
        sections += config_sections("ENCP", config)
    else:
        raise FormatError(f"cannot serialise extractor of type {type(E).__name__}")
    sections += [Section("ENCP", f"param.{k}", v) for k, v in sorted(E.state_dict().items())]
    write_checkpoint(path, sections)


def load_extractor(path):
    from .nets import EncoderConfig, FeatureExtractor, IdentityExtractor

    entries = by_tag(read_checkpoint(path), "ENCP")
    if "arch.identity" not in entries:
        raise FormatError(f"{path}: no extractor sections")
    if float(entries["arch.identity"]):
        width = int(entries["arch.width"])
        return IdentityExtractor(None if width < 0 else width)
    E = FeatureExtractor(config_from_sections(EncoderConfig, entries))
    if float(entries.get("arch.frozen", 0.0)):
        E.freeze()
    E.load_state_dict({k[len("param."):]: v for k, v in entries.items() if k.startswith("param.")})
    return E


def save_stats(path, stats) -> None:
    """STAT sections; the extractor fingerprint travels in an empty section's name."""
    sections = [Section("STAT", f"mean.{j}", np.asarray(m)) for j, m in enumerate(stats.mean)]
    if stats.var is not None:
        sections += [Section("STAT", f"var.{j}", np.asarray(v)) for j, v in enumerate(stats.var)]
    sections.append(Section("STAT", "count", scalar(stats.count)))
    sections.append(Section("STAT", f"fingerprint.{stats.fingerprint}", np.zeros(0, np.float32)))
    write_checkpoint(path, sections)


def load_stats(path):
    from .moments import MomentStats

    entries = by_tag(read_checkpoint(path), "STAT")
    prints = [k.split(".", 1)[1] for k in entries if k.startswith("fingerprint.")]
    if len(prints) != 1 or "mean.0" not in entries:
        raise FormatError(f"{path}: malformed statistics file")
    mean, var, j = [], [], 0
    while f"mean.{j}" in entries:
        mean.append(np.array(entries[f"mean.{j}"], np.float32))
        if f"var.{j}" in entries:
            var.append(np.array(entries[f"var.{j}"], np.float32))
        j += 1
    if var and len(var) != len(mean):
        raise FormatError(f"{path}: variance sections do not cover every layer")
    return MomentStats(mean, var or None, int(entries["count"]), prints[0])
