"""Dataset ingestion: image/disparity codecs, manifests, filtering, batching."""
from __future__ import annotations

import io
import math
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from . import imageops
from .errors import (
    ConfigError,
    CorruptDataError,
    DimensionError,
    FormatError,
    ManifestError,
    MissingFileError,
    UnsupportedFormatError,
)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
RAW_DISPARITY_MAGIC = b"DSP1"
MAX_PIXELS = 1 << 28

SYNTHETIC = "synthetic"
REAL = "real"


@dataclass
class StereoTuple:
    """Synthetic left/right views with the disparity of the left-to-right warp."""

    left: torch.Tensor
    right: torch.Tensor
    disparity: torch.Tensor
    id: str = ""

    def __post_init__(self):
        dims = {tuple(self.left.shape[-2:]), tuple(self.right.shape[-2:]), tuple(self.disparity.shape[-2:])}
        if len(dims) != 1:
            raise DimensionError(f"tuple {self.id!r}: views and disparity differ in size {sorted(dims)}")


# ---------------------------------------------------------------- image codecs


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        return path.read_bytes()
    except FileNotFoundError:
        raise MissingFileError(f"no such file: {path}") from None
    except IsADirectoryError:
        raise MissingFileError(f"expected a file, got a directory: {path}") from None


_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pnm(raw: bytes, path) -> np.ndarray:
    magic = raw[:2]
    channels = {b"P6": 3, b"P5": 1}[magic]
    pos = 2
    values = []
    for _ in range(3):
        m = _PNM_TOKEN.match(raw, pos)
        if m is None:
            raise CorruptDataError(f"{path}: truncated PNM header")
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise CorruptDataError(f"{path}: malformed PNM header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = values
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise CorruptDataError(f"{path}: missing separator after PNM header")
    pos += 1
    if width <= 0 or height <= 0 or width * height > MAX_PIXELS:
        raise FormatError(f"{path}: implausible PNM dimensions {width}x{height}")
    if maxval > 255:
        raise UnsupportedFormatError(f"{path}: {maxval=} implies more than 8 bits per sample")
    if maxval <= 0:
        raise CorruptDataError(f"{path}: invalid maxval {maxval}")
    need = width * height * channels
    payload = raw[pos : pos + need]
    if len(payload) < need:
        raise CorruptDataError(f"{path}: expected {need} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    if maxval != 255:
        arr = np.floor(arr.astype(np.float64) * 255.0 / maxval + 0.5).astype(np.uint8)
    return arr


def _parse_png(raw: bytes, path) -> np.ndarray:
    if len(raw) < 33 or raw[12:16] != b"IHDR":
        raise CorruptDataError(f"{path}: truncated PNG header")
    bit_depth, color_type = raw[24], raw[25]
    if bit_depth > 8 or (bit_depth < 8 and color_type != 3):
        raise UnsupportedFormatError(f"{path}: PNG bit depth {bit_depth} is not supported (8-bit only)")
    try:
        with Image.open(io.BytesIO(raw)) as im:
            im.load()
            if im.mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif im.mode == "LA":
                arr = np.asarray(im.convert("L"))
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptDataError(f"{path}: {exc}") from None
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def read_raster(path) -> np.ndarray:
    """Decode an 8-bit PNG or PPM/PGM into an ``(H, W, C)`` uint8 array."""
    raw = _read_bytes(path)
    if raw.startswith(PNG_SIGNATURE):
        return _parse_png(raw, path)
    if raw[:2] in (b"P5", b"P6"):
        return _parse_pnm(raw, path)
    if len(raw) < 2:
        raise CorruptDataError(f"{path}: file too short to hold an image")
    raise UnsupportedFormatError(f"{path}: not a PNG or binary PPM/PGM file")


def load_image(path) -> torch.Tensor:
    """Read an image as a signed 3-channel tensor; grayscale is replicated."""
    arr = read_raster(path)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return imageops.normalize(arr)


def write_raster(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        magic = b"P6" if arr.ndim == 3 else b"P5"
        header = b"%s\n%d %d\n255\n" % (magic, arr.shape[1], arr.shape[0])
        path.write_bytes(header + np.ascontiguousarray(arr).tobytes())
    else:
        Image.fromarray(arr).save(path, format="PNG")


def save_image(path, img: torch.Tensor) -> None:
    write_raster(path, imageops.denormalize(img))


def load_labels(path) -> np.ndarray:
    """Class-id raster ``(H, W)``; the first channel of the file is used."""
    return read_raster(path)[:, :, 0].astype(np.int64)


# ------------------------------------------------------------ disparity codecs


def _undefined_to_nan(arr: np.ndarray) -> np.ndarray:
    arr = arr.astype(np.float32, copy=True)
    arr[~np.isfinite(arr) | (arr < 0)] = np.nan
    return arr


def _readline(buf: io.BytesIO, path) -> str:
    line = buf.readline()
    if not line.endswith(b"\n"):
        raise CorruptDataError(f"{path}: truncated PFM header")
    try:
        return line.decode("ascii").strip()
    except UnicodeDecodeError:
        raise CorruptDataError(f"{path}: non-ascii PFM header") from None


def read_pfm(path) -> np.ndarray:
    """Read a single-channel PFM. Rows come back top-down; values untouched."""
    return _decode_pfm(_read_bytes(path), path)


def _decode_pfm(raw: bytes, path) -> np.ndarray:
    buf = io.BytesIO(raw)
    magic = _readline(buf, path)
    if magic == "PF":
        raise UnsupportedFormatError(f"{path}: colour PFM cannot hold a disparity map")
    if magic != "Pf":
        raise FormatError(f"{path}: bad PFM magic {magic!r}")
    dims = _readline(buf, path).split()
    while not dims:
        dims = _readline(buf, path).split()
    if len(dims) == 1:
        dims += _readline(buf, path).split()
    try:
        width, height = int(dims[0]), int(dims[1])
        scale = float(_readline(buf, path))
    except (ValueError, IndexError):
        raise CorruptDataError(f"{path}: malformed PFM header") from None
    if width <= 0 or height <= 0 or width * height > MAX_PIXELS:
        raise FormatError(f"{path}: implausible PFM dimensions {width}x{height}")
    if scale == 0 or not math.isfinite(scale):
        raise CorruptDataError(f"{path}: invalid PFM scale {scale}")
    endian = "<" if scale < 0 else ">"
    payload = buf.read()
    need = width * height * 4
    if len(payload) < need:
        raise CorruptDataError(f"{path}: expected {need} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload[:need], dtype=endian + "f4").reshape(height, width)
    return np.flipud(data).astype(np.float32)


def write_pfm(path, arr, little_endian: bool = True) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise DimensionError(f"PFM disparity must be 2-D, got shape {arr.shape}")
    dtype = "<f4" if little_endian else ">f4"
    scale = -1.0 if little_endian else 1.0
    header = b"Pf\n%d %d\n%s\n" % (arr.shape[1], arr.shape[0], repr(scale).encode())
    Path(path).write_bytes(header + np.flipud(arr).astype(dtype).tobytes())


def read_raw_disparity(path) -> np.ndarray:
    return _decode_raw_disparity(_read_bytes(path), path)


def _decode_raw_disparity(raw: bytes, path) -> np.ndarray:
    if len(raw) < 12:
        raise CorruptDataError(f"{path}: truncated raw disparity header")
    if raw[:4] != RAW_DISPARITY_MAGIC:
        raise FormatError(f"{path}: bad raw disparity magic {raw[:4]!r}")
    rows, cols = struct.unpack("<II", raw[4:12])
    if rows == 0 or cols == 0 or rows * cols > MAX_PIXELS:
        raise FormatError(f"{path}: implausible raw disparity dimensions {rows}x{cols}")
    need = rows * cols * 4
    payload = raw[12:]
    if len(payload) != need:
        raise CorruptDataError(f"{path}: expected {need} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_raw_disparity(path, arr) -> None:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise DimensionError(f"raw disparity must be 2-D, got shape {arr.shape}")
    header = RAW_DISPARITY_MAGIC + struct.pack("<II", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


def load_disparity(path) -> torch.Tensor:
    """Disparity map ``(1, H, W)``; negative and non-finite entries become NaN."""
    raw = _read_bytes(path)
    if raw[:4] == RAW_DISPARITY_MAGIC:
        arr = _decode_raw_disparity(raw, path)
    elif raw[:2] in (b"Pf", b"PF"):
        arr = _decode_pfm(raw, path)
    else:
        raise FormatError(f"{path}: neither PFM nor raw disparity (magic {raw[:4]!r})")
    return torch.from_numpy(_undefined_to_nan(arr)).unsqueeze(0)


def save_disparity(path, disp) -> None:
    """Write by extension: ``.pfm`` as little-endian PFM, anything else as raw."""
    arr = disp.detach().cpu().numpy() if isinstance(disp, torch.Tensor) else np.asarray(disp)
    arr = arr.reshape(arr.shape[-2:])
    if Path(path).suffix.lower() == ".pfm":
        write_pfm(path, arr)
    else:
        write_raw_disparity(path, arr)


# ----------------------------------------------------------------- filtering


def building_filter(labels, building_class_ids, threshold: float = 0.15) -> bool:
    """True iff at least ``threshold`` of the pixels carry a building class."""
    lab = labels.detach().cpu().numpy() if isinstance(labels, torch.Tensor) else np.asarray(labels)
    if lab.size == 0:
        return False
    hits = np.isin(lab, np.asarray(list(building_class_ids)))
    return int(hits.sum()) >= threshold * lab.size


def paired_random_crop(item: StereoTuple, rows: int, cols: int, rng: np.random.Generator) -> StereoTuple:
    h, w = item.left.shape[-2:]
    if rows > h or cols > w or rows < 1 or cols < 1:
        raise DimensionError(f"crop {rows}x{cols} does not fit image {h}x{w}")
    top = int(rng.integers(0, h - rows + 1))
    lft = int(rng.integers(0, w - cols + 1))
    window = (..., slice(top, top + rows), slice(lft, lft + cols))
    return StereoTuple(item.left[window], item.right[window], item.disparity[window], item.id)


def random_crop(img: torch.Tensor, rows: int, cols: int, rng: np.random.Generator) -> torch.Tensor:
    h, w = img.shape[-2:]
    if rows > h or cols > w or rows < 1 or cols < 1:
        raise DimensionError(f"crop {rows}x{cols} does not fit image {h}x{w}")
    top = int(rng.integers(0, h - rows + 1))
    lft = int(rng.integers(0, w - cols + 1))
    return img[..., top : top + rows, lft : lft + cols]


# ------------------------------------------------------------------ manifests


@dataclass
class ManifestEntry:
    id: str
    images: list[Path]
    disparity: Path | None = None
    labels: Path | None = None


@dataclass
class DatasetManifest:
    """Entries of one domain plus the geometry they are brought to on load.

    File format (tab separated, ``#`` starts a comment, paths relative to the
    manifest's directory)::

        @domain	synthetic
        @resize	256	512
        @disparity_sign	+1
        <id>	<left>	<right>	<disparity>[	<labels>]

    Real-domain rows are ``<id>	<image>[	<labels>]``.
    """

    domain: str
    entries: list[ManifestEntry]
    resize_to: tuple[int, int] | None = None
    disparity_sign: int = 1

    def __post_init__(self):
        if self.domain not in (SYNTHETIC, REAL):
            raise ManifestError(f"unknown domain {self.domain!r}")
        for e in self.entries:
            if self.domain == SYNTHETIC and (e.disparity is None or len(e.images) != 2):
                raise ManifestError(f"synthetic entry {e.id!r} needs left, right and disparity paths")
            if self.domain == REAL and (e.disparity is not None or len(e.images) != 1):
                raise ManifestError(f"real entry {e.id!r} takes one image and no disparity")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("manifest ids are not unique")

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise MissingFileError(f"no such manifest: {path}") from None
    base = path.parent
    domain, resize, sign = None, None, 1
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        cols = [c.strip() for c in line.split("\t")]
        where = f"{path}:{lineno}"
        if cols[0].startswith("@"):
            key = cols[0][1:]
            try:
                if key == "domain":
                    domain = cols[1]
                elif key == "resize":
                    resize = (int(cols[1]), int(cols[2]))
                elif key == "disparity_sign":
                    sign = int(cols[1])
                else:
                    raise ManifestError(f"{where}: unknown directive @{key}")
            except (IndexError, ValueError):
                raise ManifestError(f"{where}: malformed directive {line!r}") from None
            continue
        if domain is None:
            raise ManifestError(f"{where}: @domain must precede entries")
        paths = [base / c for c in cols[1:]]
        if domain == SYNTHETIC:
            if len(paths) not in (3, 4):
                raise ManifestError(f"{where}: synthetic rows need id, left, right, disparity[, labels]")
            entries.append(ManifestEntry(cols[0], paths[:2], paths[2], paths[3] if len(paths) == 4 else None))
        else:
            if len(paths) not in (1, 2):
                raise ManifestError(f"{where}: real rows need id, image[, labels]")
            entries.append(ManifestEntry(cols[0], paths[:1], None, paths[1] if len(paths) == 2 else None))
    if domain is None:
        raise ManifestError(f"{path}: no @domain directive")
    if sign not in (1, -1):
        raise ManifestError(f"{path}: disparity_sign must be +1 or -1")
    return DatasetManifest(domain, entries, resize, sign)


def write_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    lines = [f"@domain\t{manifest.domain}"]
    if manifest.resize_to:
        lines.append(f"@resize\t{manifest.resize_to[0]}\t{manifest.resize_to[1]}")
    lines.append(f"@disparity_sign\t{manifest.disparity_sign:+d}")
    for e in manifest.entries:
        cols = [e.id] + [rel(p) for p in e.images]
        if e.disparity is not None:
            cols.append(rel(e.disparity))
        if e.labels is not None:
            cols.append(rel(e.labels))
        lines.append("\t".join(cols))
    path.write_text("\n".join(lines) + "\n")


def filter_manifest(manifest: DatasetManifest, building_class_ids, threshold: float = 0.15) -> DatasetManifest:
    """Keep entries whose label raster passes :func:`building_filter`; unlabeled entries are kept."""
    kept = [
        e
        for e in manifest.entries
        if e.labels is None or building_filter(load_labels(e.labels), building_class_ids, threshold)
    ]
    return DatasetManifest(manifest.domain, kept, manifest.resize_to, manifest.disparity_sign)


# -------------------------------------------------------------------- sources


class ManifestSource:
    """Loads manifest entries on demand, resized to the manifest geometry."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.domain = manifest.domain
        self.disparity_sign = manifest.disparity_sign

    def __len__(self):
        return len(self.manifest.entries)

    @property
    def ids(self):
        return self.manifest.ids

    def load(self, index: int):
        e = self.manifest.entries[index]
        size = self.manifest.resize_to
        if self.domain == REAL:
            img = load_image(e.images[0])
            if size:
                img = imageops.resize_bilinear(img, *size)
            return img
        left, right = load_image(e.images[0]), load_image(e.images[1])
        disp = load_disparity(e.disparity)
        if size:
            left = imageops.resize_bilinear(left, *size)
            right = imageops.resize_bilinear(right, *size)
            disp = imageops.resize_disparity(disp, *size)
        return StereoTuple(left, right, disp, e.id)


class InMemorySource:
    """Source over already-decoded items (``StereoTuple`` or signed tensors)."""

    def __init__(self, items: Sequence, domain: str, ids: Sequence[str] | None = None, disparity_sign: int = 1):
        self.items = list(items)
        self.domain = domain
        self.disparity_sign = disparity_sign
        if ids is None:
            ids = [getattr(it, "id", "") or f"{domain}{i:05d}" for i, it in enumerate(self.items)]
        self._ids = list(ids)

    def __len__(self):
        return len(self.items)

    @property
    def ids(self):
        return self._ids

    def load(self, index: int):
        return self.items[index]


def as_source(obj):
    if isinstance(obj, DatasetManifest):
        return ManifestSource(obj)
    return obj


# -------------------------------------------------------------------- batches


@dataclass
class Batch:
    left: torch.Tensor
    right: torch.Tensor
    disparity: torch.Tensor
    real: torch.Tensor
    edges_left: torch.Tensor
    edges_right: torch.Tensor
    edges_real: torch.Tensor
    synthetic_ids: list[str] = field(default_factory=list)
    real_ids: list[str] = field(default_factory=list)

    @classmethod
    def build(cls, tuples: Sequence[StereoTuple], reals: Sequence[torch.Tensor], real_ids=()):
        left = torch.stack([t.left for t in tuples])
        right = torch.stack([t.right for t in tuples])
        disp = torch.stack([t.disparity for t in tuples])
        real = torch.stack(list(reals))
        if not (left.shape[-2:] == right.shape[-2:] == disp.shape[-2:] == real.shape[-2:]):
            raise DimensionError("batch members differ in spatial size")
        return cls(
            left,
            right,
            disp,
            real,
            imageops.sobel_edges(left),
            imageops.sobel_edges(right),
            imageops.sobel_edges(real),
            [t.id for t in tuples],
            list(real_ids),
        )


def steps_per_epoch(n_a: int, n_b: int, batch_size: int) -> int:
    return -(-max(n_a, n_b) // batch_size)


def _epoch_order(n: int, total: int, rng: np.random.Generator) -> list[int]:
    order: list[int] = []
    while len(order) < total:
        order.extend(int(i) for i in rng.permutation(n))
    return order[:total]


def make_batches(
    source_a,
    source_b,
    batch_size: int,
    rng: np.random.Generator,
    crop: tuple[int, int] | None = None,
    workers: int = 0,
) -> Iterator[Batch]:
    """One epoch of unpaired batches.

    The larger domain is covered exactly once (padded from a fresh permutation
    when its size is not a multiple of ``batch_size``); the smaller one is
    resampled. Sampling and cropping draw only from ``rng`` in a fixed order,
    so the stream does not depend on ``workers``.
    """
    a, b = as_source(source_a), as_source(source_b)
    if len(a) == 0 or len(b) == 0:
        raise ConfigError("both domains need at least one entry")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    steps = steps_per_epoch(len(a), len(b), batch_size)
    order_a = _epoch_order(len(a), steps * batch_size, rng)
    order_b = _epoch_order(len(b), steps * batch_size, rng)
    crops = None
    if crop is not None:
        crops = rng.integers(0, 2**63 - 1, size=(steps, 2 * batch_size))

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 0 else None
    fetch = pool.map if pool else map
    try:
        for s in range(steps):
            ia = order_a[s * batch_size : (s + 1) * batch_size]
            ib = order_b[s * batch_size : (s + 1) * batch_size]
            tuples = list(fetch(a.load, ia))
            reals = list(fetch(b.load, ib))
            if crops is not None:
                tuples = [
                    paired_random_crop(t, *crop, np.random.default_rng(int(crops[s, k])))
                    for k, t in enumerate(tuples)
                ]
                reals = [
                    random_crop(r, *crop, np.random.default_rng(int(crops[s, batch_size + k])))
                    for k, r in enumerate(reals)
                ]
            yield Batch.build(tuples, reals, [b.ids[i] for i in ib])
    finally:
        if pool:
            pool.shutdown()


class BatchStream:
    """Epoch-indexed batch streams; epoch ``e`` draws from ``default_rng([seed, e])``."""

    def __init__(self, source_a, source_b, batch_size: int, seed: int, crop=None, workers: int = 0):
        self.a = as_source(source_a)
        self.b = as_source(source_b)
        if len(self.a) == 0 or len(self.b) == 0:
            raise ConfigError("both domains need at least one entry")
        self.batch_size = batch_size
        self.seed = seed
        self.crop = crop
        self.workers = workers

    @property
    def steps_per_epoch(self) -> int:
        return steps_per_epoch(len(self.a), len(self.b), self.batch_size)

    @property
    def disparity_sign(self) -> int:
        return getattr(self.a, "disparity_sign", 1)

    def epoch(self, index: int) -> Iterator[Batch]:
        rng = np.random.default_rng([self.seed, index])
        return make_batches(self.a, self.b, self.batch_size, rng, self.crop, self.workers)
