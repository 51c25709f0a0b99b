"""Dataset loading, resizing, splitting, contrast normalization and simulated sweeps.

Images are float32 arrays of shape (N, H, W, C) with values in [0, 1].
"""

from __future__ import annotations

import gzip
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SIZE = 32
STRETCH_LOW, STRETCH_HIGH = 5.0, 95.0
R_MIN = 1e-3
PROVENANCES = ("none", "contrast-stretch", "histeq")
IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp"}


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    x: np.ndarray
    split: str = "test"
    provenance: str = "none"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        if self.x.ndim != 4:
            raise ValueError(f"dataset {self.name!r}: expected (N, H, W, C) images, got {self.x.shape}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown preprocessing {self.provenance!r}")
        if self.x.size and not np.all(np.isfinite(self.x)):
            raise ValueError(f"dataset {self.name!r} contains non-finite values")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def nc(self) -> int:
        return self.x.shape[-1]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return replace(self, x=self.x[idx], split=split or self.split, meta=dict(self.meta))

    def save(self, path) -> None:
        header = {"name": self.name, "split": self.split, "provenance": self.provenance, "meta": self.meta}
        np.savez_compressed(path, x=self.x, header=np.array(json.dumps(header)))

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path, allow_pickle=False) as f:
            header = json.loads(str(f["header"]))
            return cls(header["name"], f["x"], header["split"], header["provenance"], header.get("meta", {}))


# ---------------------------------------------------------------------------
# readers
# ---------------------------------------------------------------------------


def _open_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz" or raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into an array of its declared shape."""
    if len(raw) < 4:
        raise IdxFormatError(f"offset 0: header needs 4 bytes, found {len(raw)}")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise IdxFormatError(f"offset 0: bad magic {raw[:4].hex()} (expected 0000 08 nn for unsigned bytes)")
    if ndim == 0:
        raise IdxFormatError("offset 3: zero dimensions")
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IdxFormatError(f"offset 4: dimension table needs {4 * ndim} bytes, found {len(raw) - 4}")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    expected = int(np.prod(dims, dtype=np.int64))
    actual = len(raw) - end
    if actual < expected:
        raise IdxFormatError(f"offset {end}: truncated payload, expected {expected} bytes, found {actual}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=end).reshape(dims)


def load_idx(path, size: int | None = None, name: str | None = None,
             split: str = "test", transpose: bool = False) -> Dataset:
    """Read an IDX image file (optionally gzipped) into a grayscale Dataset.

    ``size`` resizes to size x size; ``transpose`` swaps H/W (EMNIST stores
    images column-major).
    """
    arr = parse_idx(_open_bytes(path))
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise IdxFormatError(f"{path}: expected 3 image dimensions, found shape {arr.shape}")
    if transpose:
        arr = arr.transpose(0, 2, 1, 3)
    x = arr.astype(np.float32) / 255.0
    if size is not None:
        x = resize(x, size)
    return Dataset(name or Path(path).name.split(".")[0], x, split)


def write_idx(path, images: np.ndarray) -> None:
    """Write uint8 images (N, H, W) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, images.ndim) + struct.pack(f">{images.ndim}I", *images.shape)
    Path(path).write_bytes(header + images.tobytes())


def load_image_dir(path, nc: int, size: int = IMAGE_SIZE, name: str | None = None, split: str = "test") -> Dataset:
    if nc not in (1, 3):
        raise ValueError("nc must be 1 or 3")
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images = []
    for f in files:
        try:
            with Image.open(f) as im:
                arr = np.asarray(im.convert("L" if nc == 1 else "RGB"), dtype=np.float32) / 255.0
        except Exception as exc:  # PIL raises a zoo of exception types
            log.warning("skipping undecodable image %s: %s", f, exc)
            continue
        if arr.ndim == 2:
            arr = arr[..., None]
        images.append(resize(arr[None], size)[0])
    if not images:
        raise ValueError(f"no decodable images in {path}")
    return Dataset(name or Path(path).name, np.stack(images), split)


def resize(x: np.ndarray, size: int) -> np.ndarray:
    """Area-average when shrinking, bilinear otherwise, channel by channel."""
    x = np.asarray(x, dtype=np.float32)
    n, h, w, c = x.shape
    if (h, w) == (size, size):
        return x.copy()
    resample = Image.BOX if (h >= size and w >= size) else Image.BILINEAR
    out = np.empty((n, size, size, c), dtype=np.float32)
    for i in range(n):
        for k in range(c):
            im = Image.fromarray(x[i, :, :, k], mode="F").resize((size, size), resample)
            out[i, :, :, k] = np.asarray(im)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def gen_noise(n: int, nc: int, seed: int, size: int = IMAGE_SIZE, name: str = "noise") -> Dataset:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    return Dataset(name, rng.uniform(0.0, 1.0, size=(n, size, size, nc)), "test")


def gen_shapes(n: int, seed: int, nc: int = 1, size: int = IMAGE_SIZE, name: str = "shapes") -> Dataset:
    """Spatially homogeneous toy images: a soft bar in the top third and a soft
    disc lower down, always at (nearly) the same place, with random intensities,
    sizes and mild pixel noise.  Vertically asymmetric by construction."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / (size - 1)
    out = np.empty((n, size, size, nc), dtype=np.float32)
    for i in range(n):
        bg = rng.uniform(0.0, 0.25)
        bar_h = rng.uniform(0.05, 0.09)
        bar_y = 0.2 + rng.uniform(-0.02, 0.02)
        bar = 1.0 / (1.0 + np.exp(-(bar_h - np.abs(yy - bar_y)) / 0.015))
        bar *= (np.abs(xx - 0.5) < rng.uniform(0.25, 0.4))
        cy, cx = 0.65 + rng.uniform(-0.03, 0.03), 0.5 + rng.uniform(-0.03, 0.03)
        rad = rng.uniform(0.14, 0.24)
        disc = 1.0 / (1.0 + np.exp(-(rad - np.hypot(yy - cy, xx - cx)) / 0.02))
        for k in range(nc):
            img = bg + rng.uniform(0.4, 0.75) * bar + rng.uniform(0.5, 0.75) * disc
            img += rng.normal(0.0, 0.02, size=img.shape)
            out[i, :, :, k] = np.clip(img, 0.0, 1.0)
    return Dataset(name, out, "train")


def simulate_intensity_sweep(n_levels: int, nc: int = 1, size: int = IMAGE_SIZE) -> Dataset:
    if n_levels < 2:
        raise ValueError("need at least 2 levels")
    levels = np.linspace(0.0, 1.0, n_levels)
    x = np.broadcast_to(levels[:, None, None, None], (n_levels, size, size, nc))
    return Dataset("intensity-sweep", x, "test", meta={"levels": levels.tolist()})


def simulate_contrast_sweep(base: np.ndarray, n_levels: int) -> Dataset:
    """x_t = 0.5 + t (x - 0.5) for t = 1, (n-1)/n, ..., 1/n."""
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 3:
        raise ValueError("base must be a single H x W x C image")
    if n_levels < 1:
        raise ValueError("need at least 1 level")
    t = (n_levels - np.arange(n_levels)) / n_levels
    x = 0.5 + t[:, None, None, None] * (base[None] - 0.5)
    return Dataset("contrast-sweep", x, "test", meta={"levels": t.tolist()})


# ---------------------------------------------------------------------------
# contrast normalization
# ---------------------------------------------------------------------------


def _as_batch(x):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


def stretch_params(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (a, r) = (P5, P95 - P5) over all pixels and channels jointly."""
    xb, _ = _as_batch(x)
    flat = xb.reshape(len(xb), -1).astype(np.float64)
    lo, hi = np.percentile(flat, [STRETCH_LOW, STRETCH_HIGH], axis=1)
    return lo, hi - lo


def contrast_stretch(x, r_min: float = R_MIN) -> np.ndarray:
    """min(max(0, (x - a) / r), 1) per sample; samples with r < r_min are left alone."""
    xb, single = _as_batch(x)
    a, r = stretch_params(xb)
    ok = r >= r_min
    out = np.array(xb, dtype=np.float32, copy=True)
    if ok.any():
        shape = (-1, 1, 1, 1)
        stretched = (xb[ok].astype(np.float64) - a[ok].reshape(shape)) / r[ok].reshape(shape)
        out[ok] = np.clip(stretched, 0.0, 1.0)
    return out[0] if single else out


def hist_equalize(x, bins: int = 256) -> np.ndarray:
    """Global histogram equalization: each value maps to the empirical CDF of its bin."""
    xb, single = _as_batch(x)
    out = np.empty(xb.shape, dtype=np.float32)
    for i, img in enumerate(xb):
        idx = np.clip((img.astype(np.float64) * bins).astype(np.int64), 0, bins - 1)
        cdf = np.cumsum(np.bincount(idx.ravel(), minlength=bins)) / idx.size
        out[i] = cdf[idx]
    return out[0] if single else out


def preprocess(ds: Dataset, mode: str) -> Dataset:
    if ds.provenance != "none":
        raise ValueError(f"dataset {ds.name!r} is already preprocessed ({ds.provenance})")
    if mode == "none":
        return ds
    if mode == "contrast-stretch":
        x = contrast_stretch(ds.x)
    elif mode == "histeq":
        x = hist_equalize(ds.x)
    else:
        raise ValueError(f"unknown preprocessing {mode!r}; expected one of {PROVENANCES}")
    return replace(ds, x=x, provenance=mode, meta=dict(ds.meta))


def split(ds: Dataset, val_fraction: float = 0.10, seed: int = 0) -> tuple[Dataset, Dataset]:
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_val = int(round(val_fraction * len(ds)))
    return ds.subset(np.sort(perm[n_val:]), "train"), ds.subset(np.sort(perm[:n_val]), "val")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def load_manifest(spec: dict, base_dir=".") -> Dataset:
    """Build a Dataset from a manifest entry.

    Keys: name, format (idx | image_dir | noise | shapes | npz), paths, nc,
    preprocessing, limit, seed, n, transpose, split.
    """
    base = Path(base_dir)
    fmt = spec.get("format", "idx")
    name = spec["name"]
    nc = int(spec.get("nc", 1))
    split_tag = spec.get("split", "test")
    paths = [base / p for p in spec.get("paths", [])]
    if fmt == "idx":
        if not paths:
            raise ValueError(f"manifest {name!r}: idx format needs 'paths'")
        parts = [load_idx(p, IMAGE_SIZE, name, split_tag, spec.get("transpose", False)).x for p in paths]
        ds = Dataset(name, np.concatenate(parts), split_tag)
    elif fmt == "image_dir":
        parts = [load_image_dir(p, nc, IMAGE_SIZE, name, split_tag).x for p in paths]
        ds = Dataset(name, np.concatenate(parts), split_tag)
    elif fmt == "npz":
        ds = Dataset.load(paths[0])
    elif fmt == "noise":
        ds = gen_noise(int(spec.get("n", 10000)), nc, int(spec.get("seed", 0)), name=name)
    elif fmt == "shapes":
        ds = gen_shapes(int(spec.get("n", 10000)), int(spec.get("seed", 0)), nc, name=name)
    else:
        raise ValueError(f"manifest {name!r}: unknown format {fmt!r}")
    if "limit" in spec:
        ds = ds.subset(slice(0, int(spec["limit"])))
    ds.split = split_tag
    mode = spec.get("preprocessing", "none")
    if ds.provenance != mode:
        ds = preprocess(ds, mode)
    return ds
