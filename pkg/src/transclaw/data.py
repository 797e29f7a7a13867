"""Synthetic multi-class phantom dataset: randomized shapes of very different
sizes on a textured background, with exact masks.

Each foreground class draws one ellipse or rectangle per sample, placed
without overlap. Class size bands shrink geometrically from large to small so
per-class pixel counts span more than an order of magnitude, and intensity
bands overlap across classes so shape rather than raw intensity carries the
class. Generation is deterministic in (seed, sample index).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataError
from .tensor import Tensor, read_array, write_array

_MASK_MAGIC = b"TCM1"
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")

_PLACEMENT_RETRIES = 200


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    mask: np.ndarray   # (H, W) uint8 class indices


@dataclass
class Manifest:
    name: str
    num_classes: int
    height: int
    width: int
    channels: int
    seed: int
    noise: float
    splits: dict[str, list[str]] = field(default_factory=dict)
    root: Path = field(default=Path("."), repr=False)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "name": self.name,
            "num_classes": self.num_classes,
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "seed": self.seed,
            "noise": self.noise,
            "splits": self.splits,
        }

    def save(self) -> None:
        path = self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def split_paths(self, split: str) -> list[Path]:
        if split not in self.splits:
            raise DataError(f"manifest has no split {split!r}")
        return [self.root / rel for rel in self.splits[split]]

    def load_split(self, split: str) -> list[Sample]:
        paths = self.split_paths(split)
        if not paths:
            raise DataError(f"split {split!r} is empty")
        return [load_sample(p) for p in paths]


def load_manifest(root) -> Manifest:
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from e
    if doc.get("version") != 1:
        raise DataError(f"manifest version {doc.get('version')!r} not supported")
    m = Manifest(name=doc["name"], num_classes=doc["num_classes"],
                 height=doc["height"], width=doc["width"], channels=doc["channels"],
                 seed=doc["seed"], noise=doc["noise"], splits=doc["splits"], root=root)
    for split, rels in m.splits.items():
        for rel in rels:
            if not (root / rel).exists():
                raise DataError(f"manifest lists missing file {rel} in split {split!r}")
    return m


# ---------------------------------------------------------------------------
# sample files: image in the standard tensor form, then the mask with its own
# header (magic "TCM1", u32 H, u32 W, row-major u8 payload)


def save_sample(sample: Sample, path) -> None:
    H, W = sample.mask.shape
    with open(path, "wb") as fp:
        write_array(sample.image, fp)
        fp.write(_MASK_MAGIC)
        fp.write(struct.pack("<II", H, W))
        fp.write(np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes())


def load_sample(path) -> Sample:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no sample file at {path}")
    with open(path, "rb") as fp:
        try:
            image = read_array(fp)
        except Exception as e:
            raise DataError(f"corrupt sample image in {path}: {e}") from e
        header = fp.read(12)
        if len(header) != 12 or header[:4] != _MASK_MAGIC:
            raise DataError(f"corrupt mask header in {path}")
        H, W = struct.unpack("<II", header[4:])
        payload = fp.read(H * W)
        if len(payload) != H * W:
            raise DataError(f"truncated mask payload in {path}")
    mask = np.frombuffer(payload, dtype=np.uint8).reshape(H, W).copy()
    if image.ndim != 3 or image.shape[1:] != (H, W):
        raise DataError(f"sample {path}: image extents {image.shape} do not match "
                        f"mask {H}x{W}")
    return Sample(image=image, mask=mask)


def save_mask(mask: np.ndarray, path) -> None:
    """Write a bare class-index mask in the mask block format."""
    H, W = mask.shape
    with open(path, "wb") as fp:
        fp.write(_MASK_MAGIC)
        fp.write(struct.pack("<II", H, W))
        fp.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def load_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no mask file at {path}")
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != _MASK_MAGIC:
        raise DataError(f"corrupt mask header in {path}")
    H, W = struct.unpack("<II", blob[4:12])
    if len(blob) != 12 + H * W:
        raise DataError(f"truncated mask payload in {path}")
    return np.frombuffer(blob[12:], dtype=np.uint8).reshape(H, W).copy()


def load_image(path) -> np.ndarray:
    """Read the (C, H, W) image tensor from a sample or bare tensor file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no image file at {path}")
    with open(path, "rb") as fp:
        try:
            image = read_array(fp)
        except Exception as e:
            raise DataError(f"corrupt image tensor in {path}: {e}") from e
    if image.ndim != 3:
        raise DataError(f"image {path} must be (C, H, W), got {image.shape}")
    return image


# ---------------------------------------------------------------------------
# generation


def _size_band(k: int, num_classes: int) -> tuple[float, float]:
    # geometric shrink from ~0.28 of the short side (class 1) to ~0.06 (last),
    # giving an area spread of well over an order of magnitude
    if num_classes == 2:
        return 0.16, 0.24
    t = (k - 1) / (num_classes - 2)
    center = 0.28 * (0.06 / 0.28) ** t
    return center * 0.8, center * 1.2


def _intensity_band(k: int, num_classes: int) -> tuple[float, float]:
    # bands 0.3 wide with centers spaced 0.15 apart: neighbors overlap
    center = 0.40 + 0.45 * (k - 1) / max(num_classes - 2, 1)
    return center - 0.15, center + 0.15


def _place_shape(rng, mask, k, num_classes) -> tuple[np.ndarray, bool]:
    H, W = mask.shape
    short = min(H, W)
    lo, hi = _size_band(k, num_classes)
    for _ in range(_PLACEMENT_RETRIES):
        a = rng.uniform(lo, hi) * short / 2.0
        b = a * rng.uniform(0.6, 1.6)
        cy = rng.uniform(a + 1, H - a - 1) if H - 2 * a - 2 > 0 else H / 2.0
        cx = rng.uniform(b + 1, W - b - 1) if W - 2 * b - 2 > 0 else W / 2.0
        yy, xx = np.mgrid[0:H, 0:W]
        if rng.random() < 0.5:
            region = ((yy - cy) / a) ** 2 + ((xx - cx) / b) ** 2 <= 1.0
        else:
            region = (np.abs(yy - cy) <= a) & (np.abs(xx - cx) <= b)
        if region.sum() and not (region & (mask > 0)).any():
            return region, True
    return np.zeros_like(mask, dtype=bool), False


def make_phantom(num_classes: int, height: int, width: int, rng,
                 noise: float = 0.05, channels: int = 1) -> Sample:
    """One phantom: K-1 non-overlapping shapes on a textured background."""
    mask = np.zeros((height, width), dtype=np.uint8)
    image = np.full((height, width), rng.uniform(0.08, 0.22), dtype=np.float64)
    for k in range(1, num_classes):
        region, ok = _place_shape(rng, mask, k, num_classes)
        if not ok:
            raise DataError(
                f"could not place a class-{k} shape after {_PLACEMENT_RETRIES} "
                "retries; use smaller shapes or a larger image")
        mask[region] = k
        lo, hi = _intensity_band(k, num_classes)
        image[region] = rng.uniform(lo, hi)

    if noise > 0.0:
        coarse = max(height // 8, 1), max(width // 8, 1)
        lowfreq = np.repeat(np.repeat(rng.normal(0.0, 1.0, coarse), 8, axis=0),
                            8, axis=1)[:height, :width]
        image = image + noise * (0.6 * rng.normal(0.0, 1.0, (height, width)) + 0.4 * lowfreq)
        image = np.clip(image, 0.0, 1.0)

    stack = np.repeat(image[None].astype(np.float32), channels, axis=0)
    return Sample(image=stack, mask=mask)


def generate_phantoms(out_dir, n: int, num_classes: int, height: int, width: int,
                      seed: int, noise: float = 0.05, channels: int = 1,
                      val_fraction: float = 0.2, test_fraction: float = 0.0,
                      name: str = "phantoms") -> Manifest:
    """Write n phantom samples plus a manifest under ``out_dir``.

    Samples are split train/val/test by the given fractions (val and test
    rounded down, at least the remainder in train). Deterministic in ``seed``:
    sample i is generated from the stream (seed, i).
    """
    if num_classes < 2:
        raise DataError(f"need at least 2 classes, got {num_classes}")
    if n < 1:
        raise DataError("need at least one sample")
    out_dir = Path(out_dir)
    n_val = int(n * val_fraction)
    n_test = int(n * test_fraction)
    n_train = n - n_val - n_test
    if n_train < 1:
        raise DataError(f"split fractions leave no training samples (n={n})")
    counts = {"train": n_train, "val": n_val, "test": n_test}

    manifest = Manifest(name=name, num_classes=num_classes, height=height,
                        width=width, channels=channels, seed=seed, noise=noise,
                        splits={s: [] for s in SPLITS}, root=out_dir)
    index = 0
    for split in SPLITS:
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for _ in range(counts[split]):
            rng = np.random.default_rng([seed, index])
            sample = make_phantom(num_classes, height, width, rng, noise, channels)
            rel = f"{split}/sample_{index:04d}.bin"
            save_sample(sample, out_dir / rel)
            manifest.splits[split].append(rel)
            index += 1
    manifest.save()
    return manifest


def batch_iter(manifest: Manifest, split: str, batch_size: int, seed: int,
               epoch: int) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Seeded shuffled batches of (images tensor, masks array) for one epoch.

    The order is keyed by (seed, epoch); the final short batch is included.
    """
    if batch_size < 1:
        raise DataError(f"batch size {batch_size} must be positive")
    paths = manifest.split_paths(split)
    if not paths:
        raise DataError(f"split {split!r} is empty")
    order = np.random.default_rng([seed, epoch]).permutation(len(paths))
    for start in range(0, len(order), batch_size):
        chunk = [load_sample(paths[i]) for i in order[start:start + batch_size]]
        images = np.stack([s.image for s in chunk])
        masks = np.stack([s.mask for s in chunk])
        yield Tensor(images), masks
