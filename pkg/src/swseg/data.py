"""Synthetic tumor-like datasets, PNG ingestion and the train/val split."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, ShapeError


@dataclass
class Sample:
    """A 3-channel image in [0, 1] with its binary mask.

    ``image`` has shape (3, H, W) and is the 8-bit grayscale source divided by
    255 and repeated across channels; ``mask`` is (H, W) uint8 in {0, 1}.
    """

    image: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ShapeError(f"image {self.image.shape} and mask {self.mask.shape} disagree")

    def gray_uint8(self) -> np.ndarray:
        return np.rint(self.image[0] * 255.0).astype(np.uint8)

    def mask_uint8(self) -> np.ndarray:
        """Mask as an 8-bit image, 0 / 255."""
        return (self.mask * 255).astype(np.uint8)


@dataclass
class Dataset:
    samples: List[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.samples[i])
        return self.samples[i]

    @property
    def ids(self) -> List[str]:
        return [s.id for s in self.samples]

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    def masks(self) -> np.ndarray:
        return np.stack([s.mask for s in self.samples])


# -- preprocessing ---------------------------------------------------------------


def _binarize_mask(mask: np.ndarray) -> np.ndarray:
    # Already-binary masks pass through; 8-bit masks are cut at > 127.
    if mask.dtype == bool or mask.max(initial=0) <= 1:
        return (mask > 0).astype(np.uint8)
    return (mask > 127).astype(np.uint8)


def preprocess(image, mask, size: Optional[int] = 256, sample_id: str = "") -> Sample:
    """Resize, binarize and channel-replicate one grayscale image/mask pair.

    The image is resized bilinearly, the mask with nearest neighbour and then
    thresholded (> 127 for 0..255 masks). The 8-bit gray values are scaled to
    [0, 1] and copied into three identical channels. ``size=None`` keeps the
    native resolution.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.dtype != np.uint8:
        raise DataError(f"image must be 8-bit (uint8), got {image.dtype}")
    if image.ndim != 2:
        raise DataError(f"image must be single-channel 2-D, got shape {image.shape}")
    if mask.dtype not in (np.uint8, np.bool_):
        raise DataError(f"mask must be 8-bit or boolean, got {mask.dtype}")
    if mask.shape != image.shape:
        raise ShapeError(f"image {image.shape} and mask {mask.shape} differ before resizing")
    if min(image.shape) < 1:
        raise DataError("image has an empty dimension")
    if size is not None and image.shape != (size, size):
        image = np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))
        m8 = mask.astype(np.uint8) * (255 if mask.dtype == np.bool_ else 1)
        mask = np.asarray(Image.fromarray(m8).resize((size, size), Image.NEAREST))
    gray = image.astype(np.float64) / 255.0
    return Sample(np.repeat(gray[None], 3, axis=0), _binarize_mask(mask), sample_id)


# -- synthetic generator ----------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Dark background, bright elliptical blobs, additive Gaussian noise.

    Intensities and ``noise`` are in 8-bit gray levels. Blob semi-axes are
    drawn from ``radius`` and blobs are placed fully inside the frame.
    """

    count: int = 200
    size: int = 64
    blobs: Tuple[int, int] = (1, 2)
    radius: Tuple[float, float] = (5.0, 12.0)
    background: float = 40.0
    contrast: float = 120.0
    noise: float = 12.0
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.size < 4:
            raise ConfigError(f"size must be >= 4, got {self.size}")
        lo, hi = self.blobs
        if not 1 <= lo <= hi:
            raise ConfigError(f"blob count range must satisfy 1 <= lo <= hi, got {self.blobs}")
        rlo, rhi = self.radius
        if not 1.0 <= rlo <= rhi or rhi >= self.size / 2:
            raise ConfigError(
                f"radius range {self.radius} infeasible for size {self.size} (need 1 <= lo <= hi < size/2)"
            )
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.contrast <= 0 or self.background < 0 or self.background + self.contrast > 255:
            raise ConfigError("need background >= 0, contrast > 0 and background + contrast <= 255")
        return self


def _blob_mask(rng: np.random.Generator, spec: SynthSpec, yy, xx) -> np.ndarray:
    a, b = rng.uniform(*spec.radius, size=2)
    theta = rng.uniform(0, math.pi)
    reach = max(a, b)
    cy, cx = rng.uniform(reach, spec.size - 1 - reach, size=2)
    c, s = math.cos(theta), math.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def synth_raw(spec: SynthSpec, index: int) -> Tuple[np.ndarray, np.ndarray]:
    """The ``index``-th raw 8-bit image and {0, 1} mask of a synthetic set."""
    rng = np.random.default_rng([spec.seed, index])
    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size].astype(float)
    img = np.full((spec.size, spec.size), spec.background)
    mask = np.zeros((spec.size, spec.size), bool)
    n_blobs = int(rng.integers(spec.blobs[0], spec.blobs[1] + 1))
    for _ in range(n_blobs):
        blob = _blob_mask(rng, spec, yy, xx)
        level = spec.background + spec.contrast * rng.uniform(0.75, 1.0)
        img[blob] = np.maximum(img[blob], level)
        mask |= blob
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask.astype(np.uint8)


def generate(spec: SynthSpec = SynthSpec()) -> Dataset:
    """Deterministic synthetic dataset; sample ``i`` depends only on (seed, i)."""
    spec.validate()
    samples = []
    for i in range(spec.count):
        img, mask = synth_raw(spec, i)
        samples.append(preprocess(img, mask, size=None, sample_id=f"synth_{i:05d}"))
    return Dataset(samples)


# -- split ---------------------------------------------------------------------------


def split_indices(n: int, train_fraction: float = 0.8, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    if n < 1:
        raise DataError("cannot split an empty dataset")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    order = np.random.default_rng([seed, 2]).permutation(n)
    cut = int(round(train_fraction * n))
    return order[:cut], order[cut:]


def split(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first ``train_fraction`` goes to training."""
    tr, va = split_indices(len(dataset), train_fraction, seed)
    return Dataset([dataset[i] for i in tr]), Dataset([dataset[i] for i in va])


# -- PNG pairs and manifest --------------------------------------------------------------

MASK_SUFFIX = "_mask"


def read_png_pair(image_path: Union[str, Path], mask_path: Union[str, Path], size: Optional[int], sample_id: str) -> Sample:
    try:
        with Image.open(image_path) as im:
            if im.mode != "L":
                raise DataError(f"{image_path}: expected 8-bit grayscale PNG, got mode {im.mode}")
            img = np.asarray(im)
        with Image.open(mask_path) as im:
            if im.mode not in ("L", "1"):
                raise DataError(f"{mask_path}: expected 8-bit grayscale mask, got mode {im.mode}")
            mask = np.asarray(im.convert("L"))
    except OSError as exc:
        raise DataError(str(exc)) from exc
    return preprocess(img, mask, size=size, sample_id=sample_id)


def load_png_dir(directory: Union[str, Path], size: Optional[int] = 256) -> Dataset:
    """Load every ``<id>.png`` / ``<id>_mask.png`` pair, sorted by id."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    samples = []
    for p in sorted(directory.glob("*.png")):
        if p.stem.endswith(MASK_SUFFIX):
            continue
        mask_path = p.with_name(p.stem + MASK_SUFFIX + ".png")
        if not mask_path.exists():
            raise DataError(f"{p.name} has no matching {mask_path.name}")
        samples.append(read_png_pair(p, mask_path, size, p.stem))
    if not samples:
        raise DataError(f"no image/mask PNG pairs found in {directory}")
    return Dataset(samples)


def write_png_dataset(
    dataset: Dataset,
    directory: Union[str, Path],
    train_fraction: float = 0.8,
    seed: int = 0,
) -> List[dict]:
    """Write PNG pairs plus ``manifest.json``; returns the manifest entries."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tr, _ = split_indices(len(dataset), train_fraction, seed)
    train_set = set(int(i) for i in tr)
    entries = []
    for i, s in enumerate(dataset):
        img_name, mask_name = f"{s.id}.png", f"{s.id}{MASK_SUFFIX}.png"
        Image.fromarray(s.gray_uint8()).save(directory / img_name)
        Image.fromarray(s.mask_uint8()).save(directory / mask_name)
        entries.append(
            {"id": s.id, "image_path": img_name, "mask_path": mask_name,
             "split": "train" if i in train_set else "val"}
        )
    write_manifest(entries, directory / "manifest.json")
    return entries


def write_manifest(entries: Sequence[dict], path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(list(entries), indent=2) + "\n", encoding="utf-8")


def load_manifest(path: Union[str, Path], size: Optional[int] = None) -> Tuple[Dataset, Dataset]:
    """Read a manifest and return its (train, val) datasets.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    parts = {"train": [], "val": []}
    for e in entries:
        try:
            split_name = e["split"]
            sample = read_png_pair(path.parent / e["image_path"], path.parent / e["mask_path"], size, e["id"])
        except KeyError as exc:
            raise DataError(f"manifest entry missing field {exc}") from exc
        if split_name not in parts:
            raise DataError(f"unknown split {split_name!r} for {e['id']}")
        parts[split_name].append(sample)
    return Dataset(parts["train"]), Dataset(parts["val"])
