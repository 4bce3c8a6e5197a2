"""Synthetic 3D phantoms, a bit-exact volume file format, preprocessing,
and K-fold splitting.

A phantom is a union of overlapping random ellipsoids (each lobe after the
first is centered inside the first, so the foreground is connected) with a
two-level intensity field plus Gaussian noise. Volumes are stored as a JSON
header next to a raw little-endian float64 payload, Z fastest; the label
mask, when present, is appended to the same payload file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ioutil import atomic_write_bytes, atomic_write_text

VOLUME_DTYPE = "f64le"
HEADER_SUFFIX = ".json"
PAYLOAD_SUFFIX = ".raw"


class VolumeFormatError(ValueError):
    """Base class for volume file format violations."""


class HeaderError(VolumeFormatError):
    """Header file missing, unparseable, or missing required keys."""


class DtypeError(VolumeFormatError):
    """Header declares a dtype this reader does not understand."""


class PayloadLengthError(VolumeFormatError):
    """Payload byte count does not match the header dimensions."""


@dataclass
class Volume:
    image: np.ndarray
    label: np.ndarray | None
    spacing: tuple[float, float, float]
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3:
            raise ValueError(f"volume image must be 3-d, got shape {self.image.shape}")
        if self.label is not None:
            self.label = np.asarray(self.label)
            if self.label.shape != self.image.shape:
                raise ValueError(f"label shape {self.label.shape} != image shape {self.image.shape}")
            vals = np.unique(self.label)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError(f"label must be binary, found values {vals}")
            self.label = self.label.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")


@dataclass
class PhantomSpec:
    extent: int = 32
    n_blobs: int = 3
    noise_sigma: float = 0.3
    intensity_fg: float = 1.0
    intensity_bg: float = 0.0
    # correlation length (voxels) of the additive Gaussian field; 0 keeps the
    # noise white. Correlated noise produces blob-like false structures that
    # cannot be averaged away locally, which is what makes the segmentation
    # non-trivial at desk scale.
    noise_smooth: float = 0.0
    # multiplies the lobe semi-axis ranges; < 1 shrinks the foreground
    blob_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.extent < 16 or self.extent % 4 != 0:
            raise ValueError(f"extent must be >= 16 and divisible by 4, got {self.extent}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.noise_smooth < 0:
            raise ValueError(f"noise_smooth must be >= 0, got {self.noise_smooth}")
        if not 0.1 <= self.blob_scale <= 2.0:
            raise ValueError(f"blob_scale must lie in [0.1, 2], got {self.blob_scale}")
        if self.n_blobs < 1:
            raise ValueError(f"need at least one blob, got {self.n_blobs}")


def _ellipsoid_mask(grid: tuple[np.ndarray, ...], center: np.ndarray, semi: np.ndarray) -> np.ndarray:
    q = sum(((g - c) / s) ** 2 for g, c, s in zip(grid, center, semi))
    return q <= 1.0


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Deterministic phantom: connected ellipsoid union plus Gaussian noise.

    Lobe radii are sized so the foreground fraction stays in roughly
    [0.02, 0.30] at any extent.
    """
    rng = np.random.default_rng(spec.seed)
    e = spec.extent
    axes = [np.arange(e, dtype=np.float64)] * 3
    grid = np.meshgrid(*axes, indexing="ij")

    s = spec.blob_scale
    center0 = rng.uniform(0.35 * e, 0.65 * e, size=3)
    semi0 = rng.uniform(0.18 * s * e, 0.28 * s * e, size=3)
    label = _ellipsoid_mask(grid, center0, semi0)
    for _ in range(spec.n_blobs - 1):
        while True:  # rejection-sample a center inside the first lobe
            cand = center0 + rng.uniform(-1.0, 1.0, size=3) * semi0
            if (((cand - center0) / semi0) ** 2).sum() <= 1.0:
                break
        semi = rng.uniform(0.10 * s * e, 0.20 * s * e, size=3)
        label |= _ellipsoid_mask(grid, cand, semi)

    image = np.where(label, spec.intensity_fg, spec.intensity_bg)
    if spec.noise_sigma > 0:
        noise = rng.standard_normal(label.shape)
        if spec.noise_smooth > 0:
            from scipy import ndimage

            noise = ndimage.gaussian_filter(noise, spec.noise_smooth, mode="wrap")
            noise /= noise.std()
        image = image + spec.noise_sigma * noise
    return Volume(image=image, label=label.astype(np.uint8), spacing=(1.0, 1.0, 1.0),
                  id=f"phantom-{spec.seed:04d}")


# ---------------------------------------------------------------------------
# volume file format


def write_volume(v: Volume, path_base: Path | str):
    """Write <base>.json header and <base>.raw payload, atomically."""
    path_base = Path(path_base)
    header = {
        "id": v.id,
        "dims": list(v.image.shape),
        "dtype": VOLUME_DTYPE,
        "spacing": list(v.spacing),
        "has_label": v.label is not None,
    }
    payload = np.ascontiguousarray(v.image, dtype="<f8").tobytes()
    if v.label is not None:
        payload += np.ascontiguousarray(v.label, dtype="<f8").tobytes()
    atomic_write_text(path_base.with_suffix(HEADER_SUFFIX), json.dumps(header, indent=1))
    atomic_write_bytes(path_base.with_suffix(PAYLOAD_SUFFIX), payload)


def read_volume(path_base: Path | str) -> Volume:
    path_base = Path(path_base)
    header_path = path_base.with_suffix(HEADER_SUFFIX)
    try:
        header = json.loads(header_path.read_text())
    except FileNotFoundError:
        raise HeaderError(f"missing header file {header_path}")
    except json.JSONDecodeError as exc:
        raise HeaderError(f"unparseable header {header_path}: {exc}")
    for key in ("id", "dims", "dtype", "spacing", "has_label"):
        if key not in header:
            raise HeaderError(f"header {header_path} lacks required key {key!r}")
    if header["dtype"] != VOLUME_DTYPE:
        raise DtypeError(f"unknown dtype {header['dtype']!r} in {header_path}")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3 or min(dims) < 1:
        raise HeaderError(f"header dims {dims} are not a valid 3-d shape")

    raw = path_base.with_suffix(PAYLOAD_SUFFIX).read_bytes()
    n = int(np.prod(dims))
    expected = n * 8 * (2 if header["has_label"] else 1)
    if len(raw) != expected:
        raise PayloadLengthError(f"payload is {len(raw)} bytes, header implies {expected} "
                                 f"(dims {dims}, has_label={header['has_label']})")
    image = np.frombuffer(raw, dtype="<f8", count=n).reshape(dims).astype(np.float64)
    label = None
    if header["has_label"]:
        label = np.frombuffer(raw, dtype="<f8", count=n, offset=n * 8).reshape(dims)
        label = label.astype(np.uint8)
    return Volume(image=image, label=label, spacing=tuple(header["spacing"]), id=header["id"])


# ---------------------------------------------------------------------------
# preprocessing


def normalize(v: Volume) -> Volume:
    """Standardize the image to zero mean, unit variance."""
    var = float(v.image.var())
    if var <= 0.0:
        raise ValueError(f"cannot normalize constant image {v.id!r}")
    image = (v.image - v.image.mean()) / np.sqrt(var)
    return Volume(image=image, label=None if v.label is None else v.label.copy(),
                  spacing=v.spacing, id=v.id)


def random_crop(v: Volume, crop_extent: tuple[int, int, int], rng: np.random.Generator) -> Volume:
    """Crop image and label with one shared uniformly drawn offset."""
    ce = tuple(int(c) for c in crop_extent)
    ext = v.image.shape
    for c, e in zip(ce, ext):
        if c > e:
            raise ValueError(f"crop extent {ce} exceeds volume extent {ext}")
        if c % 4 != 0 or c < 4:
            raise ValueError(f"crop extents must be positive multiples of 4, got {ce}")
    offs = tuple(int(rng.integers(0, e - c, endpoint=True)) for c, e in zip(ce, ext))
    sl = tuple(slice(o, o + c) for o, c in zip(offs, ce))
    return Volume(image=v.image[sl].copy(),
                  label=None if v.label is None else v.label[sl].copy(),
                  spacing=v.spacing, id=v.id)


# ---------------------------------------------------------------------------
# K-fold splitting


@dataclass
class FoldSplit:
    fold: int
    train_labeled: list[str]
    train_unlabeled: list[str]
    test: list[str]

    @property
    def train(self) -> list[str]:
        return self.train_labeled + self.train_unlabeled


def kfold_split(ids: list[str], k: int, seed: int, labeled_fraction: float = 0.1) -> list[FoldSplit]:
    """Disjoint test folds covering ids, sizes differing by at most one.

    Within each train split the first round(labeled_fraction * n_train)
    shuffled ids (at least one) are flagged labeled, the rest unlabeled.
    """
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the {len(ids)} available ids")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    rng = np.random.default_rng(seed)
    order = list(ids)
    rng.shuffle(order)
    groups = [list(g) for g in np.array_split(np.array(order, dtype=object), k)]
    splits = []
    for fold, test in enumerate(groups):
        train = [i for i in order if i not in test]
        n_lab = max(1, round(labeled_fraction * len(train)))
        splits.append(FoldSplit(fold=fold, train_labeled=train[:n_lab],
                                train_unlabeled=train[n_lab:], test=list(test)))
    return splits


# ---------------------------------------------------------------------------
# dataset manifest


def write_manifest(directory: Path | str, volumes: list[Volume]) -> Path:
    """List volume ids, payload paths, and label availability."""
    directory = Path(directory)
    entries = [{"id": v.id, "path": v.id, "labeled": v.label is not None} for v in volumes]
    path = directory / "manifest.json"
    atomic_write_text(path, json.dumps({"volumes": entries}, indent=1))
    return path


def read_manifest(path: Path | str) -> list[dict]:
    path = Path(path)
    data = json.loads(path.read_text())
    if "volumes" not in data:
        raise HeaderError(f"manifest {path} lacks a 'volumes' list")
    return data["volumes"]


def load_dataset(manifest_path: Path | str) -> dict[str, Volume]:
    """Read every volume named by a manifest, keyed by id."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    volumes = {}
    for entry in read_manifest(manifest_path):
        v = read_volume(base / entry["path"])
        volumes[v.id] = v
    return volumes
