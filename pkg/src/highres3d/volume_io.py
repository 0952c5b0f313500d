"""Volume files, dataset manifests, and the synthetic dataset generator.

A volume file is a short text header followed by the raw little-endian
payload::

    HR3DVOL
    version: 1
    dtype: f32
    dims: 1 32 32 32
    spacing: 1.0 1.0 1.0
    payload_bytes: 131072
    END
    <payload>
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"HR3DVOL\n"
TERMINATOR = b"END\n"
VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}
SPLITS = ("train", "validation", "test")


class VolumeFormatError(ValueError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DimensionMismatchError(VolumeFormatError):
    pass


class DataError(ValueError):
    """Dataset contents are inconsistent (missing files, shape or class mismatches)."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    @property
    def kind(self) -> str:
        return "u16" if self.data.dtype.kind in "ui" else "f32"


def write_volume(path, volume: Volume | np.ndarray, spacing=None) -> None:
    if isinstance(volume, np.ndarray):
        volume = Volume(volume, tuple(spacing or (1.0, 1.0, 1.0)))
    arr = volume.data
    kind = volume.kind
    if kind == "u16" and arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
        raise VolumeFormatError("label values must fit in 16 unsigned bits")
    raw = np.ascontiguousarray(arr, dtype=DTYPES[kind]).tobytes()
    header = [
        f"version: {VERSION}",
        f"dtype: {kind}",
        "dims: " + " ".join(str(d) for d in arr.shape),
        "spacing: " + " ".join(repr(float(s)) for s in volume.spacing),
        f"payload_bytes: {len(raw)}",
    ]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(TERMINATOR)
        fh.write(raw)


def read_volume(path) -> Volume:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise VolumeFormatError(f"{path}: missing volume header")
    end = blob.find(b"\n" + TERMINATOR)
    if end < 0:
        raise VolumeFormatError(f"{path}: header is not terminated")
    fields = {}
    for line in blob[len(MAGIC):end].decode("ascii").splitlines():
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    try:
        version = int(fields["version"])
        kind = fields["dtype"]
        dims = tuple(int(d) for d in fields["dims"].split())
        spacing = tuple(float(s) for s in fields["spacing"].split())
        declared = int(fields["payload_bytes"])
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: malformed header ({exc})") from exc
    if version != VERSION:
        raise VolumeFormatError(f"{path}: unknown format version {version}")
    if kind not in DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype {kind!r}")
    payload = blob[end + 1 + len(TERMINATOR):]
    if len(payload) < declared:
        raise TruncatedPayloadError(f"{path}: payload truncated ({len(payload)} of {declared} bytes)")
    if len(payload) > declared:
        raise VolumeFormatError(f"{path}: {len(payload) - declared} trailing bytes after payload")
    dtype = DTYPES[kind]
    expected = int(np.prod(dims)) * dtype.itemsize
    if declared != expected:
        raise DimensionMismatchError(
            f"{path}: dims {dims} need {expected // dtype.itemsize} elements, "
            f"payload holds {declared / dtype.itemsize:g}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    arr = arr.astype(np.float32 if kind == "f32" else np.uint16)
    return Volume(arr, spacing)


# ----------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    image: str
    labels: str
    split: str


@dataclass
class DatasetManifest:
    num_classes: int
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> str:
        return json.dumps({"format_version": 1, "num_classes": self.num_classes,
                           "entries": [vars(e) for e in self.entries]}, indent=1, sort_keys=True)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def read(cls, path) -> DatasetManifest:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            entries = [ManifestEntry(**e) for e in doc["entries"]]
            manifest = cls(int(doc["num_classes"]), entries, path.parent)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: unreadable manifest ({exc})") from exc
        manifest.validate()
        return manifest

    def validate(self) -> None:
        seen = {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"unknown split {e.split!r}")
            for p in (e.image, e.labels):
                if p in seen and seen[p] != e.split:
                    raise DataError(f"{p} appears in both {seen[p]} and {e.split}")
                seen[p] = e.split
                if not (self.root / p).exists():
                    raise DataError(f"missing file {self.root / p}")

    def load(self, split: str) -> list[tuple[np.ndarray, np.ndarray]]:
        """(image (C, D, H, W) float32, labels (D, H, W) int64) pairs of one split."""
        out = []
        for e in self.split(split):
            img = read_volume(self.root / e.image).data
            lab = read_volume(self.root / e.labels).data
            if img.ndim == 3:
                img = img[None]
            if lab.ndim == 4:
                lab = lab[0]
            if img.shape[1:] != lab.shape:
                raise DataError(f"{e.image} and {e.labels} differ in spatial shape")
            if lab.size and lab.max() >= self.num_classes:
                raise DataError(f"{e.labels} has label {lab.max()} >= class count {self.num_classes}")
            out.append((img.astype(np.float32), lab.astype(np.int64)))
        return out


# ----------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    size: int = 32
    num_classes: int = 3
    counts: dict = field(default_factory=lambda: {"train": 4, "validation": 2, "test": 2})
    seed: int = 7
    noise: float = 0.3
    class_means: tuple | None = None
    # radius of the outermost structure as a fraction of the volume side
    outer_radius: tuple = (0.22, 0.3)
    shrink: float = 0.55


def _default_means(c: int) -> np.ndarray:
    # alternate bright/dark so no class is a plain intensity ramp of its nesting depth
    means = [0.0]
    for k in range(1, c):
        means.append(1.0 + 0.7 * (k % 2) + 0.15 * k)
    return np.asarray(means)


def synthetic_pair(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (image, labels) pair of nested ellipsoids and boxes."""
    n = spec.size
    grid = np.stack(np.meshgrid(*(np.arange(n) + 0.5,) * 3, indexing="ij"))
    labels = np.zeros((n, n, n), dtype=np.int64)
    centre = n / 2 + rng.uniform(-0.12, 0.12, size=3) * n
    radii = rng.uniform(*spec.outer_radius, size=3) * n
    for c in range(1, spec.num_classes):
        offs = (grid - centre.reshape(3, 1, 1, 1)) / radii.reshape(3, 1, 1, 1)
        inside = (np.abs(offs).max(axis=0) <= 1) if c % 2 == 0 else ((offs ** 2).sum(axis=0) <= 1)
        inside &= labels == c - 1
        if not inside.any():
            inside = np.zeros_like(inside)
            inside[tuple(np.clip(centre.astype(int), 0, n - 1))] = True
        labels[inside] = c
        radii = np.maximum(radii * spec.shrink * rng.uniform(0.85, 1.0, size=3), 1.5)
        centre = centre + rng.uniform(-0.25, 0.25, size=3) * radii
    means = np.asarray(spec.class_means) if spec.class_means is not None else _default_means(spec.num_classes)
    image = means[labels] + spec.noise * rng.standard_normal(labels.shape)
    # smooth multiplicative bias field
    bias = 1 + 0.1 * np.sin(grid[0] / n * np.pi * rng.uniform(0.5, 1.5) + rng.uniform(0, np.pi))
    image = (image * bias + 10.0).astype(np.float32)
    return image[None], labels


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    if spec.num_classes < 2:
        raise ValueError("synthetic data needs at least 2 classes")
    if spec.size < 16:
        raise ValueError("synthetic volumes must be at least 16 voxels per side")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    entries = []
    idx = 0
    for split in SPLITS:
        for _ in range(int(spec.counts.get(split, 0))):
            image, labels = synthetic_pair(spec, rng)
            img_name, lab_name = f"case_{idx:03d}_image.vol", f"case_{idx:03d}_labels.vol"
            write_volume(out / img_name, image)
            write_volume(out / lab_name, labels.astype(np.uint16))
            entries.append(ManifestEntry(img_name, lab_name, split))
            idx += 1
    manifest = DatasetManifest(spec.num_classes, entries, out)
    manifest.write(out / "manifest.json")
    return manifest
