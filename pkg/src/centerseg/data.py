"""Synthetic multi-mode segmentation data, its on-disk format, and prediction rendering.

Each image is a Voronoi mosaic. Every region gets a class and a latent mode; a
mode is a colour plus a texture, and the modes of one class are spread around
the hue circle, interleaved with the modes of the other classes. Labels store
the class only, so a class's pixels form several well-separated clusters.

Layout on disk::

    <root>/manifest.txt
    <root>/<split>/img_<n>.ppm   (binary RGB, 8 bit)
    <root>/<split>/lbl_<n>.pgm   (binary gray, class index per byte, 255 = ignore)
"""
from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError, DatasetIOError

IGNORE_INDEX = 255
SPLITS = ("train", "val", "test")
TEXTURES = ("flat", "stripes", "checker", "diagonal")
MANIFEST_FORMAT = "centerseg-dataset-1"

DEFAULT_PALETTE = (
    (255, 255, 255), (0, 0, 255), (0, 255, 255), (0, 255, 0), (255, 255, 0), (255, 0, 0),
    (128, 0, 128), (255, 128, 0), (0, 128, 128), (128, 128, 0), (64, 64, 64), (192, 64, 128),
)


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 4
    modes_per_class: int = 3
    height: int = 64
    width: int = 64
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    noise: float = 0.05
    seed: int = 0
    texture: float = 0.25
    min_regions: int = 6
    max_regions: int = 20
    ignore_boundary: bool = False
    divisor: int = 4

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.num_classes >= IGNORE_INDEX:
            raise ConfigError("class indices must fit below the ignore index")
        if self.modes_per_class < 1:
            raise ConfigError("modes_per_class must be >= 1")
        if self.height % self.divisor or self.width % self.divisor:
            raise ConfigError(f"image size must be divisible by {self.divisor}")
        if not 1 <= self.min_regions <= self.max_regions:
            raise ConfigError("invalid region count range")
        if self.noise < 0 or self.texture < 0:
            raise ConfigError("noise and texture must be non-negative")

    def split_size(self, split: str) -> int:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]


@dataclass(frozen=True)
class ModeSignature:
    cls: int
    mode: int
    color: tuple[float, float, float]
    texture: str
    period: int
    amplitude: float

    def to_text(self) -> str:
        rgb = ",".join(f"{c:.6f}" for c in self.color)
        return f"color={rgb};texture={self.texture};period={self.period};amplitude={self.amplitude!r}"

    @classmethod
    def from_text(cls, k: int, r: int, text: str) -> "ModeSignature":
        parts = dict(p.split("=", 1) for p in text.split(";"))
        color = tuple(float(c) for c in parts["color"].split(","))
        return cls(k, r, color, parts["texture"], int(parts["period"]), float(parts["amplitude"]))


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] float in [0, 1]
    labels: np.ndarray  # [H, W] int


@dataclass
class Manifest:
    root: Path
    spec: DatasetSpec
    modes: list[ModeSignature]
    files: dict[str, list[tuple[str, str]]] = field(default_factory=dict)

    def size(self, split: str) -> int:
        return len(self.files.get(split, []))


def mode_signatures(spec: DatasetSpec) -> list[ModeSignature]:
    """Colour/texture signature of every (class, mode) pair.

    Hues are interleaved: slot ``r*K + k`` on the hue circle belongs to class k,
    mode r, so consecutive hues always change class.
    """
    k_total, m_total = spec.num_classes, spec.modes_per_class
    n = k_total * m_total
    out = []
    for k in range(k_total):
        for r in range(m_total):
            slot = r * k_total + k
            value = 0.9 if r % 2 == 0 else 0.65
            rgb = colorsys.hsv_to_rgb(slot / n, 0.8, value)
            texture = TEXTURES[r % len(TEXTURES)]
            period = 0 if texture == "flat" else 4 + 2 * (r // len(TEXTURES))
            amp = 0.0 if texture == "flat" else spec.texture
            out.append(ModeSignature(k, r, tuple(round(c, 6) for c in rgb), texture, period, amp))
    return out


def _texture(sig: ModeSignature, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    if sig.texture == "flat" or sig.period == 0:
        return np.zeros(yy.shape)
    half = sig.period // 2
    if sig.texture == "stripes":
        return np.where((yy // half) % 2 == 0, 1.0, -1.0)
    if sig.texture == "checker":
        return np.where(((yy // half) + (xx // half)) % 2 == 0, 1.0, -1.0)
    return np.where(((yy + xx) // half) % 2 == 0, 1.0, -1.0)


def _sample_rng(spec: DatasetSpec, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, SPLITS.index(split), index])


def regenerate_regions(spec: DatasetSpec, split: str, index: int):
    """Voronoi region map plus per-region class and mode, straight from the seed."""
    rng = _sample_rng(spec, split, index)
    n_regions = int(rng.integers(spec.min_regions, spec.max_regions + 1))
    centers = rng.uniform(0, [spec.height, spec.width], size=(n_regions, 2))
    classes = rng.integers(0, spec.num_classes, size=n_regions)
    modes = rng.integers(0, spec.modes_per_class, size=n_regions)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    d2 = (yy[None] + 0.5 - centers[:, 0, None, None]) ** 2 + (xx[None] + 0.5 - centers[:, 1, None, None]) ** 2
    regions = np.argmin(d2, axis=0)
    return regions, classes, modes, rng


def generate_sample(spec: DatasetSpec, split: str, index: int,
                    signatures: list[ModeSignature] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image_u8 [H,W,3], labels_u8 [H,W])`` for one sample."""
    sigs = signatures or mode_signatures(spec)
    regions, classes, modes, rng = regenerate_regions(spec, split, index)
    yy, xx = np.mgrid[0 : spec.height, 0 : spec.width]
    image = np.zeros((spec.height, spec.width, 3))
    for reg in range(len(classes)):
        mask = regions == reg
        if not mask.any():
            continue
        sig = sigs[classes[reg] * spec.modes_per_class + modes[reg]]
        shade = 1.0 + sig.amplitude * _texture(sig, yy[mask], xx[mask])
        image[mask] = np.asarray(sig.color)[None, :] * shade[:, None]
    image += rng.normal(0.0, spec.noise, size=image.shape) if spec.noise > 0 else 0.0
    image_u8 = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    labels = classes[regions].astype(np.uint8)
    if spec.ignore_boundary:
        edge = np.zeros_like(regions, dtype=bool)
        edge[1:, :] |= regions[1:, :] != regions[:-1, :]
        edge[:, 1:] |= regions[:, 1:] != regions[:, :-1]
        labels[edge] = IGNORE_INDEX
    return image_u8, labels


def to_sample(image_u8: np.ndarray, labels: np.ndarray) -> Sample:
    img = image_u8.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)
    return Sample(img, labels.astype(np.int64))


def write_manifest(manifest: Manifest) -> None:
    lines = [f"format={MANIFEST_FORMAT}"]
    for f in fields(DatasetSpec):
        lines.append(f"{f.name}={getattr(manifest.spec, f.name)!r}")
    for sig in manifest.modes:
        lines.append(f"mode.{sig.cls}.{sig.mode}={sig.to_text()}")
    for split in SPLITS:
        entries = manifest.files.get(split, [])
        lines.append(f"split.{split}={len(entries)}")
        for i, (img, lbl) in enumerate(entries):
            lines.append(f"{split}.{i}={img} {lbl}")
    path = manifest.root / "manifest.txt"
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(f"cannot write {path}: {exc}") from exc


def _parse_value(raw: str, kind):
    if kind is bool or kind == "bool":
        return raw == "True"
    if kind is int or kind == "int":
        return int(raw)
    return float(raw)


def read_manifest(root) -> Manifest:
    root = Path(root)
    path = root / "manifest.txt" if root.is_dir() else root
    root = path.parent
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetIOError(f"cannot read manifest {path}: {exc}") from exc
    kv = {}
    for line in text.splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
    if kv.get("format") != MANIFEST_FORMAT:
        raise DatasetIOError(f"{path} is not a centerseg dataset manifest")
    try:
        spec = DatasetSpec(**{f.name: _parse_value(kv[f.name], f.type) for f in fields(DatasetSpec)})
    except (KeyError, ValueError) as exc:
        raise DatasetIOError(f"malformed manifest {path}: {exc}") from exc
    modes = [ModeSignature.from_text(k, r, kv[f"mode.{k}.{r}"])
             for k in range(spec.num_classes) for r in range(spec.modes_per_class)]
    files = {}
    for split in SPLITS:
        count = int(kv.get(f"split.{split}", 0))
        files[split] = [tuple(kv[f"{split}.{i}"].split(" ", 1)) for i in range(count)]
    return Manifest(root, spec, modes, files)


def generate_dataset(spec: DatasetSpec, out_dir) -> Manifest:
    """Write all splits and the manifest under ``out_dir``; deterministic from ``spec.seed``."""
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        if not os.access(root, os.W_OK):
            raise PermissionError(f"{root} is not writable")
    except OSError as exc:
        raise DatasetIOError(f"cannot create dataset directory {root}: {exc}") from exc
    sigs = mode_signatures(spec)
    manifest = Manifest(root, spec, sigs)
    for split in SPLITS:
        n = spec.split_size(split)
        entries = []
        if n:
            (root / split).mkdir(exist_ok=True)
        for i in range(n):
            image_u8, labels = generate_sample(spec, split, i, sigs)
            img_rel, lbl_rel = f"{split}/img_{i}.ppm", f"{split}/lbl_{i}.pgm"
            try:
                Image.fromarray(image_u8).save(root / img_rel, format="PPM")
                Image.fromarray(labels).save(root / lbl_rel, format="PPM")
            except OSError as exc:
                raise DatasetIOError(f"cannot write sample {split}/{i}: {exc}") from exc
            entries.append((img_rel, lbl_rel))
        manifest.files[split] = entries
    write_manifest(manifest)
    return manifest


def load_sample(manifest: Manifest, split: str, index: int) -> Sample:
    entries = manifest.files.get(split)
    if entries is None:
        raise DatasetIOError(f"split {split!r} not in dataset")
    if not 0 <= index < len(entries):
        raise IndexError(f"{split} index {index} out of range [0, {len(entries)})")
    img_rel, lbl_rel = entries[index]
    image = read_image(manifest.root / img_rel)
    try:
        with Image.open(manifest.root / lbl_rel) as im:
            if im.mode != "L":
                raise DatasetIOError(f"{lbl_rel}: label map must be 8-bit grayscale")
            labels = np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetIOError(f"cannot read {lbl_rel}: {exc}") from exc
    k = manifest.spec.num_classes
    bad = (labels >= k) & (labels != IGNORE_INDEX)
    if bad.any():
        raise DataError(f"{lbl_rel}: labels outside [0,{k}) and {IGNORE_INDEX}")
    return to_sample(image, labels)


def read_image(path) -> np.ndarray:
    """8-bit RGB ``[H, W, 3]`` from any format Pillow reads."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetIOError(f"cannot read image {path}: {exc}") from exc


def load_split(manifest: Manifest, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Stack a whole split: images ``[N,3,H,W]`` float32, labels ``[N,H,W]`` int64."""
    samples = [load_sample(manifest, split, i) for i in range(manifest.size(split))]
    if not samples:
        raise DatasetIOError(f"split {split!r} is empty")
    return np.stack([s.image for s in samples]), np.stack([s.labels for s in samples])


def render_prediction(labels: np.ndarray, palette=DEFAULT_PALETTE, path=None,
                      num_classes: int | None = None) -> np.ndarray:
    """Colour a label map with one palette entry per class; optionally save as PNG."""
    labels = np.asarray(labels)
    pal = np.asarray(palette, dtype=np.uint8)
    needed = num_classes if num_classes is not None else (int(labels.max()) + 1 if labels.size else 0)
    if needed > len(pal) or (labels.size and int(labels.max()) >= len(pal)):
        raise ConfigError(f"palette has {len(pal)} colours but {needed} classes are needed")
    rgb = pal[labels]
    if path is not None:
        Image.fromarray(rgb).save(path, format="PNG")
    return rgb


def save_label_map(labels: np.ndarray, path) -> None:
    """Write a label map as an 8-bit single-channel PGM."""
    arr = np.asarray(labels)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise DataError("label values must fit in a byte")
    Image.fromarray(arr.astype(np.uint8)).save(path, format="PPM")
