"""Labeled grayscale datasets: construction, synthetic glyphs, noise injection and I/O."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ParameterError

PROVENANCES = ("original", "synthetic", "augmented", "relabeled")
ROLES = ("train", "validation")
MANIFEST_COLUMNS = ["id", "file", "label", "provenance", "true_label"]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale image stored row-major as immutable bytes."""

    width: int
    height: int
    pixels: bytes

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ParameterError(f"image dims must be positive, got {self.width}x{self.height}")
        if not isinstance(self.pixels, bytes):
            object.__setattr__(self, "pixels", bytes(self.pixels))
        if len(self.pixels) != self.width * self.height:
            raise ParameterError(
                f"pixel count {len(self.pixels)} != {self.width}*{self.height}")

    @classmethod
    def from_array(cls, arr) -> GrayImage:
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ParameterError("expected a 2-D array")
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ParameterError("intensities must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        return cls(arr.shape[1], arr.shape[0], np.ascontiguousarray(arr).tobytes())

    def array(self) -> np.ndarray:
        """Read-only (height, width) uint8 view."""
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width)

    def unit(self) -> np.ndarray:
        """Pixels promoted to [0, 1] reals (v / 255)."""
        return self.array().astype(np.float64) / 255.0


@dataclass(frozen=True)
class LabeledSample:
    id: int
    image: GrayImage
    label: int
    provenance: str = "original"
    true_label: int | None = None
    # lineage: id of the sample this one was derived from (augmented copies)
    parent_id: int | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ParameterError(f"unknown provenance {self.provenance!r}")


@dataclass(frozen=True)
class Dataset:
    classes: tuple[str, ...]
    samples: tuple[LabeledSample, ...]
    role: str = "train"
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.role not in ROLES:
            raise ParameterError(f"unknown role {self.role!r}")
        if len(self.classes) < 2:
            raise ParameterError("a dataset needs at least two classes")
        if not self.samples:
            raise ParameterError("a dataset needs at least one sample")
        k = len(self.classes)
        w, h = self.samples[0].image.width, self.samples[0].image.height
        index = {}
        for pos, s in enumerate(self.samples):
            if s.image.width != w or s.image.height != h:
                raise ParameterError(f"sample {s.id} has dims differing from {w}x{h}")
            if not 0 <= s.label < k:
                raise ParameterError(f"sample {s.id} label {s.label} outside [0,{k})")
            if s.true_label is not None and not 0 <= s.true_label < k:
                raise ParameterError(f"sample {s.id} true_label {s.true_label} outside [0,{k})")
            if s.id in index:
                raise ParameterError(f"duplicate sample id {s.id}")
            index[s.id] = pos
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def shape(self) -> tuple[int, int]:
        """(height, width) shared by all images."""
        img = self.samples[0].image
        return img.height, img.width

    @property
    def ids(self) -> np.ndarray:
        return np.array([s.id for s in self.samples], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def position(self, sample_id: int) -> int:
        try:
            return self._index[sample_id]
        except KeyError:
            raise ParameterError(f"unknown sample id {sample_id}") from None

    def get(self, sample_id: int) -> LabeledSample:
        return self.samples[self.position(sample_id)]

    def __contains__(self, sample_id) -> bool:
        return sample_id in self._index

    def next_id(self) -> int:
        return max(self._index) + 1

    def images(self) -> np.ndarray:
        """(N, H, W) uint8 stack."""
        return np.stack([s.image.array() for s in self.samples])

    def features(self, factor: int = 1) -> np.ndarray:
        """(N, D) float matrix on the [0, 1] scale, optionally block-downscaled."""
        imgs = self.images().astype(np.float64)
        if factor != 1:
            imgs = _block_mean(imgs, factor)
            imgs = np.floor(imgs + 0.5)
        return imgs.reshape(len(self), -1) / 255.0

    def with_samples(self, samples: Iterable[LabeledSample]) -> Dataset:
        return Dataset(self.classes, tuple(samples), self.role)

    def subset(self, ids: Iterable[int]) -> Dataset:
        return self.with_samples(self.get(i) for i in ids)


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int
    per_class: int
    image_side: int = 32
    stroke_jitter: float = 0.3
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if self.per_class < 1:
            raise ParameterError("per_class must be >= 1")
        if self.image_side < 16:
            raise ParameterError("image_side must be >= 16")
        if not 0.0 <= self.stroke_jitter <= 1.0:
            raise ParameterError("stroke_jitter must lie in [0, 1]")


def _render_strokes(side: int, count: int, jitter: float, rng: np.random.Generator) -> np.ndarray:
    # strokes are dark rectangles rotated about the image center; rendered by
    # inverse-mapping each pixel into the unrotated glyph frame
    spacing = side / (count + 1.5)
    thickness = max(1.0, spacing * 0.45) * (1.0 + jitter * rng.uniform(-0.5, 0.5))
    height = side * 0.6 * (1.0 + jitter * rng.uniform(-0.3, 0.3))
    dx, dy = jitter * rng.uniform(-0.12, 0.12, size=2) * side
    angle = math.radians(jitter * rng.uniform(-15.0, 15.0))
    centers = (np.arange(count) - (count - 1) / 2.0) * spacing
    centers = centers + jitter * rng.uniform(-0.15, 0.15, size=count) * spacing

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2.0
    u, v = xx - c - dx, yy - c - dy
    cos, sin = math.cos(angle), math.sin(angle)
    gx = cos * u + sin * v
    gy = -sin * u + cos * v
    ink = np.zeros((side, side), dtype=bool)
    for cx in centers:
        ink |= (np.abs(gx - cx) <= thickness / 2.0) & (np.abs(gy) <= height / 2.0)
    return np.where(ink, 0, 255).astype(np.uint8)


def synth_glyphs(spec: SynthSpec, role: str = "train", first_id: int = 0) -> Dataset:
    """Render class ``c`` as ``c + 1`` dark vertical strokes on a white canvas."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    samples = []
    sid = first_id
    for c in range(spec.num_classes):
        for _ in range(spec.per_class):
            arr = _render_strokes(spec.image_side, c + 1, spec.stroke_jitter, rng)
            samples.append(LabeledSample(sid, GrayImage.from_array(arr), c, "synthetic", c))
            sid += 1
    classes = tuple(_roman(c + 1) for c in range(spec.num_classes))
    return Dataset(classes, tuple(samples), role)


def _roman(n: int) -> str:
    table = [(10, "x"), (9, "ix"), (5, "v"), (4, "iv"), (1, "i")]
    out = ""
    for value, sym in table:
        while n >= value:
            out += sym
            n -= value
    return out


def inject_label_noise(ds: Dataset, rho: float, seed: int) -> Dataset:
    if not 0.0 <= rho <= 1.0:
        raise ParameterError(f"rho must lie in [0, 1], got {rho}")
    if ds.role != "train":
        raise ParameterError("label noise is only injected into train splits")
    n = len(ds)
    count = int(math.floor(rho * n + 0.5))
    if count == 0:
        return ds
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=count, replace=False)
    k = ds.num_classes
    samples = list(ds.samples)
    for pos in sorted(chosen.tolist()):
        s = samples[pos]
        new = int(rng.integers(k - 1))
        if new >= s.label:
            new += 1
        samples[pos] = replace(s, label=new)
    return ds.with_samples(samples)


def inject_pixel_noise(ds: Dataset, frac: float, sigma: float, seed: int) -> Dataset:
    if not 0.0 <= frac <= 1.0:
        raise ParameterError(f"frac must lie in [0, 1], got {frac}")
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    n = len(ds)
    count = int(math.floor(frac * n + 0.5))
    if count == 0 or sigma == 0:
        return ds
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=count, replace=False)
    samples = list(ds.samples)
    for pos in sorted(chosen.tolist()):
        s = samples[pos]
        unit = s.image.unit() + rng.normal(0.0, sigma, size=(s.image.height, s.image.width))
        arr = np.clip(np.floor(unit * 255.0 + 0.5), 0, 255).astype(np.uint8)
        samples[pos] = replace(s, image=GrayImage.from_array(arr))
    return ds.with_samples(samples)


def class_histogram(ds: Dataset) -> list[int]:
    return np.bincount(ds.labels, minlength=ds.num_classes).tolist()


def _block_mean(imgs: np.ndarray, factor: int) -> np.ndarray:
    *lead, h, w = imgs.shape
    blocks = imgs.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(-3, -1))


def downscale(img: GrayImage, factor: int) -> GrayImage:
    """Block-average pooling by an integer factor, rounding half up."""
    if factor < 1 or img.width % factor or img.height % factor:
        raise ParameterError(f"factor {factor} does not divide {img.width}x{img.height}")
    if factor == 1:
        return img
    means = _block_mean(img.array().astype(np.float64), factor)
    return GrayImage.from_array(np.floor(means + 0.5).astype(np.uint8))


# --- PGM directory persistence -------------------------------------------------

def encode_pgm(img: GrayImage) -> bytes:
    return f"P5\n{img.width} {img.height}\n255\n".encode("ascii") + img.pixels


def decode_pgm(data: bytes, name: str = "<bytes>") -> GrayImage:
    tokens = []
    pos = 0
    # magic, width, height, maxval separated by whitespace (comments allowed)
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{name}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{name}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{name}: non-numeric PGM header") from None
    if maxval != 255:
        raise FormatError(f"{name}: maxval {maxval} unsupported (must be 255)")
    if width <= 0 or height <= 0:
        raise FormatError(f"{name}: invalid dims {width}x{height}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"{name}: missing whitespace before payload")
    payload = data[pos + 1:]
    if len(payload) != width * height:
        raise FormatError(f"{name}: payload has {len(payload)} bytes, expected {width * height}")
    return GrayImage(width, height, payload)


def save_pgm_dir(ds: Dataset, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in ds.samples:
        cls_dir = root / ds.classes[s.label]
        cls_dir.mkdir(exist_ok=True)
        rel = f"{ds.classes[s.label]}/{s.id}.pgm"
        (root / rel).write_bytes(encode_pgm(s.image))
        rows.append([s.id, rel, s.label, s.provenance,
                     "" if s.true_label is None else s.true_label])
    with open(root / "manifest.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    meta = root / "classes.txt"
    meta.write_text("".join(c + "\n" for c in ds.classes), encoding="utf-8")
    (root / "role.txt").write_text(ds.role + "\n", encoding="utf-8")
    # manifest columns are fixed, so lineage of derived samples lives alongside
    lineage = root / "lineage.csv"
    parents = [(s.id, s.parent_id) for s in ds.samples if s.parent_id is not None]
    if parents:
        with open(lineage, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["id", "parent_id"])
            writer.writerows(parents)
    elif lineage.exists():
        lineage.unlink()


def load_pgm_dir(path) -> Dataset:
    root = Path(path)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise FormatError(f"{manifest}: manifest missing")
    classes_file = root / "classes.txt"
    if classes_file.is_file():
        classes = [c for c in classes_file.read_text(encoding="utf-8").splitlines() if c]
    else:
        classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    role_file = root / "role.txt"
    role = role_file.read_text(encoding="utf-8").strip() if role_file.is_file() else "train"
    samples = []
    with open(manifest, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            raise FormatError(f"{manifest}: header must be {','.join(MANIFEST_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise FormatError(f"{manifest}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns")
            sid, rel, label, prov, true_label = row
            file = root / rel
            if not file.is_file():
                raise FormatError(f"{file}: listed in manifest but missing")
            try:
                label_i = int(label)
                sid_i = int(sid)
                tl = int(true_label) if true_label != "" else None
            except ValueError:
                raise FormatError(f"{manifest}:{lineno}: non-integer field") from None
            if not 0 <= label_i < len(classes) or Path(rel).parts[0] != classes[label_i]:
                raise FormatError(f"{file}: directory does not match label {label}")
            image = decode_pgm(file.read_bytes(), str(file))
            samples.append(LabeledSample(sid_i, image, label_i, prov, tl))
    if not samples:
        raise FormatError(f"{manifest}: no samples listed")
    lineage = root / "lineage.csv"
    if lineage.is_file():
        with open(lineage, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        if not rows or rows[0] != ["id", "parent_id"]:
            raise FormatError(f"{lineage}: header must be id,parent_id")
        try:
            parent = {int(a): int(b) for a, b in rows[1:]}
        except ValueError:
            raise FormatError(f"{lineage}: malformed row") from None
        samples = [replace(x, parent_id=parent.get(x.id)) for x in samples]
    try:
        return Dataset(tuple(classes), tuple(samples), role)
    except ParameterError as e:
        raise FormatError(f"{root}: {e}") from None


# --- IDX ------------------------------------------------------------------------

def _read_idx(path, magic: int, ndim: int) -> tuple[list[int], bytes]:
    data = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated IDX header")
    found = struct.unpack(">I", data[:4])[0]
    if found != magic:
        raise FormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = list(struct.unpack(f">{ndim}I", data[4:header]))
    payload = data[header:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes")
    return dims, payload


def load_idx(images_path, labels_path, classes: Sequence[str] | None = None,
             role: str = "train") -> Dataset:
    (n, rows, cols), pix = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    (m,), labs = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if n != m:
        raise FormatError(f"count mismatch: {n} images vs {m} labels")
    labels = list(labs)
    if classes is None:
        classes = [str(c) for c in range(max(max(labels, default=0) + 1, 2))]
    size = rows * cols
    samples = tuple(
        LabeledSample(i, GrayImage(cols, rows, pix[i * size:(i + 1) * size]), labels[i], "original")
        for i in range(n))
    return Dataset(tuple(classes), samples, role)
