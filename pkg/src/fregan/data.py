"""Frame loading, triplet extraction, splitting, synthetic data and manifests."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

MANIFEST_HEADER = "FREGAN-MANIFEST v1"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class FrameFormatError(ValueError):
    pass


class ManifestParseError(ValueError):
    pass


class DataConfigError(ValueError):
    pass


def normalize(byte_value):
    """Map bytes in [0, 255] to reals in [-1, 1]."""
    return np.asarray(byte_value, dtype=np.float64) / 127.5 - 1


def denormalize(value):
    """Map reals in [-1, 1] back to uint8, clamping and rounding half away from zero."""
    v = (np.clip(np.asarray(value, dtype=np.float64), -1, 1) + 1) * 127.5
    return np.floor(v + 0.5).astype(np.uint8)


def to_unit_range(image):
    """[-1, 1] images -> [0, 1] images, the scale the metrics work on."""
    return (np.asarray(image, dtype=np.float64) + 1) / 2


@dataclass
class Frame:
    image: np.ndarray  # (1, 3, S, S) float32 in [-1, 1]
    source_id: str
    index: int
    path: str | None = None


@dataclass
class FrameTriplet:
    x_n: Frame
    x_np1: Frame
    x_np2: Frame

    def __post_init__(self):
        a, b, c = self.x_n, self.x_np1, self.x_np2
        if not (a.source_id == b.source_id == c.source_id):
            raise DataConfigError("triplet frames come from different sources")
        if (b.index, c.index) != (a.index + 1, a.index + 2):
            raise DataConfigError(f"triplet indices not consecutive: {a.index}, {b.index}, {c.index}")

    @property
    def source_id(self):
        return self.x_n.source_id

    @property
    def start_index(self):
        return self.x_n.index


@dataclass
class ManifestRecord:
    split: str
    source_id: str
    start_index: int
    paths: tuple[str, str, str]


@dataclass
class DatasetManifest:
    records: list[ManifestRecord] = field(default_factory=list)
    root: str | None = None  # relative frame paths resolve against this directory

    def split(self, tag):
        return [r for r in self.records if r.split == tag]

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.records == other.records


# ---------------------------------------------------------------------------
# image I/O


def read_image_bytes(path, image_size=None) -> np.ndarray:
    """Decode an 8-bit RGB file to an (S, S, 3) uint8 array, bilinear-resized."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode != "RGB":
                raise FrameFormatError(f"{path}: expected 8-bit RGB, got mode {img.mode}")
            if image_size is not None and img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.BILINEAR)
            return np.asarray(img, dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise OSError(f"cannot read frame {path}: {exc}") from exc


def write_image_bytes(path, pixels: np.ndarray):
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), "RGB").save(path, format="PNG")


def bytes_to_tensor(pixels: np.ndarray) -> np.ndarray:
    return normalize(pixels).transpose(2, 0, 1)[None].astype(np.float32)


def tensor_to_bytes(image: np.ndarray) -> np.ndarray:
    """(1, 3, S, S) or (3, S, S) in [-1, 1] -> (S, S, 3) uint8."""
    image = np.asarray(image)
    if image.ndim == 4:
        image = image[0]
    return denormalize(image).transpose(1, 2, 0)


def list_frame_files(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(
        (p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.name,
    )


def load_frame_sequence(directory, image_size, source_id=None) -> list[Frame]:
    """Every image in ``directory``, in filename order, as normalized frames."""
    directory = Path(directory)
    source_id = source_id or directory.name
    frames = []
    for i, path in enumerate(list_frame_files(directory)):
        image = bytes_to_tensor(read_image_bytes(path, image_size))
        frames.append(Frame(image, source_id, i, str(path)))
    return frames


# ---------------------------------------------------------------------------
# triplets and splits


def extract_triplets(frames) -> list[FrameTriplet]:
    """Overlapping stride-1 windows of three; each window stays inside one source."""
    triplets = []
    for a, b, c in zip(frames, frames[1:], frames[2:]):
        if a.source_id == b.source_id == c.source_id and b.index == a.index + 1 and c.index == a.index + 2:
            triplets.append(FrameTriplet(a, b, c))
    return triplets


def _record(triplet, split):
    paths = tuple(f.path or "" for f in (triplet.x_n, triplet.x_np1, triplet.x_np2))
    return ManifestRecord(split, triplet.source_id, triplet.start_index, paths)


def split_dataset(triplets, test_fraction=0.13, seed=42, by_video=False) -> DatasetManifest:
    """Seeded shuffle, then the first ceil(fraction * count) units become the test split.

    With ``by_video`` the shuffled units are whole sources instead of triplets, so no
    source contributes to both splits.
    """
    if not triplets:
        raise DataConfigError("cannot split an empty triplet list")
    if not 0 < test_fraction < 1:
        raise DataConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    if by_video:
        sources = sorted({t.source_id for t in triplets})
        order = rng.permutation(len(sources))
        n_test = math.ceil(test_fraction * len(sources))
        test_sources = {sources[i] for i in order[:n_test]}
        tags = ["test" if t.source_id in test_sources else "train" for t in triplets]
    else:
        order = rng.permutation(len(triplets))
        n_test = math.ceil(test_fraction * len(triplets))
        tags = ["train"] * len(triplets)
        for i in order[:n_test]:
            tags[i] = "test"
    return DatasetManifest([_record(t, tag) for t, tag in zip(triplets, tags)])


# ---------------------------------------------------------------------------
# synthetic data


def _square_frame(size, side, x, y, color):
    img = np.zeros((size, size, 3), np.uint8)
    img[y : y + side, x : x + side] = color
    return img


def synth_moving_square_bytes(count, image_size=32, seed=42):
    """Triplets of (S, S, 3) uint8 frames: a coloured square moving at constant speed.

    Velocities are even so the middle frame sits exactly halfway.  Yields
    (frames, positions) with positions the three (x, y) top-left corners.
    """
    rng = np.random.default_rng(seed)
    side = max(2, image_size // 4)
    limit = image_size - side
    max_step = max(1, image_size // 8)
    out = []
    for _ in range(count):
        x0, y0 = (int(v) for v in rng.integers(0, limit + 1, size=2))
        vx, vy = (2 * int(v) for v in rng.integers(-max_step, max_step + 1, size=2))
        # keep the third frame inside the canvas; velocity stays even
        vx = max(-(x0 // 2) * 2, min(vx, ((limit - x0) // 2) * 2))
        vy = max(-(y0 // 2) * 2, min(vy, ((limit - y0) // 2) * 2))
        color = rng.integers(128, 256, size=3).astype(np.uint8)
        positions = [(x0 + k * vx // 2, y0 + k * vy // 2) for k in range(3)]
        frames = [_square_frame(image_size, side, x, y, color) for x, y in positions]
        out.append((frames, positions))
    return out


def synth_moving_square(count, image_size=32, seed=42) -> list[FrameTriplet]:
    triplets = []
    for k, (frames, _) in enumerate(synth_moving_square_bytes(count, image_size, seed)):
        fs = [Frame(bytes_to_tensor(px), f"synth{k:04d}", i) for i, px in enumerate(frames)]
        triplets.append(FrameTriplet(*fs))
    return triplets


# ---------------------------------------------------------------------------
# manifests


def write_manifest(manifest: DatasetManifest, path):
    lines = [MANIFEST_HEADER]
    for r in manifest.records:
        for value in (r.source_id, *r.paths):
            if "\t" in value or "\n" in value:
                raise ValueError(f"manifest fields cannot contain tabs or newlines: {value!r}")
        lines.append("\t".join([r.split, r.source_id, str(r.start_index), *r.paths]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        if not text.strip():
            raise ManifestParseError("no records")
        raise ManifestParseError(f"line 1: expected header {MANIFEST_HEADER!r}")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise ManifestParseError(f"line {lineno}: expected 6 tab-separated fields, got {len(fields)}")
        split, source_id, start, *paths = fields
        if split not in ("train", "test"):
            raise ManifestParseError(f"line {lineno}: unknown split tag {split!r}")
        try:
            start_index = int(start)
        except ValueError:
            raise ManifestParseError(f"line {lineno}: bad start index {start!r}") from None
        if any(not p for p in paths):
            raise ManifestParseError(f"line {lineno}: missing frame path")
        records.append(ManifestRecord(split, source_id, start_index, tuple(paths)))
    if not records:
        raise ManifestParseError("no records")
    return DatasetManifest(records, root=str(Path(path).parent))


def resolve_path(manifest: DatasetManifest, path: str) -> str:
    if os.path.isabs(path) or manifest.root is None:
        return path
    return os.path.join(manifest.root, path)


def load_triplets(manifest: DatasetManifest, split=None, image_size=None) -> list[FrameTriplet]:
    """Materialise the manifest's records (optionally one split) as frame triplets."""
    triplets = []
    for r in manifest.records:
        if split is not None and r.split != split:
            continue
        frames = []
        for k, p in enumerate(r.paths):
            full = resolve_path(manifest, p)
            frames.append(Frame(bytes_to_tensor(read_image_bytes(full, image_size)), r.source_id,
                                r.start_index + k, full))
        triplets.append(FrameTriplet(*frames))
    return triplets
