"""Dataset ingestion: image loading, annotation parsing, masks, and fold plans.

Images are normalized to square float arrays in [0, 1]. Annotation
coordinates follow image convention: ``center_x`` is the column index,
``center_y`` the row index, both in the coordinate frame of the dimension
recorded on the annotation.
"""

from __future__ import annotations

import csv
import random
import re
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    CurationListMissing,
    DegenerateMask,
    DuplicateId,
    LabelError,
    MalformedFile,
    MissingMask,
    RangeError,
    SchemaError,
    SpecMismatch,
)


class Subtlety(Enum):
    OBVIOUS = "obvious"
    RELATIVELY_OBVIOUS = "relatively_obvious"
    SUBTLE = "subtle"
    VERY_SUBTLE = "very_subtle"
    EXTREMELY_SUBTLE = "extremely_subtle"
    UNKNOWN = "unknown"


class Malignancy(Enum):
    MALIGNANT = "malignant"
    BENIGN = "benign"
    UNKNOWN = "unknown"


class Side(Enum):
    LEFT = "left"
    RIGHT = "right"
    UNKNOWN = "unknown"


class Lobe(Enum):
    UPPER = "upper"
    MIDDLE = "middle"
    LOWER = "lower"
    UNKNOWN = "unknown"


class Sex(Enum):
    FEMALE = "female"
    MALE = "male"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class RawFormat:
    """Container description for on-disk images.

    JSRT-style raws are headerless big-endian 12-bit words with inverted
    intensities; verify these defaults against your copy of the data.
    """

    container: str = "raw16"  # raw16 | png
    bit_depth: int = 12
    byte_order: str = "big"  # big | little
    intensity_inverted: bool = True

    def __post_init__(self):
        if self.container not in ("raw16", "png"):
            raise ValueError(f"unknown container {self.container!r}")
        if not 8 <= self.bit_depth <= 16:
            raise ValueError("bit_depth must be in [8, 16]")
        if self.byte_order not in ("big", "little"):
            raise ValueError(f"unknown byte order {self.byte_order!r}")


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    pixel_spacing_mm: float
    native_dim: int
    raw_format: RawFormat = field(default_factory=RawFormat)
    size_units: str = "mm"  # how the annotation `size` column is interpreted
    delimiter: str = ","

    def __post_init__(self):
        if self.pixel_spacing_mm <= 0:
            raise ValueError("pixel_spacing_mm must be positive")
        if self.native_dim not in (512, 1024, 2048):
            raise ValueError("native_dim must be one of 512, 1024, 2048")
        if self.size_units not in ("mm", "px"):
            raise ValueError(f"unknown size_units {self.size_units!r}")


JSRT_SPEC = DatasetSpec(name="jsrt", pixel_spacing_mm=0.175, native_dim=2048)
NIH_SPEC = DatasetSpec(
    name="nih",
    pixel_spacing_mm=0.175,
    native_dim=1024,
    raw_format=RawFormat(container="png", bit_depth=8, intensity_inverted=False),
    size_units="px",
)


@dataclass(frozen=True)
class NoduleAnnotation:
    image_id: str
    center_x: float
    center_y: float
    diameter_px: float
    native_dim: int
    subtlety: Subtlety = Subtlety.UNKNOWN
    malignancy: Malignancy = Malignancy.UNKNOWN
    side: Side = Side.UNKNOWN
    lobe: Lobe = Lobe.UNKNOWN
    diagnosis: str = ""
    sex: Sex = Sex.UNKNOWN

    def __post_init__(self):
        if not (0 <= self.center_x < self.native_dim and 0 <= self.center_y < self.native_dim):
            raise RangeError(
                f"{self.image_id}: center ({self.center_x}, {self.center_y}) "
                f"outside [0, {self.native_dim})"
            )
        if self.diameter_px <= 0:
            raise ValueError(f"{self.image_id}: diameter must be positive")

    def rescaled(self, target_dim: int) -> "NoduleAnnotation":
        """Return a copy with coordinates and size scaled to ``target_dim``."""
        f = target_dim / self.native_dim
        return replace(
            self,
            center_x=self.center_x * f,
            center_y=self.center_y * f,
            diameter_px=self.diameter_px * f,
            native_dim=target_dim,
        )


@dataclass
class ImageRecord:
    image_id: str
    pixels: np.ndarray  # square float32 in [0, 1]
    dim: int
    annotation: NoduleAnnotation | None = None
    lung_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.pixels.shape != (self.dim, self.dim):
            raise ValueError(
                f"{self.image_id}: pixels {self.pixels.shape} != ({self.dim}, {self.dim})"
            )
        if self.lung_mask is not None and self.lung_mask.shape != self.pixels.shape:
            raise ValueError(f"{self.image_id}: lung mask shape mismatch")


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    k: int
    assignments: dict[str, int]

    def fold_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(i for i, f in self.assignments.items() if f != fold)


@dataclass(frozen=True)
class SubtletyCategory:
    """A training split defined by which subtlety grades it admits."""

    label: str
    included: frozenset

    def admits(self, subtlety: Subtlety) -> bool:
        return subtlety in self.included


CATEGORY_A = SubtletyCategory(
    "A",
    frozenset(
        {
            Subtlety.OBVIOUS,
            Subtlety.RELATIVELY_OBVIOUS,
            Subtlety.SUBTLE,
            Subtlety.VERY_SUBTLE,
            Subtlety.EXTREMELY_SUBTLE,
        }
    ),
)
CATEGORY_B = SubtletyCategory("B", CATEGORY_A.included - {Subtlety.EXTREMELY_SUBTLE})
CATEGORY_C = SubtletyCategory("C", CATEGORY_B.included - {Subtlety.VERY_SUBTLE})
CATEGORY_D = SubtletyCategory("D", CATEGORY_C.included - {Subtlety.SUBTLE})
CATEGORIES = {c.label: c for c in (CATEGORY_A, CATEGORY_B, CATEGORY_C, CATEGORY_D)}


# ---------------------------------------------------------------------------
# image I/O


def load_image(path, spec: DatasetSpec) -> ImageRecord:
    """Load one image and normalize it to float32 in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise MalformedFile(f"no such file: {path}")
    fmt = spec.raw_format
    full_scale = (1 << fmt.bit_depth) - 1
    if fmt.container == "raw16":
        dtype = ">u2" if fmt.byte_order == "big" else "<u2"
        raw = np.fromfile(path, dtype=dtype)
        expected = spec.native_dim * spec.native_dim
        if raw.size != expected:
            raise MalformedFile(
                f"{path.name}: {raw.size} samples, expected {expected} "
                f"({spec.native_dim}x{spec.native_dim})"
            )
        raw = raw.reshape(spec.native_dim, spec.native_dim)
        if raw.max(initial=0) > full_scale:
            raise MalformedFile(
                f"{path.name}: sample exceeds declared {fmt.bit_depth}-bit range"
            )
        pixels = raw.astype(np.float32) / full_scale
    else:
        decoded = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if decoded is None:
            raise MalformedFile(f"{path.name}: undecodable image")
        if decoded.ndim == 3:
            raise MalformedFile(f"{path.name}: expected grayscale, got {decoded.shape[2]} channels")
        if decoded.shape != (spec.native_dim, spec.native_dim):
            raise SpecMismatch(
                f"{path.name}: decoded {decoded.shape}, declared "
                f"{spec.native_dim}x{spec.native_dim}"
            )
        if decoded.dtype == np.uint8 and fmt.bit_depth > 8:
            raise SpecMismatch(f"{path.name}: 8-bit file but spec declares {fmt.bit_depth} bits")
        if decoded.dtype == np.uint16 and decoded.max(initial=0) > full_scale:
            raise MalformedFile(
                f"{path.name}: sample exceeds declared {fmt.bit_depth}-bit range"
            )
        pixels = decoded.astype(np.float32) / full_scale
    if fmt.intensity_inverted:
        pixels = 1.0 - pixels
    return ImageRecord(image_id=path.stem, pixels=pixels, dim=spec.native_dim)


def write_image(path, pixels: np.ndarray, spec: DatasetSpec) -> None:
    """Inverse of :func:`load_image`; quantizes to the declared bit depth."""
    path = Path(path)
    fmt = spec.raw_format
    full_scale = (1 << fmt.bit_depth) - 1
    values = np.clip(pixels, 0.0, 1.0)
    if fmt.intensity_inverted:
        values = 1.0 - values
    words = np.round(values * full_scale).astype(np.uint16)
    if fmt.container == "raw16":
        dtype = ">u2" if fmt.byte_order == "big" else "<u2"
        words.astype(dtype).tofile(path)
    else:
        if fmt.bit_depth <= 8:
            cv2.imwrite(str(path), words.astype(np.uint8))
        else:
            cv2.imwrite(str(path), words)


# ---------------------------------------------------------------------------
# annotations

_MANDATORY_COLUMNS = ("image_id", "x", "y", "size")

_SUBTLETY_ALIASES = {
    "obvious": Subtlety.OBVIOUS,
    "relativelyobvious": Subtlety.RELATIVELY_OBVIOUS,
    "relobvious": Subtlety.RELATIVELY_OBVIOUS,
    "subtle": Subtlety.SUBTLE,
    "verysubtle": Subtlety.VERY_SUBTLE,
    "vsubtle": Subtlety.VERY_SUBTLE,
    "extremelysubtle": Subtlety.EXTREMELY_SUBTLE,
    "esubtle": Subtlety.EXTREMELY_SUBTLE,
}
_MALIGNANCY_ALIASES = {"malignant": Malignancy.MALIGNANT, "benign": Malignancy.BENIGN}
_SIDE_ALIASES = {"left": Side.LEFT, "l": Side.LEFT, "right": Side.RIGHT, "r": Side.RIGHT}
_LOBE_ALIASES = {
    "upper": Lobe.UPPER,
    "u": Lobe.UPPER,
    "middle": Lobe.MIDDLE,
    "m": Lobe.MIDDLE,
    "lower": Lobe.LOWER,
    "l": Lobe.LOWER,
}
_SEX_ALIASES = {"female": Sex.FEMALE, "f": Sex.FEMALE, "male": Sex.MALE, "m": Sex.MALE}


def _parse_enum(cell: str | None, aliases: dict, unknown):
    if cell is None:
        return unknown
    key = re.sub(r"[^a-z]", "", cell.lower())
    return aliases.get(key, unknown)


def parse_annotations(path, spec: DatasetSpec) -> list[NoduleAnnotation]:
    """Parse the delimited nodule metadata file for one dataset.

    Mandatory columns: image_id, x, y, size. The size column is millimetres
    or pixels depending on ``spec.size_units``; mm values are converted via
    the dataset pixel spacing. Unparseable enum cells degrade to UNKNOWN.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=spec.delimiter)
        if reader.fieldnames is None:
            raise SchemaError(f"{path.name}: empty file, header row required")
        missing = [c for c in _MANDATORY_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path.name}: missing mandatory columns {missing}")
        annotations = []
        for row in reader:
            image_id = (row["image_id"] or "").strip()
            if not image_id:
                continue
            try:
                x = float(row["x"])
                y = float(row["y"])
                size = float(row["size"])
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path.name}: bad numeric cell in row {image_id!r}") from exc
            if not (0 <= x < spec.native_dim and 0 <= y < spec.native_dim):
                raise RangeError(
                    f"{image_id}: ({x}, {y}) outside [0, {spec.native_dim})"
                )
            diameter_px = size / spec.pixel_spacing_mm if spec.size_units == "mm" else size
            annotations.append(
                NoduleAnnotation(
                    image_id=image_id,
                    center_x=x,
                    center_y=y,
                    diameter_px=diameter_px,
                    native_dim=spec.native_dim,
                    subtlety=_parse_enum(row.get("subtlety"), _SUBTLETY_ALIASES, Subtlety.UNKNOWN),
                    malignancy=_parse_enum(
                        row.get("malignancy"), _MALIGNANCY_ALIASES, Malignancy.UNKNOWN
                    ),
                    side=_parse_enum(row.get("side"), _SIDE_ALIASES, Side.UNKNOWN),
                    lobe=_parse_enum(row.get("lobe"), _LOBE_ALIASES, Lobe.UNKNOWN),
                    diagnosis=(row.get("diagnosis") or "").strip(),
                    sex=_parse_enum(row.get("sex"), _SEX_ALIASES, Sex.UNKNOWN),
                )
            )
    return annotations


# ---------------------------------------------------------------------------
# subset construction


def make_jsrt_a(records: list[ImageRecord]) -> list[ImageRecord]:
    """Keep records whose nodule centroid lies on lung-mask foreground.

    Records with the centroid on background would yield an all-black target
    after lung-field masking, so they are excluded from the working subset.
    """
    kept = []
    for rec in records:
        if rec.annotation is None:
            raise MissingMask(f"{rec.image_id}: record has no annotation")
        if rec.lung_mask is None:
            raise MissingMask(f"{rec.image_id}: record has no lung mask")
        ann = rec.annotation
        f = rec.dim / ann.native_dim
        col = min(int(round(ann.center_x * f)), rec.dim - 1)
        row = min(int(round(ann.center_y * f)), rec.dim - 1)
        if rec.lung_mask[row, col] > 0:
            kept.append(rec)
    return kept


def synthesize_nodule_mask(ann: NoduleAnnotation, dim: int) -> np.ndarray:
    """Render the ground-truth nodule as a filled circle at ``dim``.

    The annotation's center and diameter are scaled by dim/native_dim; the
    radius is clamped up to 1 pixel (with a warning) so the foreground is
    never empty.
    """
    f = dim / ann.native_dim
    cx = ann.center_x * f
    cy = ann.center_y * f
    radius = (ann.diameter_px / 2.0) * f
    if radius < 1.0:
        warnings.warn(
            f"{ann.image_id}: scaled nodule radius {radius:.3f}px clamped to 1px",
            DegenerateMask,
        )
        radius = 1.0
    yy, xx = np.mgrid[0:dim, 0:dim]
    return ((xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius).astype(np.uint8)


def load_curation_list(path) -> list[str]:
    """Read one image id per line; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise CurationListMissing(f"curation list not found: {path}")
    ids = []
    for line in path.read_text(encoding="utf-8").splitlines():
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            ids.append(stripped)
    return ids


def make_nih_masks(
    rows: list[dict],
    dim: int,
    curated_ids: list[str] | None = None,
) -> list[tuple[NoduleAnnotation, np.ndarray]]:
    """Turn bounding-box rows into circular annotations plus masks.

    Rows must carry image_id, label, x, y, w, h with label == "Nodule"; the
    circle is centered on the box center with diameter max(w, h). When a
    curated id list is given, only those images survive; passing None keeps
    all rows (the caller opts out of curation explicitly).
    """
    out = []
    admitted = None if curated_ids is None else set(curated_ids)
    for row in rows:
        label = str(row.get("label", "")).strip()
        if label != "Nodule":
            raise LabelError(f"{row.get('image_id')}: label {label!r} is not 'Nodule'")
        image_id = str(row["image_id"]).strip()
        if admitted is not None and image_id not in admitted:
            continue
        x, y, w, h = (float(row[k]) for k in ("x", "y", "w", "h"))
        ann = NoduleAnnotation(
            image_id=image_id,
            center_x=x + w / 2.0,
            center_y=y + h / 2.0,
            diameter_px=max(w, h),
            native_dim=dim,
        )
        out.append((ann, synthesize_nodule_mask(ann, dim)))
    return out


def parse_nih_bboxes(path, delimiter: str = ",") -> list[dict]:
    """Read a bounding-box metadata file, keeping only 'Nodule' rows."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        if reader.fieldnames is None:
            raise SchemaError(f"{path.name}: empty file, header row required")
        missing = [c for c in ("image_id", "label", "x", "y", "w", "h") if c not in reader.fieldnames]
        if missing:
            raise SchemaError(f"{path.name}: missing mandatory columns {missing}")
        return [row for row in reader if str(row.get("label", "")).strip() == "Nodule"]


# ---------------------------------------------------------------------------
# fold planning and category filtering


def make_folds(image_ids, k: int = 10, seed: int = 0) -> FoldPlan:
    """Deterministic k-fold partition: seeded shuffle then round-robin.

    Depends only on the sorted id set and the seed, so every preprocessing
    or resolution variant of the same corpus gets an identical plan.
    """
    ids = list(image_ids)
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise DuplicateId(f"duplicate image ids: {dupes}")
    if k < 2:
        raise ValueError("k must be >= 2")
    ordered = sorted(ids)
    rng = random.Random(seed)
    rng.shuffle(ordered)
    return FoldPlan(seed=seed, k=k, assignments={i: n % k for n, i in enumerate(ordered)})


def filter_by_category(records: list[ImageRecord], cat: SubtletyCategory) -> list[ImageRecord]:
    """Keep records whose annotated subtlety is admitted by the category."""
    return [r for r in records if r.annotation is not None and cat.admits(r.annotation.subtlety)]
