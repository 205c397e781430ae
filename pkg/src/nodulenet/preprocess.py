"""Per-image preprocessing: histogram equalization, lung masking, resampling.

The pipeline order is fixed: equalize on the full radiograph, then zero out
non-lung pixels, then resample. Equalizing after masking would let the
zeroed background dominate the histogram, so callers wanting that order
must compose the primitives themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .dataio import ImageRecord
from .errors import MissingMask, ShapeMismatch

_CV_FILTERS = {
    "area": cv2.INTER_AREA,
    "bilinear": cv2.INTER_LINEAR,
    "nearest": cv2.INTER_NEAREST,
}


@dataclass(frozen=True)
class PreprocessConfig:
    equalize: bool = False
    segment_lung: bool = False
    target_dim: int = 2048
    equalize_bins: int = 256
    resample_filter: str = "area"

    def __post_init__(self):
        if self.target_dim not in (512, 1024, 2048):
            raise ValueError("target_dim must be one of 512, 1024, 2048")
        if self.equalize_bins < 2:
            raise ValueError("equalize_bins must be >= 2")
        if self.resample_filter not in _CV_FILTERS:
            raise ValueError(f"unknown resample filter {self.resample_filter!r}")

    @property
    def variant_name(self) -> str:
        if self.equalize and self.segment_lung:
            return "he+seg"
        if self.equalize:
            return "he"
        if self.segment_lung:
            return "seg"
        return "raw"


VARIANTS = ("raw", "he", "seg", "he+seg")


def variant_config(name: str, target_dim: int, **kwargs) -> PreprocessConfig:
    """Build a PreprocessConfig from one of the four variant names."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}, expected one of {VARIANTS}")
    parts = name.split("+")
    return PreprocessConfig(
        equalize="he" in parts,
        segment_lung="seg" in parts,
        target_dim=target_dim,
        **kwargs,
    )


def equalize_histogram(img: np.ndarray, bins: int = 256) -> np.ndarray:
    """Map intensities through the empirical CDF of the quantized image.

    The mapping is monotone non-decreasing; a constant image maps to 1.0
    (its single occupied bin holds the full CDF mass).
    """
    if img.size == 0:
        raise ValueError("empty image")
    idx = np.clip((img * bins).astype(np.int64), 0, bins - 1)
    hist = np.bincount(idx.ravel(), minlength=bins)
    cdf = np.cumsum(hist, dtype=np.float64) / idx.size
    return cdf[idx].astype(np.float32)


def apply_lung_mask(img: np.ndarray, lung_mask: np.ndarray) -> np.ndarray:
    """Zero every pixel outside the lung-field mask."""
    if img.shape != lung_mask.shape:
        raise ShapeMismatch(f"image {img.shape} vs mask {lung_mask.shape}")
    return np.where(lung_mask > 0, img, 0.0).astype(np.float32)


def resample(img: np.ndarray, target_dim: int, filter: str = "area") -> np.ndarray:
    """Resize a square image; a same-size call is an exact no-op."""
    if img.shape[0] != img.shape[1]:
        raise ShapeMismatch(f"expected square input, got {img.shape}")
    if filter not in _CV_FILTERS:
        raise ValueError(f"unknown resample filter {filter!r}")
    if img.shape[0] == target_dim:
        return img.copy()
    out = cv2.resize(
        img.astype(np.float32), (target_dim, target_dim), interpolation=_CV_FILTERS[filter]
    )
    return np.clip(out, 0.0, 1.0)


def run_pipeline(record: ImageRecord, cfg: PreprocessConfig) -> ImageRecord:
    """Apply equalize -> mask -> resample and rescale the metadata to match."""
    px = record.pixels
    if cfg.equalize:
        px = equalize_histogram(px, cfg.equalize_bins)
    if cfg.segment_lung:
        if record.lung_mask is None:
            raise MissingMask(f"{record.image_id}: segment_lung requires a lung mask")
        px = apply_lung_mask(px, record.lung_mask)
    filt = cfg.resample_filter
    if filt == "area" and cfg.target_dim > record.dim:
        # area averaging degenerates when upscaling; bilinear is the mildest choice
        filt = "bilinear"
    px = resample(px, cfg.target_dim, filt)
    annotation = record.annotation.rescaled(cfg.target_dim) if record.annotation else None
    lung_mask = None
    if record.lung_mask is not None:
        lung_mask = (
            resample(record.lung_mask.astype(np.float32), cfg.target_dim, "nearest") > 0.5
        ).astype(np.uint8)
    return ImageRecord(
        image_id=record.image_id,
        pixels=px,
        dim=cfg.target_dim,
        annotation=annotation,
        lung_mask=lung_mask,
    )
