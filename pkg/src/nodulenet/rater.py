"""Automated nodule localization rating.

Predicted probability masks are binarized, outer contours traced, and an
ellipse fitted to each blob. Ellipses that are too eccentric or too small
are noise from the decoding process; survivors whose region-of-interest
mean probability is weak are dropped too. The remaining detection nearest
the ground-truth centre, within 1/16th of the image dimension, scores the
single true positive; every other survivor is a false positive.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import cv2
import numpy as np

from .dataio import NoduleAnnotation
from .errors import EmptySet


@dataclass(frozen=True)
class RaterConfig:
    eccentricity_max: float = 0.95
    area_divisor: int = 128
    roi_intensity_min: float = 0.5
    centroid_tol_divisor: int = 16
    binarize_threshold: float = 0.5
    roi_shape: str = "square"  # square | circle

    def __post_init__(self):
        if not 0 < self.eccentricity_max < 1:
            raise ValueError("eccentricity_max must be in (0, 1)")
        if self.area_divisor < 1 or self.centroid_tol_divisor < 1:
            raise ValueError("divisors must be >= 1")
        if not 0 < self.roi_intensity_min < 1 or not 0 < self.binarize_threshold < 1:
            raise ValueError("thresholds must be in (0, 1)")
        if self.roi_shape not in ("square", "circle"):
            raise ValueError(f"unknown roi_shape {self.roi_shape!r}")

    def min_area(self, dim: int) -> float:
        return (dim / self.area_divisor) ** 2

    def centroid_tolerance(self, dim: int) -> float:
        return dim / self.centroid_tol_divisor


class DetectionStatus(Enum):
    CANDIDATE = "candidate"
    FILTERED_NOISE = "filtered_noise"
    TRUE_POSITIVE = "true_positive"
    FALSE_POSITIVE = "false_positive"


@dataclass(frozen=True)
class Detection:
    center_x: float
    center_y: float
    major_axis: float
    minor_axis: float
    eccentricity: float
    area: float
    roi_mean: float
    status: DetectionStatus = DetectionStatus.CANDIDATE


@dataclass(frozen=True)
class RatingResult:
    image_id: str
    detections: tuple[Detection, ...]
    tp: int
    fp: int

    @property
    def filtered(self) -> int:
        return sum(1 for d in self.detections if d.status is DetectionStatus.FILTERED_NOISE)


def _roi_mean(mask: np.ndarray, cx: float, cy: float, side: float, shape: str) -> float:
    dim_y, dim_x = mask.shape
    if side <= 0:
        return 0.0
    half = side / 2.0
    r0 = max(int(math.floor(cy - half)), 0)
    r1 = min(int(math.ceil(cy + half)), dim_y)
    c0 = max(int(math.floor(cx - half)), 0)
    c1 = min(int(math.ceil(cx + half)), dim_x)
    if r0 >= r1 or c0 >= c1:
        return 0.0
    window = mask[r0:r1, c0:c1]
    if shape == "circle":
        yy, xx = np.mgrid[r0:r1, c0:c1]
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= half * half
        if not inside.any():
            return 0.0
        return float(window[inside].mean())
    return float(window.mean())


def detect_blobs(mask: np.ndarray, cfg: RaterConfig) -> list[Detection]:
    """Binarize, trace outer contours, and fit one ellipse per blob.

    Contours with fewer than five boundary points cannot define an ellipse;
    they are emitted as FILTERED_NOISE with zeroed geometry so the per-image
    tally still accounts for them.
    """
    binary = (mask >= cfg.binarize_threshold).astype(np.uint8)
    contours, _ = cv2.findContours(binary, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
    detections = []
    for contour in contours:
        points = contour.reshape(-1, 2)
        if len(points) < 5:
            cx, cy = points.mean(axis=0)
            detections.append(
                Detection(
                    center_x=float(cx),
                    center_y=float(cy),
                    major_axis=0.0,
                    minor_axis=0.0,
                    eccentricity=1.0,
                    area=0.0,
                    roi_mean=0.0,
                    status=DetectionStatus.FILTERED_NOISE,
                )
            )
            continue
        (cx, cy), (d1, d2), _angle = cv2.fitEllipse(contour)
        minor, major = sorted((float(d1), float(d2)))
        ecc = math.sqrt(1.0 - (minor / major) ** 2) if major > 0 else 1.0
        detections.append(
            Detection(
                center_x=float(cx),
                center_y=float(cy),
                major_axis=major,
                minor_axis=minor,
                eccentricity=ecc,
                area=math.pi * (major / 2.0) * (minor / 2.0),
                roi_mean=_roi_mean(mask, float(cx), float(cy), minor, cfg.roi_shape),
            )
        )
    return detections


def filter_geometry(det: Detection, dim: int, cfg: RaterConfig) -> Detection:
    """Drop over-eccentric or sub-floor-area candidates as noise."""
    if det.status is not DetectionStatus.CANDIDATE:
        return det
    if det.eccentricity >= cfg.eccentricity_max or det.area <= cfg.min_area(dim):
        return replace(det, status=DetectionStatus.FILTERED_NOISE)
    return det


def filter_roi_intensity(det: Detection, mask: np.ndarray, cfg: RaterConfig) -> Detection:
    """Drop candidates whose ROI mean probability is below the threshold.

    The ROI is a square (side = minor axis) centred on the ellipse, clipped
    to the image; mean strictly below the threshold filters the detection.
    """
    if det.status is not DetectionStatus.CANDIDATE:
        return det
    roi_mean = _roi_mean(mask, det.center_x, det.center_y, det.minor_axis, cfg.roi_shape)
    det = replace(det, roi_mean=roi_mean)
    if roi_mean < cfg.roi_intensity_min:
        return replace(det, status=DetectionStatus.FILTERED_NOISE)
    return det


def match(
    detections: list[Detection],
    gt: NoduleAnnotation | None,
    dim: int,
    cfg: RaterConfig,
) -> RatingResult:
    """Assign TP/FP status: nearest surviving centroid within tolerance wins."""
    tolerance = cfg.centroid_tolerance(dim)
    survivors = [
        (i, d) for i, d in enumerate(detections) if d.status is DetectionStatus.CANDIDATE
    ]
    winner = None
    if gt is not None and survivors:
        in_tolerance = []
        for i, d in enumerate(detections):
            if d.status is not DetectionStatus.CANDIDATE:
                continue
            dist = math.hypot(d.center_x - gt.center_x, d.center_y - gt.center_y)
            if dist <= tolerance:
                in_tolerance.append((dist, i))
        if in_tolerance:
            winner = min(in_tolerance)[1]
    final = []
    tp = fp = 0
    for i, d in enumerate(detections):
        if d.status is not DetectionStatus.CANDIDATE:
            final.append(d)
        elif i == winner:
            final.append(replace(d, status=DetectionStatus.TRUE_POSITIVE))
            tp += 1
        else:
            final.append(replace(d, status=DetectionStatus.FALSE_POSITIVE))
            fp += 1
    image_id = gt.image_id if gt is not None else ""
    return RatingResult(image_id=image_id, detections=tuple(final), tp=tp, fp=fp)


def rate_image(
    mask: np.ndarray,
    gt: NoduleAnnotation | None,
    cfg: RaterConfig,
) -> RatingResult:
    """Full rating pipeline for one predicted mask."""
    dim = mask.shape[0]
    detections = detect_blobs(mask, cfg)
    detections = [filter_geometry(d, dim, cfg) for d in detections]
    detections = [filter_roi_intensity(d, mask, cfg) for d in detections]
    return match(detections, gt, dim, cfg)


def aggregate(results: list[RatingResult]) -> tuple[float, float]:
    """Pooled (sensitivity %, false positives per image) over rated images."""
    if not results:
        raise EmptySet("no rating results to aggregate")
    n = len(results)
    return (100.0 * sum(r.tp for r in results) / n, sum(r.fp for r in results) / n)


def write_ratings_csv(results: list[RatingResult], path) -> None:
    """Per-detection audit rows, one file per experiment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "image_id",
                "tp",
                "fp",
                "detection_index",
                "status",
                "center_x",
                "center_y",
                "major_axis",
                "minor_axis",
                "eccentricity",
                "area",
                "roi_mean",
            ]
        )
        for result in sorted(results, key=lambda r: r.image_id):
            if not result.detections:
                writer.writerow([result.image_id, result.tp, result.fp, "", "", "", "", "", "", "", "", ""])
            for i, d in enumerate(result.detections):
                writer.writerow(
                    [
                        result.image_id,
                        result.tp,
                        result.fp,
                        i,
                        d.status.value,
                        f"{d.center_x:.3f}",
                        f"{d.center_y:.3f}",
                        f"{d.major_axis:.3f}",
                        f"{d.minor_axis:.3f}",
                        f"{d.eccentricity:.6f}",
                        f"{d.area:.3f}",
                        f"{d.roi_mean:.6f}",
                    ]
                )


def render_overlay(
    mask: np.ndarray,
    result: RatingResult,
    gt: NoduleAnnotation | None,
    path,
) -> None:
    """Write a visual audit PNG: mask, fitted ellipses, ground-truth circle."""
    canvas = cv2.cvtColor(
        (np.clip(mask, 0, 1) * 255).astype(np.uint8), cv2.COLOR_GRAY2BGR
    )
    palette = {
        DetectionStatus.TRUE_POSITIVE: (0, 255, 0),
        DetectionStatus.FALSE_POSITIVE: (0, 0, 255),
        DetectionStatus.FILTERED_NOISE: (128, 128, 128),
        DetectionStatus.CANDIDATE: (255, 255, 0),
    }
    for d in result.detections:
        if d.major_axis <= 0:
            continue
        cv2.ellipse(
            canvas,
            (int(round(d.center_x)), int(round(d.center_y))),
            (int(round(d.major_axis / 2)), int(round(d.minor_axis / 2))),
            0,
            0,
            360,
            palette[d.status],
            1,
        )
    if gt is not None:
        cv2.circle(
            canvas,
            (int(round(gt.center_x)), int(round(gt.center_y))),
            max(int(round(gt.diameter_px / 2)), 1),
            (255, 0, 255),
            1,
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), canvas):
        raise OSError(f"failed to write {path}")
