"""Three-epoch self-ensemble: element-wise maximum over model outputs.

Models trained to consecutive epochs locate nodules of different subtlety;
taking the per-pixel maximum of the outputs at the validation-optimal epoch
and its two neighbours keeps activations that appear in any of the three.
The composite stays real-valued so downstream intensity checks can read
mean probabilities from it.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .errors import MissingCheckpoint, ShapeMismatch
from .model import ModelSpec, forward, load_checkpoint
from .train import checkpoint_name

COMPOSITE_SCALE = 65535  # probabilities persist as 16-bit grayscale PNG


def compose(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Element-wise maximum of three equally shaped probability maps."""
    if not (a.shape == b.shape == c.shape):
        raise ShapeMismatch(f"shapes differ: {a.shape}, {b.shape}, {c.shape}")
    return np.maximum(np.maximum(a, b), c)


def ensemble_predict(
    checkpoint_dir,
    n: int,
    img: np.ndarray,
    spec: ModelSpec | None = None,
) -> np.ndarray:
    """Run epochs n-1, n, n+1 on one image and compose their outputs."""
    checkpoint_dir = Path(checkpoint_dir)
    outputs = []
    for epoch in (n - 1, n, n + 1):
        path = checkpoint_dir / checkpoint_name(epoch)
        if not path.exists():
            raise MissingCheckpoint(f"epoch {epoch} checkpoint missing: {path}")
        handle = load_checkpoint(path, spec)
        outputs.append(forward(handle, img))
    return compose(*outputs)


def save_composite(path, composite: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    quantized = np.round(np.clip(composite, 0.0, 1.0) * COMPOSITE_SCALE).astype(np.uint16)
    if not cv2.imwrite(str(path), quantized):
        raise OSError(f"failed to write {path}")


def load_composite(path) -> np.ndarray:
    decoded = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if decoded is None:
        raise OSError(f"failed to read {path}")
    return decoded.astype(np.float32) / COMPOSITE_SCALE
