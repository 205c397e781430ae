"""Depth-configurable residual encoder-decoder segmentation networks.

The family shares one layout:

* a stem block at the input resolution (conv, then norm-relu-conv, plus a
  projected shortcut),
* ``depth - 1`` pre-activation residual blocks that each halve the spatial
  dims with a stride-2 first conv while doubling the channel count,
* a bridge of two norm-relu-conv layers at the deepest width,
* a mirrored decoder: parameter-free 2x nearest upsampling, concatenation
  with the encoder skip, then a stride-1 residual block,
* a 1x1 sigmoid head producing a single-channel probability map.

Upsampling is deliberately parameter-free: adding transposed convolutions
changes the trainable-parameter totals of the depth-5/6/7 reference
ladders, which are pinned by tests.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ShapeError, SpecError

NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelSpec:
    depth: int
    filters: tuple[int, ...]
    norm_mode: str = "instance"  # instance | batch
    input_dim: int = 2048

    def __post_init__(self):
        if self.depth != len(self.filters):
            raise SpecError(f"depth {self.depth} != len(filters) {len(self.filters)}")
        if self.depth < 2:
            raise SpecError("need at least two levels")
        if any(b != 2 * a for a, b in zip(self.filters, self.filters[1:])):
            raise SpecError(f"filters must strictly double: {self.filters}")
        if self.norm_mode not in ("instance", "batch"):
            raise SpecError(f"unknown norm_mode {self.norm_mode!r}")
        if self.input_dim % (1 << (self.depth - 1)) != 0:
            raise SpecError(
                f"input_dim {self.input_dim} not divisible by 2^{self.depth - 1}"
            )

    @classmethod
    def for_depth(
        cls, depth: int, input_dim: int = 2048, norm_mode: str = "instance", base_filters: int = 16
    ) -> "ModelSpec":
        """Ladder of ``base_filters`` doubling at each of ``depth`` levels."""
        return cls(
            depth=depth,
            filters=tuple(base_filters << i for i in range(depth)),
            norm_mode=norm_mode,
            input_dim=input_dim,
        )

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "filters": list(self.filters),
            "norm_mode": self.norm_mode,
            "input_dim": self.input_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            depth=int(d["depth"]),
            filters=tuple(int(f) for f in d["filters"]),
            norm_mode=str(d["norm_mode"]),
            input_dim=int(d["input_dim"]),
        )


def _norm(channels: int, mode: str) -> nn.Module:
    if mode == "batch":
        return nn.BatchNorm2d(channels, eps=NORM_EPS)
    return nn.InstanceNorm2d(channels, eps=NORM_EPS, affine=True)


class _NormReluConv(nn.Module):
    """Pre-activation unit: norm -> ReLU -> 3x3 conv."""

    def __init__(self, cin: int, cout: int, stride: int, mode: str):
        super().__init__()
        self.norm = _norm(cin, mode)
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)

    def forward(self, x):
        return self.conv(torch.relu(self.norm(x)))


class _Stem(nn.Module):
    """First level: plain conv then one pre-activation conv, projected skip."""

    def __init__(self, cin: int, cout: int, mode: str):
        super().__init__()
        self.conv_in = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv_mid = _NormReluConv(cout, cout, 1, mode)
        self.shortcut = nn.Conv2d(cin, cout, 1)
        self.shortcut_norm = _norm(cout, mode)

    def forward(self, x):
        return self.conv_mid(self.conv_in(x)) + self.shortcut_norm(self.shortcut(x))


class _ResidualBlock(nn.Module):
    """Two pre-activation convs with a projected (optionally strided) skip."""

    def __init__(self, cin: int, cout: int, stride: int, mode: str):
        super().__init__()
        self.conv1 = _NormReluConv(cin, cout, stride, mode)
        self.conv2 = _NormReluConv(cout, cout, 1, mode)
        self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride)
        self.shortcut_norm = _norm(cout, mode)

    def forward(self, x):
        return self.conv2(self.conv1(x)) + self.shortcut_norm(self.shortcut(x))


class SegmentationNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        f = spec.filters
        mode = spec.norm_mode
        self.spec = spec
        self.stem = _Stem(1, f[0], mode)
        self.encoder = nn.ModuleList(
            _ResidualBlock(cin, cout, 2, mode) for cin, cout in zip(f, f[1:])
        )
        self.bridge = nn.Sequential(
            _NormReluConv(f[-1], f[-1], 1, mode),
            _NormReluConv(f[-1], f[-1], 1, mode),
        )
        dec_out = f[:0:-1]  # deepest-1 .. level-1 widths
        dec_skip = f[-2::-1]
        dec_prev = (f[-1],) + dec_out[:-1]
        self.decoder = nn.ModuleList(
            _ResidualBlock(p + s, o, 1, mode)
            for p, s, o in zip(dec_prev, dec_skip, dec_out)
        )
        self.head = nn.Conv2d(f[1], 1, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        skips = [self.stem(x)]
        for block in self.encoder:
            skips.append(block(skips[-1]))
        y = self.bridge(skips[-1])
        for block, skip in zip(self.decoder, skips[-2::-1]):
            y = torch.cat(
                [nn.functional.interpolate(y, scale_factor=2, mode="nearest"), skip], dim=1
            )
            y = block(y)
        return self.head(y)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(x))


@dataclass
class ModelHandle:
    spec: ModelSpec
    module: SegmentationNet
    parameter_count: int = field(init=False)

    def __post_init__(self):
        self.parameter_count = count_parameters(self.module)


def build(spec: ModelSpec, seed: int = 0) -> ModelHandle:
    """Construct a network with deterministic, seeded initialization."""
    torch.manual_seed(seed)
    module = SegmentationNet(spec)
    module.eval()
    return ModelHandle(spec=spec, module=module)


def count_parameters(model) -> int:
    module = model.module if isinstance(model, ModelHandle) else model
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def parameter_breakdown(model) -> list[tuple[str, tuple[int, ...], int]]:
    """Per-tensor (name, shape, count) listing for reconciling totals."""
    module = model.module if isinstance(model, ModelHandle) else model
    return [
        (name, tuple(p.shape), p.numel())
        for name, p in module.named_parameters()
        if p.requires_grad
    ]


def parameter_checksum(model) -> str:
    """Stable digest of all parameter values, for determinism checks."""
    module = model.module if isinstance(model, ModelHandle) else model
    digest = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def forward(model: ModelHandle, img: np.ndarray) -> np.ndarray:
    """Run one image through the network in inference mode."""
    dim = model.spec.input_dim
    if img.shape != (dim, dim):
        raise ShapeError(f"input {img.shape} != expected ({dim}, {dim})")
    model.module.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32))
        out = model.module(x.unsqueeze(0).unsqueeze(0))
    return out.squeeze(0).squeeze(0).numpy()


def instance_normalize(
    feature_map,
    epsilon: float = NORM_EPS,
    gamma=None,
    beta=None,
):
    """Per-sample, per-channel spatial standardization.

    Accepts (C, H, W) or (N, C, H, W) numpy arrays or torch tensors;
    subtracts the spatial mean and divides by sqrt(population variance +
    epsilon), then applies the optional per-channel affine.
    """
    is_numpy = isinstance(feature_map, np.ndarray)
    x = torch.as_tensor(feature_map) if is_numpy else feature_map
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {tuple(x.shape)}")
    if x.shape[2] * x.shape[3] < 2:
        raise ShapeError("spatial extent must contain at least 2 elements")
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    out = (x - mean) / torch.sqrt(var + epsilon)
    if gamma is not None:
        out = out * torch.as_tensor(gamma).reshape(1, -1, 1, 1)
    if beta is not None:
        out = out + torch.as_tensor(beta).reshape(1, -1, 1, 1)
    if squeeze:
        out = out.squeeze(0)
    return out.numpy() if is_numpy else out


def save_checkpoint(model: ModelHandle, path) -> None:
    torch.save({"spec": model.spec.to_dict(), "state_dict": model.module.state_dict()}, path)


def load_checkpoint(path, spec: ModelSpec | None = None) -> ModelHandle:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    loaded_spec = ModelSpec.from_dict(payload["spec"])
    if spec is not None and spec != loaded_spec:
        raise SpecError(f"checkpoint spec {loaded_spec} != requested {spec}")
    module = SegmentationNet(loaded_spec)
    module.load_state_dict(payload["state_dict"])
    module.eval()
    return ModelHandle(spec=loaded_spec, module=module)
