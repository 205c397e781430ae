"""Fold training, per-epoch checkpointing, and experiment-matrix orchestration.

Each fold trains on the other k-1 folds minus a seeded validation carve-out,
checkpoints every epoch, and records train/validation loss and per-pixel
accuracy. The post-hoc optimal epoch is the centered 3-epoch moving-average
minimum of validation loss, so the epochs on either side always exist for
ensembling.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .dataio import FoldPlan, ImageRecord, make_folds, synthesize_nodule_mask
from .errors import InsufficientHistory, NonFiniteLoss, PartialFailure
from .model import ModelHandle, ModelSpec, build, save_checkpoint

DEFAULT_BATCH_SIZES = {512: 8, 1024: 4, 2048: 2}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    max_epochs: int = 25
    batch_size: int | None = None  # None: pick by resolution
    loss: str = "bce"  # bce | dice | bce_dice
    optimizer: str = "adam"  # adam | sgd
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 3:
            raise ValueError("max_epochs must be >= 3 so the selected epoch has neighbours")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.loss not in ("bce", "dice", "bce_dice"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")

    def resolved_batch_size(self, dim: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return DEFAULT_BATCH_SIZES.get(dim, 8)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


def checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:02d}.ckpt"


def validation_split(train_ids, cfg: TrainConfig, fold_id: int) -> tuple[list[str], list[str]]:
    """Carve a seeded validation subset out of the training ids only."""
    ordered = sorted(train_ids)
    rng = random.Random(f"{cfg.seed}:{fold_id}:val")
    rng.shuffle(ordered)
    n_val = max(1, round(cfg.val_fraction * len(ordered)))
    if n_val >= len(ordered):
        raise ValueError("validation carve-out would consume the whole training set")
    return sorted(ordered[n_val:]), sorted(ordered[:n_val])


def _loss_fn(kind: str):
    bce = torch.nn.functional.binary_cross_entropy_with_logits

    def dice(logits, target):
        probs = torch.sigmoid(logits)
        num = 2.0 * (probs * target).sum() + 1.0
        den = probs.sum() + target.sum() + 1.0
        return 1.0 - num / den

    if kind == "bce":
        return bce
    if kind == "dice":
        return dice
    return lambda logits, target: bce(logits, target) + dice(logits, target)


def _batch_tensors(records, masks, batch):
    xs = np.stack([records[i].pixels for i in batch])[:, None, :, :]
    ys = np.stack([masks[i] for i in batch]).astype(np.float32)[:, None, :, :]
    return torch.from_numpy(xs), torch.from_numpy(ys)


def _evaluate(module, loss_fn, records, masks, ids, batch_size):
    module.eval()
    losses, accs = [], []
    with torch.no_grad():
        for start in range(0, len(ids), batch_size):
            batch = ids[start : start + batch_size]
            x, y = _batch_tensors(records, masks, batch)
            logits = module.logits(x)
            losses.append(float(loss_fn(logits, y)))
            accs.append(float(((logits > 0) == (y > 0.5)).float().mean()))
    return float(np.mean(losses)), float(np.mean(accs))


def train_fold(
    model_spec: ModelSpec,
    records: list[ImageRecord],
    fold_plan: FoldPlan,
    fold_id: int,
    cfg: TrainConfig,
    out_dir,
) -> tuple[list[Path], list[EpochMetrics]]:
    """Train one fold, writing a checkpoint per epoch plus a fold manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {r.image_id: r for r in records}
    for rec in records:
        if rec.dim != model_spec.input_dim:
            raise ValueError(
                f"{rec.image_id}: record dim {rec.dim} != model input {model_spec.input_dim}"
            )
    test_ids = set(fold_plan.fold_ids(fold_id))
    train_ids, val_ids = validation_split(
        [i for i in fold_plan.train_ids(fold_id) if i in by_id], cfg, fold_id
    )
    masks = {
        i: synthesize_nodule_mask(by_id[i].annotation, model_spec.input_dim)
        for i in train_ids + val_ids
    }

    torch.manual_seed(cfg.seed + fold_id)
    handle = build(model_spec, seed=cfg.seed + fold_id)
    module = handle.module
    loss_fn = _loss_fn(cfg.loss)
    if cfg.optimizer == "adam":
        optimizer = torch.optim.Adam(module.parameters(), lr=cfg.learning_rate)
    else:
        optimizer = torch.optim.SGD(module.parameters(), lr=cfg.learning_rate)
    batch_size = cfg.resolved_batch_size(model_spec.input_dim)
    shuffler = random.Random(f"{cfg.seed}:{fold_id}:batches")

    checkpoints: list[Path] = []
    metrics: list[EpochMetrics] = []
    for epoch in range(1, cfg.max_epochs + 1):
        module.train()
        order = list(train_ids)
        shuffler.shuffle(order)
        batch_losses, batch_accs = [], []
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            x, y = _batch_tensors(by_id, masks, batch)
            optimizer.zero_grad()
            logits = module.logits(x)
            loss = loss_fn(logits, y)
            value = float(loss)
            if not math.isfinite(value):
                raise NonFiniteLoss(
                    f"fold {fold_id} epoch {epoch}: loss={value} on batch starting {batch[0]}"
                )
            loss.backward()
            optimizer.step()
            batch_losses.append(value)
            with torch.no_grad():
                batch_accs.append(float(((logits > 0) == (y > 0.5)).float().mean()))
        val_loss, val_acc = _evaluate(module, loss_fn, by_id, masks, val_ids, batch_size)
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=float(np.mean(batch_losses)),
                val_loss=val_loss,
                train_acc=float(np.mean(batch_accs)),
                val_acc=val_acc,
            )
        )
        ckpt = out_dir / checkpoint_name(epoch)
        save_checkpoint(ModelHandle(spec=model_spec, module=module), ckpt)
        checkpoints.append(ckpt)

    selected = select_optimal_epoch(metrics)
    manifest = {
        "spec": model_spec.to_dict(),
        "train_config": asdict(cfg),
        "fold": fold_id,
        "train_ids": train_ids,
        "val_ids": val_ids,
        "test_ids": sorted(test_ids),
        "checkpoints": [c.name for c in checkpoints],
        "selected_epoch": selected,
        "epochs": [asdict(m) for m in metrics],
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    return checkpoints, metrics


def select_optimal_epoch(metrics: list[EpochMetrics]) -> int:
    """Centered 3-epoch moving-average minimum of validation loss.

    The argmin is taken over epochs 2..max-1 so the neighbouring epochs
    always exist; ties break toward the earlier epoch.
    """
    if len(metrics) < 3:
        raise InsufficientHistory(f"need >= 3 epochs, got {len(metrics)}")
    ordered = sorted(metrics, key=lambda m: m.epoch)
    losses = [m.val_loss for m in ordered]
    best_epoch, best_avg = None, None
    for i in range(1, len(losses) - 1):
        avg = (losses[i - 1] + losses[i] + losses[i + 1]) / 3.0
        if best_avg is None or avg < best_avg:
            best_avg = avg
            best_epoch = ordered[i].epoch
    return best_epoch


# ---------------------------------------------------------------------------
# experiment matrix


@dataclass(frozen=True)
class MatrixCell:
    """One training unit: a (model, resolution, variant, category, fold) tuple."""

    exp_key: str
    model_spec: ModelSpec
    variant: str
    category: str
    fold_id: int

    @property
    def cell_key(self) -> str:
        return f"{self.exp_key}/fold{self.fold_id}"


def cell_config_hash(cell: MatrixCell, cfg: TrainConfig, image_ids: list[str]) -> str:
    payload = {
        "spec": cell.model_spec.to_dict(),
        "variant": cell.variant,
        "category": cell.category,
        "fold": cell.fold_id,
        "train_config": asdict(cfg),
        "ids": sorted(image_ids),
    }
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True).encode("utf-8")
    ).hexdigest()


def _load_manifest(path: Path) -> dict:
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return {"cells": {}}


def _cell_complete(entry: dict, out_root: Path, expected_hash: str) -> bool:
    if entry.get("config_hash") != expected_hash:
        return False
    cell_dir = out_root / entry["dir"]
    return all((cell_dir / name).exists() for name in entry.get("checkpoints", []))


def run_matrix(
    cells: list[MatrixCell],
    provider,
    cfg: TrainConfig,
    out_root,
    folds: int = 10,
    resume: bool = True,
    log=print,
) -> dict:
    """Train every cell, resuming completed ones, and persist a manifest.

    ``provider(cell)`` returns the preprocessed records for the cell's
    resolution/variant/category. Fold plans are derived from the sorted ids
    and the config seed only, so plans agree across variants. Per-cell
    failures are collected; the rest of the matrix still runs and a
    PartialFailure listing the failed cells is raised at the end.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    manifest_path = out_root / "manifest.json"
    manifest = _load_manifest(manifest_path)
    failures: dict[str, str] = {}

    for cell in sorted(cells, key=lambda c: c.cell_key):
        try:
            records = provider(cell)
            ids = sorted(r.image_id for r in records)
            expected_hash = cell_config_hash(cell, cfg, ids)
            entry = manifest["cells"].get(cell.cell_key)
            if resume and entry and _cell_complete(entry, out_root, expected_hash):
                log(f"[skip] {cell.cell_key} (up to date)")
                continue
            plan = make_folds(ids, k=folds, seed=cfg.seed)
            test_ids = set(plan.fold_ids(cell.fold_id))
            assert not test_ids & set(plan.train_ids(cell.fold_id)), "fold leakage"
            cell_dir = out_root / cell.exp_key / f"fold{cell.fold_id}"
            log(f"[train] {cell.cell_key} ({len(ids)} images)")
            checkpoints, metrics = train_fold(
                cell.model_spec, records, plan, cell.fold_id, cfg, cell_dir
            )
            manifest["cells"][cell.cell_key] = {
                "exp": cell.exp_key,
                "fold": cell.fold_id,
                "dir": str(cell_dir.relative_to(out_root)),
                "config_hash": expected_hash,
                "variant": cell.variant,
                "category": cell.category,
                "spec": cell.model_spec.to_dict(),
                "checkpoints": [c.name for c in checkpoints],
                "selected_epoch": select_optimal_epoch(metrics),
                "test_ids": sorted(test_ids),
                "final_val_loss": metrics[-1].val_loss,
            }
            manifest_path.write_text(
                json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
            )
        except Exception as exc:  # noqa: BLE001 - collected into PartialFailure
            if isinstance(exc, KeyboardInterrupt):
                raise
            failures[cell.cell_key] = f"{type(exc).__name__}: {exc}"
            log(f"[fail] {cell.cell_key}: {failures[cell.cell_key]}")

    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    if failures:
        raise PartialFailure(failures)
    return manifest
