"""Training loop: batched optimization of the full objective with a
seed-stable validation split and best-by-validation-COCO checkpointing."""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field as dataclass_field
from typing import Callable, List, Optional

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import DataError, NumericalError
from .losses import LossConfig, latent_stats, total_loss
from .metrics import coco
from .model import VhuNet
from .optim import AdamW


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 5
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    augment: bool = False

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class Sample:
    name: str
    clean: np.ndarray
    bias: np.ndarray
    corrupted: np.ndarray
    labels: Optional[np.ndarray] = None


@dataclass
class TrainResult:
    rows: List[dict] = dataclass_field(default_factory=list)
    best_epoch: int = 0
    best_val_coco: float = math.nan
    n_train: int = 0
    n_val: int = 0


def is_validation_name(name: str) -> bool:
    """Seed-stable ~10% split: bucket by md5 of the sample name."""
    digest = hashlib.md5(name.encode("utf-8")).hexdigest()
    return int(digest, 16) % 10 == 0


def normalize(image: np.ndarray):
    """Per-image min-max to [0,1]; returns (normalized, lo, hi)."""
    lo = float(image.min())
    hi = float(image.max())
    if hi <= lo:
        raise DataError("degenerate image: max intensity equals min")
    return (image - lo) / (hi - lo), lo, hi


def _sample_loss(model: VhuNet, sample: Sample, loss_cfg: LossConfig):
    # The net eats the min-max-normalized image (same view correct() feeds it)
    # but the reconstruction error lives in raw intensities: the minimizer of
    # MSE(corrupted * field, clean) is field = 1/bias pointwise, so the MSE
    # pulls toward the true inverse field instead of an offset-warped one.
    x_norm, _, _ = normalize(sample.corrupted)
    field, latent = model.forward_with_latent(Tensor(x_norm))
    corrected = Tensor(sample.corrupted) * field
    stats = latent_stats(latent)
    return total_loss(corrected, sample.clean, stats, field, loss_cfg)


def _dihedral(image: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Rotate by k quarter turns, then mirror horizontally when flip is set."""
    out = np.rot90(image, k, axes=(-2, -1))
    if flip:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def _batch_loss(model: VhuNet, raw: np.ndarray, clean: np.ndarray,
                loss_cfg: LossConfig):
    """One stacked graph for the whole batch; same objective as the mean of
    the per-sample losses (all images share one pixel count)."""
    xs = np.stack([normalize(r)[0] for r in raw])
    field, latent = model.forward_with_latent(Tensor(xs))
    corrected = Tensor(raw) * field
    stats = latent_stats(latent)
    return total_loss(corrected, clean, stats, field, loss_cfg)


def _val_coco(model: VhuNet, sample: Sample) -> float:
    x_norm, _, _ = normalize(sample.corrupted)
    with no_grad():
        field = model.forward(Tensor(x_norm))
    return coco(1.0 / field.data, sample.bias)


def evaluate_coco(model: VhuNet, samples, batch_size: int = 8) -> list:
    """COCO(1/estimated_field, true_bias) for each sample."""
    scores = []
    for pos in range(0, len(samples), batch_size):
        chunk = samples[pos:pos + batch_size]
        xs = np.stack([normalize(s.corrupted)[0] for s in chunk])
        with no_grad():
            fields = model.forward(Tensor(xs)).data
        for s, f in zip(chunk, fields):
            scores.append(coco(1.0 / f, s.bias))
    return scores


def train_model(model: VhuNet, samples: List[Sample], cfg: TrainConfig,
                loss_cfg: LossConfig,
                on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train in place; on return the model holds the parameters of the epoch
    with the best mean validation COCO (or of the final epoch when the name
    split yields no validation samples)."""
    cfg.validate()
    loss_cfg.validate()
    if not samples:
        raise DataError("training set is empty")

    train_set = [s for s in samples if not is_validation_name(s.name)]
    val_set = [s for s in samples if is_validation_name(s.name)]
    if not train_set:
        train_set, val_set = val_set, []

    result = TrainResult(n_train=len(train_set), n_val=len(val_set))
    if cfg.epochs == 0:
        return result

    params = model.named_parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    best_val = -math.inf
    best_params = None

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_set))
        sums = {"mse": 0.0, "kl": 0.0, "smooth": 0.0, "total": 0.0}
        try:
            for pos in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[pos:pos + cfg.batch_size]]
                raw = np.stack([s.corrupted for s in batch])
                clean = np.stack([s.clean for s in batch])
                if cfg.augment:
                    # Corrupted and clean transform together, so the pixelwise
                    # relation corrupted = clean * bias survives with the same
                    # (transformed) bias and the objective is unchanged.
                    ks = rng.integers(0, 4, size=len(batch))
                    fs = rng.integers(0, 2, size=len(batch))
                    raw = np.stack([_dihedral(a, int(k), bool(f))
                                    for a, k, f in zip(raw, ks, fs)])
                    clean = np.stack([_dihedral(a, int(k), bool(f))
                                      for a, k, f in zip(clean, ks, fs)])
                batch_loss, parts = _batch_loss(model, raw, clean, loss_cfg)
                for key in sums:
                    sums[key] += parts[key] * len(batch)
                opt.zero_grad()
                batch_loss.backward()
                opt.step()
        except NumericalError as e:
            raise NumericalError(f"training diverged at epoch {epoch}: {e}") from e

        row = {"epoch": epoch}
        for key in ("mse", "kl", "smooth", "total"):
            row[key] = sums[key] / len(train_set)
        if val_set:
            val_scores = evaluate_coco(model, val_set)
            val_mean = float(np.mean(val_scores))
            if val_mean > best_val:
                best_val = val_mean
                best_params = {n: p.data.copy() for n, p in params.items()}
                result.best_epoch = epoch
                result.best_val_coco = val_mean
            row["val_coco"] = val_mean
        row["wall_seconds"] = time.perf_counter() - started
        result.rows.append(row)
        if on_epoch is not None:
            on_epoch(row)

    if best_params is not None:
        for name, p in params.items():
            p.data = best_params[name]
    else:
        result.best_epoch = cfg.epochs
    return result
