"""Training loop, combined Dice + BCE loss, and the Adam optimizer."""

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor
from .unet import UNetModel

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


# -- losses --------------------------------------------------------------------


def _check_pair(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")


def dice_loss(pred, truth, smooth: float = 1e-6) -> float:
    """Soft Dice loss ``1 - (2 sum(p t) + s) / (sum p + sum t + s)``."""
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    _check_pair(pred, truth)
    inter = np.sum(pred * truth)
    total = np.sum(pred) + np.sum(truth)
    return float(1.0 - (2.0 * inter + smooth) / (total + smooth))


def dice_loss_grad(pred, truth, smooth: float = 1e-6) -> np.ndarray:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    _check_pair(pred, truth)
    num = 2.0 * np.sum(pred * truth) + smooth
    den = np.sum(pred) + np.sum(truth) + smooth
    return -(2.0 * truth * den - num) / den**2


def bce_loss(pred, truth) -> float:
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    _check_pair(pred, truth)
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return float(-np.mean(truth * np.log(p) + (1.0 - truth) * np.log1p(-p)))


def bce_loss_grad(pred, truth) -> np.ndarray:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    _check_pair(pred, truth)
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    g = (-truth / p + (1.0 - truth) / (1.0 - p)) / pred.size
    # The clamp is flat outside its range.
    inside = (pred >= BCE_CLAMP) & (pred <= 1.0 - BCE_CLAMP)
    return np.where(inside, g, 0.0)


def total_loss(pred, truth, alpha: float = 0.5, beta: float = 0.5, smooth: float = 1e-6) -> float:
    """``alpha * dice_loss + beta * bce_loss``."""
    value = 0.0
    if alpha:
        value += alpha * dice_loss(pred, truth, smooth)
    if beta:
        value += beta * bce_loss(pred, truth)
    return value


def total_loss_grad(pred, truth, alpha: float = 0.5, beta: float = 0.5, smooth: float = 1e-6):
    grad = np.zeros(np.shape(pred))
    if alpha:
        grad += alpha * dice_loss_grad(pred, truth, smooth)
    if beta:
        grad += beta * bce_loss_grad(pred, truth)
    return grad


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """Foreground where probability exceeds ``threshold``."""
    return np.asarray(prob) > threshold


def pooled_dsc(pred_mask: np.ndarray, truth: np.ndarray) -> float:
    """Set-based DSC over all pixels of a batch; 1.0 when both are empty."""
    p = np.asarray(pred_mask, bool)
    t = np.asarray(truth, bool)
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / denom)


# -- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Sequence[Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    grads: Optional[Sequence[np.ndarray]] = None,
) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Gradients come from ``grads`` if given, else from each tensor's ``.grad``.
    Moments are keyed by position in ``params``, so pass the same ordering
    on every call.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    if grads is None:
        grads = [p.grad for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# -- training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 50
    batch_size: int = 16
    alpha: float = 0.5
    beta: float = 0.5
    smooth: float = 1e-6
    seed: int = 0
    threshold: float = 0.5

    def validate(self) -> "TrainSettings":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError(f"need alpha, beta >= 0 with alpha + beta > 0, got {self.alpha}, {self.beta}")
        if self.smooth < 0:
            raise ConfigError(f"smooth must be >= 0, got {self.smooth}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_dsc: float
    val_dsc: float
    seconds: float


TRACE_FIELDS = ("epoch", "train_loss", "train_dsc", "val_dsc", "seconds")


@dataclass
class TrainTrace:
    epochs: List[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.epochs]

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_FIELDS)
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.train_dsc), repr(r.val_dsc), f"{r.seconds:.3f}"])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "TrainTrace":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            [
                EpochRecord(
                    int(r["epoch"]),
                    float(r["train_loss"]),
                    float(r["train_dsc"]),
                    float(r["val_dsc"]),
                    float(r["seconds"]),
                )
                for r in rows
            ]
        )


@dataclass
class TrainResult:
    model: UNetModel
    trace: TrainTrace
    best_val_dsc: float
    best_epoch: int

    @property
    def final_val_dsc(self) -> float:
        return self.trace.epochs[-1].val_dsc


def predict(model: UNetModel, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Inference-mode probability maps (N, 1, H, W)."""
    out = [model.forward(images[s : s + batch_size], "infer") for s in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate_dsc(model: UNetModel, images, masks, batch_size: int = 16, threshold: float = 0.5) -> float:
    probs = predict(model, images, batch_size)
    return pooled_dsc(binarize(probs[:, 0], threshold), masks)


def _arrays(data) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple):
        images, masks = data
    elif len(data) == 0:
        raise ConfigError("training and validation splits must both be non-empty")
    else:
        images, masks = data.images(), data.masks()
    return np.asarray(images, float), np.asarray(masks, float)


def train(model: UNetModel, train_data, val_data, settings: TrainSettings = TrainSettings()) -> TrainResult:
    """Fit ``model`` with Adam at ``model.config.learning_rate``.

    ``train_data`` and ``val_data`` are :class:`~swseg.data.Dataset` objects or
    ``(images, masks)`` tuples with images (N, C, H, W) and masks (N, H, W).
    Training order is reshuffled every epoch from ``settings.seed``. Train DSC
    is measured on the thresholded train-mode predictions seen during the
    epoch; validation DSC on thresholded inference-mode predictions.
    """
    settings.validate()
    x_tr, y_tr = _arrays(train_data)
    x_va, y_va = _arrays(val_data)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ConfigError("training and validation splits must both be non-empty")
    lr = model.config.learning_rate
    logger.info(
        "training f=%d k=%d lr=%.6g depth=%d epochs=%d batch=%d alpha=%g beta=%g seed=%d",
        model.config.filters, model.config.kernel_size, lr, model.config.depth,
        settings.epochs, settings.batch_size, settings.alpha, settings.beta, settings.seed,
    )
    params = [t for _, t in model.trainable()]
    state = AdamState()
    rng = np.random.default_rng([settings.seed, 1])
    trace = TrainTrace()
    best, best_epoch = -1.0, 0
    for epoch in range(1, settings.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(x_tr))
        loss_sum, inter, total = 0.0, 0.0, 0.0
        for b, s in enumerate(range(0, len(order), settings.batch_size)):
            idx = order[s : s + settings.batch_size]
            xb, yb = x_tr[idx], y_tr[idx][:, None]
            model.zero_grad()
            probs = model.forward(xb, "train")
            loss = total_loss(probs, yb, settings.alpha, settings.beta, settings.smooth)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            model.backward(total_loss_grad(probs, yb, settings.alpha, settings.beta, settings.smooth))
            adam_step(params, state, lr)
            loss_sum += loss * len(idx)
            hard = binarize(probs, settings.threshold)
            inter += np.logical_and(hard, yb > 0.5).sum()
            total += hard.sum() + (yb > 0.5).sum()
        train_dsc = 1.0 if total == 0 else 2.0 * inter / total
        val_dsc = evaluate_dsc(model, x_va, y_va, settings.batch_size, settings.threshold)
        rec = EpochRecord(epoch, loss_sum / len(order), float(train_dsc), val_dsc, time.perf_counter() - t0)
        if not all(np.isfinite([rec.train_loss, rec.train_dsc, rec.val_dsc])):
            raise NumericError(f"non-finite epoch summary at epoch {epoch}: {rec}")
        trace.epochs.append(rec)
        logger.debug("epoch %d loss %.4f train_dsc %.4f val_dsc %.4f", epoch, rec.train_loss, rec.train_dsc, val_dsc)
        if val_dsc > best:
            best, best_epoch = val_dsc, epoch
    return TrainResult(model, trace, best, best_epoch)
