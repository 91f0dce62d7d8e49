"""Fitness of a decoded (filters, kernel, lr) triple: ``1 - best validation DSC``."""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from .errors import SwsegError
from .train import TrainSettings, TrainResult, train
from .unet import UNetConfig, build

logger = logging.getLogger(__name__)


def config_from_decoded(decoded: Mapping[str, Any], depth: int) -> UNetConfig:
    return UNetConfig(
        filters=int(decoded["filters"]),
        kernel_size=int(decoded["kernel"]),
        learning_rate=float(decoded["lr"]),
        depth=depth,
    ).validate()


def fit(config: UNetConfig, train_data, val_data, settings: TrainSettings) -> TrainResult:
    """Build with weights seeded from ``settings.seed`` and train."""
    model = build(config, seed=[settings.seed, 0])
    return train(model, train_data, val_data, settings)


def unet_objective(
    decoded: Mapping[str, Any],
    train_data,
    val_data,
    settings: TrainSettings,
    depth: int = 3,
) -> Tuple[float, Dict[str, Any]]:
    """Train one candidate and return ``(fitness, info)``.

    ``info`` carries ``dsc_val`` (best epoch), ``dsc_val_final``, ``best_epoch``
    and the :class:`~swseg.train.TrainTrace`. A failed run scores +inf and
    records the error message instead.
    """
    try:
        result = fit(config_from_decoded(decoded, depth), train_data, val_data, settings)
    except (SwsegError, FloatingPointError) as exc:
        logger.warning("training failed for %s: %s", dict(decoded), exc)
        return math.inf, {"error": str(exc)}
    fitness = 1.0 - result.best_val_dsc
    return fitness, {
        "dsc_val": result.best_val_dsc,
        "dsc_val_final": result.final_val_dsc,
        "best_epoch": result.best_epoch,
        "trace": result.trace,
    }


@dataclass
class UNetObjective:
    """Picklable wrapper so :func:`~swseg.pso.optimize` can ship it to workers.

    Images are held as (N, 3, H, W) arrays and masks as (N, H, W).
    """

    train_images: np.ndarray
    train_masks: np.ndarray
    val_images: np.ndarray
    val_masks: np.ndarray
    settings: TrainSettings
    depth: int = 3

    @classmethod
    def from_datasets(cls, train_set, val_set, settings: TrainSettings, depth: int = 3) -> "UNetObjective":
        return cls(train_set.images(), train_set.masks(), val_set.images(), val_set.masks(), settings, depth)

    def __call__(self, decoded: Mapping[str, Any]) -> Tuple[float, Dict[str, Any]]:
        return unet_objective(
            decoded,
            (self.train_images, self.train_masks),
            (self.val_images, self.val_masks),
            self.settings,
            self.depth,
        )
