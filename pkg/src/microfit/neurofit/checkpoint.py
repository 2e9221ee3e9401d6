"""Network checkpoints: JSON header (spec, config, epoch, losses) + float32 weight blob."""

from __future__ import annotations

import numpy as np

from .. import models
from ..models import ParamBounds
from ..pipeline import read_container, write_container
from .network import Mlp, MlpSpec
from .training import TrainConfig, TrainResult


def save_checkpoint(path, net: Mlp, config: TrainConfig | None = None, result: TrainResult | None = None,
                    extra: dict | None = None) -> None:
    header = {
        "spec": net.spec.to_dict(),
        "bounds": {"names": list(net.bounds.names), "lower": net.bounds.lo.tolist(), "upper": net.bounds.hi.tolist()},
        "config": None if config is None else config.to_dict(),
        "epoch": None if result is None else int(result.best_epoch),
        "train_loss": [] if result is None else [float(v) for v in result.train_loss],
        "val_loss": [] if result is None else [float(v) for v in result.val_loss],
        "n_params": net.n_params,
    }
    header.update(extra or {})
    write_container(path, "checkpoint", header, {f"w{i}": w for i, w in enumerate(net.weights)})


def load_checkpoint(path) -> tuple[Mlp, dict]:
    _, header, arrays = read_container(path, "checkpoint")
    spec = MlpSpec.from_dict(header["spec"])
    b = header.get("bounds")
    if b is None:
        bounds = models.default_bounds(spec.model)
    else:
        bounds = ParamBounds(tuple(b["names"]), tuple(b["lower"]), tuple(b["upper"]))
    weights = [arrays[f"w{i}"] for i in range(len(arrays))]
    return Mlp(spec, weights, bounds), header
