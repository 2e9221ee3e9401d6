"""Self-supervised training: Adam, learning-rate schedules and the hyperparameter grid."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import models
from ..models import FixedDiffusivities
from ..protocol import AcquisitionProtocol
from . import autodiff as ad
from .decoder import decode, reconstruction_loss
from .network import BASELINE, DENSE, Mlp, MlpSpec, build_mlp, encode

log = logging.getLogger(__name__)

# optimal (batch size, initial learning rate) of the dense encoders per sub-protocol
DENSE_OPTIMA = {
    (models.DKI, "SP1"): (64, 0.01),
    (models.DKI, "SP2"): (64, 0.01),
    (models.DKI, "SP3"): (128, 0.01),
    (models.VERDICT, "SP1"): (128, 0.01),
    (models.VERDICT, "SP2"): (256, 0.01),
    (models.VERDICT, "SP3"): (128, 0.01),
}

_EVAL_CHUNK = 8192


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class StepSchedule:
    factor: float = 0.1
    every_n_epochs: int = 10


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    lr0: float = 1e-3
    epochs: int = 60
    scheduler: StepSchedule | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def baseline(cls, model: str, seed: int = 0) -> "TrainConfig":
        epochs = 300 if models._check_model(model) == models.VERDICT else 60
        return cls(batch_size=256, lr0=1e-3, epochs=epochs, scheduler=None, seed=seed)

    @classmethod
    def dense(cls, model: str, sp: str = "SP1", seed: int = 0) -> "TrainConfig":
        batch, lr = DENSE_OPTIMA[(models._check_model(model), str(sp).upper())]
        return cls(batch_size=batch, lr0=lr, epochs=60, scheduler=StepSchedule(0.1, 10), seed=seed)

    @classmethod
    def preset(cls, arch: str, model: str, sp: str = "SP1", seed: int = 0) -> "TrainConfig":
        if arch == BASELINE:
            return cls.baseline(model, seed)
        if arch == DENSE:
            return cls.dense(model, sp, seed)
        raise ValueError(f"unknown architecture {arch!r}")

    def to_dict(self) -> dict:
        d = {"batch_size": self.batch_size, "lr0": self.lr0, "epochs": self.epochs, "seed": self.seed,
             "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "scheduler": None}
        if self.scheduler is not None:
            d["scheduler"] = {"type": "step", "factor": self.scheduler.factor,
                              "every_n_epochs": self.scheduler.every_n_epochs}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        sch = d.get("scheduler")
        scheduler = None if not sch else StepSchedule(float(sch["factor"]), int(sch["every_n_epochs"]))
        return cls(batch_size=int(d["batch_size"]), lr0=float(d["lr0"]), epochs=int(d["epochs"]),
                   scheduler=scheduler, seed=int(d.get("seed", 0)), beta1=float(d.get("beta1", 0.9)),
                   beta2=float(d.get("beta2", 0.999)), eps=float(d.get("eps", 1e-8)))


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if cfg.scheduler is None:
        return cfg.lr0
    return cfg.lr0 * cfg.scheduler.factor ** (epoch // cfg.scheduler.every_n_epochs)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, weights) -> "AdamState":
        return cls([np.zeros_like(w) for w in weights], [np.zeros_like(w) for w in weights], 0)


def adam_step(weights, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns new weights and state; inputs are not mutated."""
    if len(weights) != len(grads):
        raise ValueError("weights and grads differ in length")
    t = state.t + 1
    new_w, new_m, new_v = [], [], []
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for w, g, m, v in zip(weights, grads, state.m, state.v):
        if w.shape != g.shape:
            raise ValueError(f"shape mismatch {w.shape} vs {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_w.append(w - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_w, AdamState(new_m, new_v, t)


def loss_and_grads(net: Mlp, signals, protocol: AcquisitionProtocol, fixed=FixedDiffusivities(),
                   training=False, rng=None, weights=None):
    """Reconstruction MSE and its gradient with respect to every weight array."""
    ws = net.weights if weights is None else weights
    leaves = [ad.Tensor(w, requires_grad=True) for w in ws]
    latent = encode(net, signals, training=training, rng=rng, weights=leaves)
    loss = reconstruction_loss(decode(net.spec.model, latent, protocol, fixed), signals)
    loss.backward()
    grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]
    return float(loss.data), grads


def predict_params(net: Mlp, signals) -> np.ndarray:
    """Inference pass (dropout off). VERDICT fractions are returned after the shared rescaling."""
    signals = np.asarray(getattr(signals, "signals", signals), dtype=float)
    out = np.empty((signals.shape[0], net.spec.latent_width))
    for start in range(0, signals.shape[0], _EVAL_CHUNK):
        out[start:start + _EVAL_CHUNK] = encode(net, signals[start:start + _EVAL_CHUNK]).data
    if net.spec.model == models.VERDICT:
        (out[:, 0], out[:, 1], _), _ = models.normalize_fractions(out[:, 0], out[:, 1])
    return out


def reconstruct(net: Mlp, signals, protocol: AcquisitionProtocol, fixed=FixedDiffusivities()) -> np.ndarray:
    signals = np.asarray(getattr(signals, "signals", signals), dtype=float)
    out = np.empty_like(signals)
    for start in range(0, signals.shape[0], _EVAL_CHUNK):
        chunk = signals[start:start + _EVAL_CHUNK]
        out[start:start + _EVAL_CHUNK] = decode(net.spec.model, encode(net, chunk), protocol, fixed).data
    return out


def dataset_loss(net: Mlp, signals, protocol: AcquisitionProtocol, fixed=FixedDiffusivities()) -> float:
    signals = np.asarray(signals, dtype=float)
    rec = reconstruct(net, signals, protocol, fixed)
    return float(np.mean((rec - signals) ** 2))


@dataclass
class TrainResult:
    network: Mlp
    config: TrainConfig
    train_loss: list
    val_loss: list
    lrs: list
    best_epoch: int
    initial_train_loss: float
    initial_val_loss: float
    final_network: Mlp = field(repr=False, default=None)

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]

    @property
    def best_train_loss(self) -> float:
        return self.train_loss[self.best_epoch]


def train_ssl(spec: MlpSpec, cfg: TrainConfig, train_signals, val_signals, protocol: AcquisitionProtocol,
              fixed: FixedDiffusivities = FixedDiffusivities(), net: Mlp | None = None) -> TrainResult:
    """Train an encoder by reconstructing its own input through the physics decoder.

    Losses are recorded once per epoch over the full train and validation sets
    with dropout off. The returned network holds the weights of the epoch
    with the lowest validation loss (``best_epoch`` is 0-based).
    """
    train = np.asarray(getattr(train_signals, "signals", train_signals), dtype=float)
    val = np.asarray(getattr(val_signals, "signals", val_signals), dtype=float)
    if train.shape[1] != spec.input_width or val.shape[1] != spec.input_width:
        raise ValueError("signal width does not match the encoder input")
    net = build_mlp(spec, seed=cfg.seed) if net is None else net.copy()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    dropout_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    state = AdamState.zeros_like(net.weights)

    init_train = dataset_loss(net, train, protocol, fixed)
    init_val = dataset_loss(net, val, protocol, fixed)
    train_hist, val_hist, lrs = [], [], []
    best_val, best_epoch, best_weights = math.inf, 0, [w.copy() for w in net.weights]
    n = train.shape[0]
    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        lrs.append(lr)
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = train[order[start:start + cfg.batch_size]]
            loss, grads = loss_and_grads(net, batch, protocol, fixed, training=True, rng=dropout_rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            if lr != 0.0:
                net.weights, state = adam_step(net.weights, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
        tr = dataset_loss(net, train, protocol, fixed)
        va = dataset_loss(net, val, protocol, fixed)
        if not (math.isfinite(tr) and math.isfinite(va)):
            raise TrainingDiverged(epoch, tr if not math.isfinite(tr) else va)
        train_hist.append(tr)
        val_hist.append(va)
        if va < best_val:
            best_val, best_epoch = va, epoch
            best_weights = [w.copy() for w in net.weights]
        log.debug("epoch %d lr %.1e train %.3e val %.3e", epoch, lr, tr, va)
    final = net.copy()
    best = Mlp(spec, best_weights, net.bounds)
    return TrainResult(best, cfg, train_hist, val_hist, lrs, best_epoch, init_train, init_val, final)


@dataclass(frozen=True)
class GridSpec:
    batch_sizes: tuple
    lrs: tuple

    @classmethod
    def for_model(cls, model: str) -> "GridSpec":
        if models._check_model(model) == models.DKI:
            return cls((32, 64, 128, 256), (1e-4, 1e-3, 1e-2, 1e-1))
        return cls((64, 128, 256, 512), (1e-4, 1e-3, 1e-2, 1e-1))


@dataclass
class GridResult:
    best_batch_size: int
    best_lr: float
    val_loss: np.ndarray  # (len(batch_sizes), len(lrs)); +inf for diverged runs
    grid: GridSpec
    best_result: TrainResult | None


def grid_search(grid: GridSpec, spec: MlpSpec, base_cfg: TrainConfig, train_signals, val_signals,
                protocol: AcquisitionProtocol, fixed: FixedDiffusivities = FixedDiffusivities()) -> GridResult:
    """Full factorial search over batch size and initial learning rate.

    Ties on best validation loss go to the smaller batch, then the smaller lr.
    """
    table = np.full((len(grid.batch_sizes), len(grid.lrs)), np.inf)
    results = {}
    for (i, bs), (j, lr) in itertools.product(enumerate(grid.batch_sizes), enumerate(grid.lrs)):
        cfg = TrainConfig(bs, lr, base_cfg.epochs, base_cfg.scheduler, base_cfg.seed,
                          base_cfg.beta1, base_cfg.beta2, base_cfg.eps)
        try:
            res = train_ssl(spec, cfg, train_signals, val_signals, protocol, fixed)
        except TrainingDiverged as exc:
            log.info("grid cell batch=%d lr=%g diverged at epoch %d", bs, lr, exc.epoch)
            continue
        table[i, j] = res.best_val_loss
        results[(i, j)] = res
    cands = sorted(((table[i, j], grid.batch_sizes[i], grid.lrs[j], i, j)
                    for i in range(table.shape[0]) for j in range(table.shape[1])))
    _, bs, lr, i, j = cands[0]
    return GridResult(bs, lr, table, grid, results.get((i, j)))
