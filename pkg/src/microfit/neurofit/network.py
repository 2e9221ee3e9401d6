"""MLP encoders mapping a normalized signal vector to bounded model parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import models
from ..models import ParamBounds
from . import autodiff as ad

SOFTPLUS_CLAMP = "softplus_clamp"
SIGMOID_SCALE = "sigmoid_scale"
OUTPUT_MAPS = (SOFTPLUS_CLAMP, SIGMOID_SCALE)

BASELINE = "baseline"
DENSE = "dense"

PRELU_INIT = 0.25

# latent values the untrained network is biased towards; interior points where
# both forward models are well behaved (DKI attenuates monotonically, f_ic + f_ees < 1)
LATENT_INIT = {models.DKI: (1.0, 1.0), models.VERDICT: (0.3, 0.5, 7.5, 1.75)}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    model: str
    hidden_widths: tuple
    output_map: str
    dropout_rate: float = 0.2
    input_width: int = 6
    arch: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "model", models._check_model(self.model))
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.output_map not in OUTPUT_MAPS:
            raise SpecError(f"unknown output map {self.output_map!r}")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise SpecError("hidden widths must be positive")
        if self.input_width < 1:
            raise SpecError("input width must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise SpecError("dropout rate must be in [0, 1)")

    @property
    def latent_width(self) -> int:
        return models.n_free_params(self.model)

    @property
    def widths(self) -> tuple:
        return (self.input_width,) + self.hidden_widths + (self.latent_width,)

    def n_params(self) -> int:
        """Weights + biases of every layer plus one PReLU slope per hidden layer."""
        w = self.widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:])) + len(self.hidden_widths)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "arch": self.arch,
            "hidden_widths": list(self.hidden_widths),
            "output_map": self.output_map,
            "dropout_rate": self.dropout_rate,
            "input_width": self.input_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(model=d["model"], hidden_widths=tuple(d["hidden_widths"]), output_map=d["output_map"],
                   dropout_rate=float(d["dropout_rate"]), input_width=int(d["input_width"]),
                   arch=d.get("arch", "custom"))

    @classmethod
    def baseline(cls, model: str) -> "MlpSpec":
        return cls(model, (10, 10, 10), SOFTPLUS_CLAMP, 0.2, arch=BASELINE)

    @classmethod
    def dense(cls, model: str) -> "MlpSpec":
        return cls(model, (32, 64, 128, 64, 32), SIGMOID_SCALE, 0.2, arch=DENSE)

    @classmethod
    def preset(cls, arch: str, model: str) -> "MlpSpec":
        if arch == BASELINE:
            return cls.baseline(model)
        if arch == DENSE:
            return cls.dense(model)
        raise SpecError(f"unknown architecture {arch!r}")


@dataclass
class Mlp:
    """Parameters live in ``weights`` as a flat list: per hidden layer (W, b, slope), then (W, b)."""

    spec: MlpSpec
    weights: list
    bounds: ParamBounds = field(default=None)

    def __post_init__(self):
        if self.bounds is None:
            self.bounds = models.default_bounds(self.spec.model)
        if len(self.bounds) != self.spec.latent_width:
            raise SpecError("bounds do not match latent width")
        expected = _weight_shapes(self.spec)
        got = [w.shape for w in self.weights]
        if got != expected:
            raise SpecError(f"weight shapes {got} do not match spec {expected}")

    @property
    def n_params(self) -> int:
        return int(sum(w.size for w in self.weights))

    def copy(self) -> "Mlp":
        return Mlp(self.spec, [w.copy() for w in self.weights], self.bounds)

    def flat(self) -> np.ndarray:
        return np.concatenate([w.ravel() for w in self.weights])

    def set_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise SpecError(f"expected {self.n_params} values, got {vec.size}")
        pos = 0
        for i, w in enumerate(self.weights):
            self.weights[i] = vec[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size


def _weight_shapes(spec: MlpSpec) -> list:
    shapes = []
    w = spec.widths
    for a, b in zip(w[:-2], w[1:-1]):
        shapes += [(a, b), (b,), (1,)]
    shapes += [(w[-2], w[-1]), (w[-1],)]
    return shapes


def _inverse_output_map(spec: MlpSpec, bounds: ParamBounds, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if spec.output_map == SOFTPLUS_CLAMP:
        return theta + np.log(-np.expm1(-theta))  # inverse softplus
    u = (theta - bounds.lo) / (bounds.hi - bounds.lo)
    return np.log(u) - np.log1p(-u)


def build_mlp(spec: MlpSpec, seed: int = 0, bounds: ParamBounds | None = None) -> Mlp:
    """Fan-in scaled uniform init U(+-1/sqrt(fan_in)), PReLU slopes at 0.25, zero hidden biases.

    The output bias is set so that a zero pre-activation maps to ``LATENT_INIT``.
    """
    rng = np.random.default_rng(seed)
    bounds = models.default_bounds(spec.model) if bounds is None else bounds
    weights = []
    for shape in _weight_shapes(spec):
        if len(shape) == 2:
            limit = 1.0 / np.sqrt(shape[0])
            weights.append(rng.uniform(-limit, limit, size=shape))
        elif shape == (1,):
            weights.append(np.full(shape, PRELU_INIT))
        else:
            weights.append(np.zeros(shape))
    start = np.clip(LATENT_INIT[spec.model], bounds.lo + 1e-3 * bounds.width, bounds.hi - 1e-3 * bounds.width)
    weights[-1] = _inverse_output_map(spec, bounds, start)
    return Mlp(spec, weights, bounds)


def encode(net: Mlp, signals, training: bool = False, rng: np.random.Generator | None = None,
           weights=None) -> ad.Tensor:
    """Map signals (N, 6) to latent parameters inside ``net.bounds``.

    ``weights`` overrides ``net.weights``; pass autodiff leaves to build a
    differentiable graph. Dropout is applied only when ``training`` is set.
    """
    ws = net.weights if weights is None else weights
    spec = net.spec
    h = ad.as_tensor(signals)
    n_hidden = len(spec.hidden_widths)
    for i in range(n_hidden):
        W, b, a = ws[3 * i], ws[3 * i + 1], ws[3 * i + 2]
        h = ad.prelu(h @ W + b, a)
    if training and spec.dropout_rate > 0:
        if rng is None:
            raise ValueError("training mode needs an rng for dropout")
        keep = (rng.random(h.shape) >= spec.dropout_rate) / (1.0 - spec.dropout_rate)
        h = h * keep
    z = h @ ws[-2] + ws[-1]
    lo, hi = net.bounds.lo, net.bounds.hi
    if spec.output_map == SOFTPLUS_CLAMP:
        return ad.clamp(ad.softplus(z), lo, hi)
    return ad.sigmoid(z) * (hi - lo) + lo
