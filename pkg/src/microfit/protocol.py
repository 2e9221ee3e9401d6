"""Acquisition protocols and pulsed-gradient spin-echo b-value physics.

Units used across the package: b in ms/um^2, diffusivity in um^2/ms, time in
ms, radius in um, gradient amplitude in mT/m. SI conversion happens only here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# proton gyromagnetic ratio, rad s^-1 T^-1
GAMMA = 2.6752218744e8

# gamma * G expressed in rad / (ms um) for G in mT/m
GAMMA_MS_UM_PER_MT_M = GAMMA * 1e-3 * 1e-3 * 1e-6

NOMINAL_B_VALUES = (0.0, 0.05, 0.5, 1.5, 2.0, 3.0)

# tolerance on the b-achievability check, ms/um^2
_B_SLACK = 1e-9


class ProtocolError(ValueError):
    """Raised for inconsistent timing or protocol definitions."""


@dataclass(frozen=True)
class PulseTiming:
    delta_ms: float
    Delta_ms: float
    te_ms: float

    def __post_init__(self):
        if not (self.delta_ms > 0 and self.delta_ms <= self.Delta_ms):
            raise ProtocolError(
                f"need 0 < delta <= Delta, got delta={self.delta_ms}, Delta={self.Delta_ms}"
            )
        if self.Delta_ms + self.delta_ms > self.te_ms:
            raise ProtocolError(
                f"need Delta + delta <= TE, got {self.Delta_ms} + {self.delta_ms} > {self.te_ms}"
            )


def b_from_gradient(g_mT_m, timing: PulseTiming):
    """Return the PGSE b-value gamma^2 G^2 delta^2 (Delta - delta/3) in ms/um^2.

    Accepts scalars or arrays for ``g_mT_m``.
    """
    if not isinstance(timing, PulseTiming):
        raise ProtocolError("timing must be a PulseTiming")
    g = np.asarray(g_mT_m, dtype=float)
    if np.any(g < 0):
        raise ProtocolError("gradient amplitude must be non-negative")
    q = GAMMA_MS_UM_PER_MT_M * g * timing.delta_ms
    b = q * q * (timing.Delta_ms - timing.delta_ms / 3.0)
    return float(b) if b.ndim == 0 else b


def gradient_for_b(b, timing: PulseTiming):
    """Inverse of :func:`b_from_gradient` at fixed timing."""
    if not isinstance(timing, PulseTiming):
        raise ProtocolError("timing must be a PulseTiming")
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        raise ProtocolError("b-value must be non-negative")
    eff = timing.Delta_ms - timing.delta_ms / 3.0
    g = np.sqrt(b / eff) / (GAMMA_MS_UM_PER_MT_M * timing.delta_ms)
    return float(g) if g.ndim == 0 else g


@dataclass(frozen=True)
class AcquisitionProtocol:
    name: str
    b_values: tuple
    timing: PulseTiming
    g_max_mT_m: float
    directions_per_shell: int = 15

    def __post_init__(self):
        b = tuple(float(x) for x in self.b_values)
        object.__setattr__(self, "b_values", b)
        if len(b) == 0 or b[0] != 0.0:
            raise ProtocolError("first b-value must be 0")
        if any(b2 <= b1 for b1, b2 in zip(b, b[1:])):
            raise ProtocolError("b-values must be strictly increasing")
        if self.directions_per_shell < 1:
            raise ProtocolError("directions_per_shell must be >= 1")
        b_max = b_from_gradient(self.g_max_mT_m, self.timing)
        if b[-1] > b_max + _B_SLACK:
            raise ProtocolError(
                f"{self.name}: b={b[-1]} not achievable, max {b_max:.4f} at "
                f"{self.g_max_mT_m} mT/m"
            )

    @property
    def n_shells(self) -> int:
        return len(self.b_values)

    @property
    def b_array(self) -> np.ndarray:
        return np.asarray(self.b_values, dtype=float)

    @property
    def gradients(self) -> np.ndarray:
        """Per-shell gradient amplitude (mT/m), realized by down-scaling at fixed timing."""
        return gradient_for_b(self.b_array, self.timing)

    @property
    def b_max_achievable(self) -> float:
        return b_from_gradient(self.g_max_mT_m, self.timing)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "b_values": list(self.b_values),
            "directions_per_shell": self.directions_per_shell,
            "delta_ms": self.timing.delta_ms,
            "Delta_ms": self.timing.Delta_ms,
            "te_ms": self.timing.te_ms,
            "g_max_mT_m": self.g_max_mT_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionProtocol":
        try:
            timing = PulseTiming(float(d["delta_ms"]), float(d["Delta_ms"]), float(d["te_ms"]))
            return cls(
                name=str(d["name"]),
                b_values=tuple(d["b_values"]),
                timing=timing,
                g_max_mT_m=float(d["g_max_mT_m"]),
                directions_per_shell=int(d["directions_per_shell"]),
            )
        except KeyError as exc:
            raise ProtocolError(f"protocol document missing key {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AcquisitionProtocol":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "AcquisitionProtocol":
        return cls.from_json(Path(path).read_text())


# TE / delta / Delta and the gradient system each sub-protocol emulates
_PRESETS = {
    "SP1": (PulseTiming(delta_ms=5.0, Delta_ms=25.0, te_ms=54.0), 300.0),
    "SP2": (PulseTiming(delta_ms=16.0, Delta_ms=32.0, te_ms=70.0), 80.0),
    "SP3": (PulseTiming(delta_ms=26.0, Delta_ms=48.0, te_ms=95.0), 40.0),
}


def subprotocol(which) -> AcquisitionProtocol:
    """Return a preset by name ("SP1", "sp2") or number (1, 2, 3)."""
    key = f"SP{which}" if isinstance(which, int) else str(which).upper()
    if not key.startswith("SP"):
        key = "SP" + key
    if key not in _PRESETS:
        raise ProtocolError(f"unknown sub-protocol {which!r}; expected SP1, SP2 or SP3")
    timing, g_max = _PRESETS[key]
    return AcquisitionProtocol(
        name=key, b_values=NOMINAL_B_VALUES, timing=timing, g_max_mT_m=g_max,
        directions_per_shell=15,
    )


ALL_SUBPROTOCOLS = ("SP1", "SP2", "SP3")
