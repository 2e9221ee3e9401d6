"""Physics decoders: the DKI and VERDICT forward models written on autodiff tensors."""

from __future__ import annotations

import numpy as np

from .. import models
from ..models import FixedDiffusivities
from ..protocol import GAMMA_MS_UM_PER_MT_M, AcquisitionProtocol
from . import autodiff as ad


def normalize_fractions(f_ic: ad.Tensor, f_ees: ad.Tensor):
    scale = ad.maximum(f_ic + f_ees, 1.0)
    g_ic = f_ic / scale
    g_ees = f_ees / scale
    return g_ic, g_ees, 1.0 - g_ic - g_ees


def dki_decode(theta: ad.Tensor, protocol: AcquisitionProtocol) -> ad.Tensor:
    b = protocol.b_array[None, :]
    dk = theta[:, 0:1]
    k = theta[:, 1:2]
    return ad.exp(dk * (-b) + dk * dk * k * (b * b / 6.0))


def verdict_decode(theta: ad.Tensor, protocol: AcquisitionProtocol,
                   fixed: FixedDiffusivities = FixedDiffusivities(),
                   n_roots: int = models.DEFAULT_N_ROOTS) -> ad.Tensor:
    b = protocol.b_array[None, :]
    q2 = (GAMMA_MS_UM_PER_MT_M * protocol.gradients[None, :]) ** 2
    lam = models.sphere_roots(n_roots)[None, :]
    dl, Dl = protocol.timing.delta_ms, protocol.timing.Delta_ms
    d = fixed.d_ic

    f_ic, f_ees, f_vasc = normalize_fractions(theta[:, 0:1], theta[:, 1:2])
    r = theta[:, 2:3]
    d_ees = theta[:, 3:4]

    a = ad.div(lam, r)
    x = a * a * d
    num = (x * (2.0 * dl) - 2.0 + 2.0 * ad.exp(x * -dl) + 2.0 * ad.exp(x * -Dl)
           - ad.exp(x * -(Dl - dl)) - ad.exp(x * -(Dl + dl)))
    denom = ad.power(a, 6) * (d * d * (lam * lam - 2.0))
    gsum = ad.tsum(num / denom, axis=1, keepdims=True)
    s_ic = ad.exp(gsum * (-2.0 * q2))
    s_ees = ad.exp(d_ees * (-b))
    s_vasc = models.astrosticks_signal(fixed.d_vasc, protocol.b_array)[None, :]
    return f_ic * s_ic + f_ees * s_ees + f_vasc * s_vasc


def decode(model: str, theta, protocol: AcquisitionProtocol,
           fixed: FixedDiffusivities = FixedDiffusivities()) -> ad.Tensor:
    theta = ad.as_tensor(theta)
    if models._check_model(model) == models.DKI:
        return dki_decode(theta, protocol)
    return verdict_decode(theta, protocol, fixed)


def reconstruction_loss(pred: ad.Tensor, target) -> ad.Tensor:
    diff = pred - np.asarray(target, dtype=float)
    return ad.mean(diff * diff)
