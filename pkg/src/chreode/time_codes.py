"""Elapsed-time gate and the two time embeddings.

The potential branch reads a learnable Time2Vec code whose linear channel
is unbounded; the antisymmetric branch reads a fixed bank of bounded
low-frequency sinusoids. Elapsed times are divided by ``delta_scale``
before either code sees them.
"""

import math
from itertools import combinations

import numpy as np
import torch
from torch import nn

from .autodiff import DTYPE

FOURIER_PERIODS = (4.0, 8.0, 16.0, 32.0, 64.0, 128.0)
OMEGA_MAX = math.pi


def alpha_gate(delta, tau):
    """``1 - exp(-delta / tau)``; zero at ``delta == 0``, below one for all finite delta."""
    if torch.is_tensor(delta):
        if (delta < 0).any():
            raise ValueError("elapsed time delta must be nonnegative")
        return -torch.expm1(-delta / tau)
    delta = np.asarray(delta, dtype=float)
    if (delta < 0).any():
        raise ValueError("elapsed time delta must be nonnegative")
    if torch.is_tensor(tau):
        return -torch.expm1(-torch.as_tensor(delta, dtype=DTYPE) / tau)
    out = -np.expm1(-delta / tau)
    return float(out) if out.ndim == 0 else out


def _inv_softplus(y):
    return y + math.log(-math.expm1(-y))


class GateTau(nn.Module):
    """Positive gate constant stored as an unconstrained softplus preimage."""

    def __init__(self, tau_init):
        super().__init__()
        if not tau_init > 0:
            raise ValueError(f"tau_init must be positive, got {tau_init}")
        self.raw = nn.Parameter(torch.tensor(_inv_softplus(float(tau_init)), dtype=DTYPE))

    @property
    def tau(self):
        return nn.functional.softplus(self.raw)

    def forward(self, delta):
        return alpha_gate(delta, self.tau)


def time2vec(delta_norm, omega0, bias0, omega, bias):
    """``[omega0 * t + bias0, sin(omega_i * t + bias_i) ...]`` for each ``t``."""
    t = delta_norm.reshape(-1, 1)
    linear = omega0 * t + bias0
    periodic = torch.sin(t * omega + bias)
    return torch.cat([linear, periodic], dim=1)


class Time2Vec(nn.Module):
    """Learnable Time2Vec code with periodic frequencies bounded by ``pi``.

    The bound is enforced by ``omega = pi * tanh(omega_raw)``; the linear
    channel is left unbounded.
    """

    def __init__(self, n_periodic=8, generator=None):
        super().__init__()
        self.n_periodic = n_periodic
        self.omega0 = nn.Parameter(torch.ones((), dtype=DTYPE))
        self.bias0 = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.omega_raw = nn.Parameter(torch.randn(n_periodic, generator=generator, dtype=DTYPE))
        self.bias = nn.Parameter(
            torch.rand(n_periodic, generator=generator, dtype=DTYPE) * 2 * math.pi
        )

    @property
    def size(self):
        return self.n_periodic + 1

    @property
    def omega(self):
        return OMEGA_MAX * torch.tanh(self.omega_raw)

    def forward(self, delta_norm):
        return time2vec(delta_norm, self.omega0, self.bias0, self.omega, self.bias)


def fourier_bank(delta_norm, periods=FOURIER_PERIODS):
    """Interleaved ``(sin, cos)(2 pi t / p)`` over the fixed periods; shape ``(n, 12)``."""
    t = torch.as_tensor(delta_norm, dtype=DTYPE).reshape(-1, 1)
    phase = 2 * math.pi * t / torch.tensor(periods, dtype=DTYPE)
    return torch.stack([torch.sin(phase), torch.cos(phase)], dim=2).reshape(t.shape[0], -1)


class FourierBank(nn.Module):
    def __init__(self, periods=FOURIER_PERIODS):
        super().__init__()
        self.periods = tuple(periods)

    @property
    def size(self):
        return 2 * len(self.periods)

    def forward(self, delta_norm):
        return fourier_bank(delta_norm, self.periods)


def ordered_pair_deltas(times):
    return np.array([tj - ti for ti, tj in combinations(sorted(times), 2)], dtype=float)


def median_training_delta(times):
    """Median elapsed time over all ordered timepoint pairs ``i < j``."""
    deltas = ordered_pair_deltas(times)
    if deltas.size == 0:
        raise ValueError("need at least two timepoints")
    return float(np.median(deltas))


def delta_scale_from_tau(tau_init):
    return tau_init * math.log(2.0)
