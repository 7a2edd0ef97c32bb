"""Shared independent oracles and small test utilities."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri


def truncnorm_inverse_cdf_samples(
    L: int, k: float, n: int, seed: int
) -> np.ndarray:
    """Inverse-CDF sampler for round(Normal((L-1)/2, (L*k)^2) truncated to [0, L-1]).

    Independent of the rejection-sampling path under test: uniform draws are
    pushed through the analytic truncated-normal quantile function built from
    the normal CDF/quantile pair, then rounded half-to-even like the
    implementation's documented rule.
    """
    mean = (L - 1) / 2.0
    std = L * k
    a = (0.0 - mean) / std
    b = ((L - 1) - mean) / std
    u = np.random.default_rng(seed).uniform(size=n)
    cdf_a, cdf_b = ndtr(a), ndtr(b)
    x = ndtri(cdf_a + u * (cdf_b - cdf_a)) * std + mean
    return np.round(x)  # numpy rounds half to even


def truncnorm_moments(L: int, k: float) -> tuple[float, float]:
    """Analytic (mean, std) of the continuous truncated normal (pre-rounding)."""
    mean = (L - 1) / 2.0
    std = L * k
    b = ((L - 1) - mean) / std  # symmetric bounds: a = -b
    z = ndtr(b) - ndtr(-b)
    phi_b = np.exp(-0.5 * b * b) / np.sqrt(2 * np.pi)
    var = std**2 * (1.0 - 2.0 * b * phi_b / z)
    return mean, float(np.sqrt(var))


class FixedNormalRng:
    """Generator stand-in whose normal() returns a scripted sequence.

    random() and integers() are also scripted so orientation/corner draws can
    be pinned in examples.
    """

    def __init__(self, normals=(), randoms=(), ints=()):
        self._normals = list(normals)
        self._randoms = list(randoms)
        self._ints = list(ints)

    def normal(self, loc=0.0, scale=1.0):
        return self._normals.pop(0)

    def random(self):
        return self._randoms.pop(0)

    def integers(self, *args, **kwargs):
        return self._ints.pop(0)


def param_checksum(module) -> bytes:
    """Stable digest of a torch module's parameters."""
    import hashlib

    digest = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.digest()
