"""Gaussian-mechanism calibration for (epsilon, delta)-differential privacy.

Each agent publishes a noisy copy of its output; the noise scale is calibrated
from the privacy budget and the output map's l2 sensitivity, for which
``|c| * nu`` is an upper bound when outputs are a scalar multiple of the state
and adjacency is an l2 ball of radius ``nu`` around the true trajectory.

The calibrated standard deviation is

    sigma = (Delta / (2 eps)) * (k + sqrt(k^2 + 2 eps)),   k = Qinv(delta),

where Q is the upper tail of the standard normal distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class PrivacyError(Exception):
    pass


@dataclass(frozen=True)
class PrivacyParams:
    """Privacy budget (epsilon, delta) and adjacency radius nu."""

    epsilon: float
    delta: float
    nu: float

    def __post_init__(self):
        if self.epsilon <= 0:
            raise PrivacyError(f"epsilon must be positive, got {self.epsilon}")
        if not (0.0 < self.delta < 0.5):
            raise PrivacyError(f"delta must lie in (0, 0.5), got {self.delta}")
        if self.nu < 0:
            raise PrivacyError(f"adjacency radius must be non-negative, got {self.nu}")


@dataclass(frozen=True)
class NoiseSpec:
    """Calibrated noise scale together with the sensitivity it covers."""

    sigma: float
    sensitivity: float

    def __post_init__(self):
        if self.sigma < 0 or self.sensitivity < 0:
            raise PrivacyError("sigma and sensitivity must be non-negative")


def q_function(y: float) -> float:
    """Upper tail of the standard normal: (1/sqrt(2 pi)) * integral_y^inf e^{-z^2/2} dz.

    Evaluated through the complementary error function; absolute error is far
    below 1e-12 over the IEEE double range.
    """
    return 0.5 * math.erfc(y / math.sqrt(2.0))


def q_inverse(delta: float, tol: float = 1e-10) -> float:
    """Inverse of :func:`q_function` by bisection on a bracketing interval."""
    if not (0.0 < delta < 1.0):
        raise PrivacyError(f"q_inverse needs an argument in (0, 1), got {delta}")
    lo, hi = -40.0, 40.0  # q(40) underflows well past any delta in (0,1)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if q_function(mid) > delta:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sensitivity_upper(c_gain: float, nu: float) -> float:
    """l2 sensitivity bound |c| * nu of a scalar output map under l2 adjacency."""
    if nu < 0:
        raise PrivacyError("adjacency radius must be non-negative")
    return abs(c_gain) * nu


def calibrate_sigma(sensitivity: float, params: PrivacyParams) -> NoiseSpec:
    """Minimal Gaussian scale achieving (epsilon, delta) privacy for the
    given sensitivity."""
    if sensitivity < 0:
        raise PrivacyError("sensitivity must be non-negative")
    if sensitivity == 0.0:
        return NoiseSpec(0.0, 0.0)
    kappa = q_inverse(params.delta)
    sigma = sensitivity / (2.0 * params.epsilon) * (
        kappa + math.sqrt(kappa * kappa + 2.0 * params.epsilon)
    )
    return NoiseSpec(sigma, sensitivity)


def gaussian_mechanism(y, spec: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Return ``y`` plus i.i.d. Normal(0, sigma^2) noise per coordinate.

    Deterministic for a fixed generator state (numpy's ziggurat sampler).
    """
    out = np.asarray(y, dtype=float)
    if not math.isfinite(spec.sigma):
        raise PrivacyError("noise scale must be finite")
    if spec.sigma == 0.0:
        return out.copy()
    return out + rng.normal(0.0, spec.sigma, size=out.shape)


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Independent deterministic random stream for (master seed, *path).

    The path convention is (run index, agent id, stream id); streams with
    different paths are statistically independent and stable across runs.
    """
    return np.random.default_rng(np.random.SeedSequence((int(master_seed),) + tuple(int(p) for p in path)))


# named stream ids for substream derivation
STREAM_NOISE = 0
STREAM_SCHEDULER = 1
STREAM_PRIVACY_DRAW = 2
