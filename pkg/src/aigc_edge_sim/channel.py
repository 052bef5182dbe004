"""Wireless link model: Nakagami-m small-scale fading, log-normal shadowing
with power-law path loss, SNR, weighted power split and BPSK bit error rate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, special

from .errors import InvalidArgument, NumericError

GH_ORDER = 32
QUAD_EPSABS = 1e-10

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite.hermgauss(GH_ORDER)


@dataclass(frozen=True)
class ChannelParams:
    m: float = 1.0
    psi: float = 1.0
    xi: float = 2.0
    sigma_s: float = 0.5
    n0: float = 1e-3
    p_total: float = 3.0

    def __post_init__(self) -> None:
        if self.m < 0.5:
            raise InvalidArgument(f"fading severity m must be >= 0.5, got {self.m}")
        for name in ("psi", "xi", "n0", "p_total"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.sigma_s < 0:
            raise InvalidArgument("sigma_s must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class UserLink:
    distance: float
    weight: float = 1.0
    shadowing: float = 0.0

    def __post_init__(self) -> None:
        if self.distance <= 0 or self.weight <= 0:
            raise InvalidArgument("distance and weight must be positive")


def sample_small_scale_gain(params: ChannelParams, rng: np.random.Generator, size=None):
    """Squared Nakagami-m envelope: Gamma(shape=m, scale=psi/m)."""
    return rng.gamma(params.m, params.psi / params.m, size=size)


def large_scale_gain(d, xi: float, sigma_s: float, z):
    if np.any(np.asarray(d) <= 0):
        raise InvalidArgument("distance must be positive")
    return np.power(d, -xi) * np.exp(sigma_s * np.asarray(z))


def instantaneous_snr(p, g, l, n0: float):
    if n0 <= 0:
        raise InvalidArgument("noise power must be positive")
    return np.asarray(p) * g * l / n0


def mean_snr(params: ChannelParams, p: float, d: float = 1.0, large_scale: bool = True) -> float:
    """Expected SNR ``P psi / N0``, optionally including path loss ``d^-xi``."""
    snr = p * params.psi / params.n0
    return snr * d ** (-params.xi) if large_scale else snr


def allocate_power(weights, p_total: float) -> np.ndarray:
    """Proportional split ``P_i = w_i P_total / sum(w)`` whose sum is exactly ``p_total``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InvalidArgument("weights must be a non-empty vector")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise InvalidArgument("all weights must be positive and finite")
    if p_total <= 0:
        raise InvalidArgument("p_total must be positive")
    p = w * p_total / w.sum()
    p[-1] = p_total - math.fsum(p[:-1])
    if p[-1] <= 0:
        # last entry vanished under rounding; fall back to the unclosed share
        p[-1] = w[-1] * p_total / w.sum()
    return p


def q_function(x):
    return 0.5 * special.erfc(np.asarray(x) / math.sqrt(2.0))


def ber_numeric(mean_snr: float, m: float) -> float:
    """BPSK error rate averaged over a Gamma-distributed SNR (shape ``m``, mean ``mean_snr``).

    The integral over SNR is rewritten in the unit-mean Gamma variable
    ``u = gamma * m / mean_snr`` and evaluated with adaptive Gauss-Kronrod.
    """
    if mean_snr < 0 or m < 0.5:
        raise InvalidArgument("need mean_snr >= 0 and m >= 0.5")
    if mean_snr == 0:
        return 0.5
    scale = mean_snr / m
    log_norm = -special.gammaln(m)

    def integrand(u: float) -> float:
        if u <= 0.0:
            return 0.0
        return 0.5 * math.erfc(math.sqrt(u * scale)) * math.exp((m - 1) * math.log(u) - u + log_norm)

    # Q(sqrt(2 gamma)) decays like exp(-u*scale); split there so the kernel stays resolved
    knee = min(max(20.0 / scale, 1e-12), 50.0 + 10.0 * m)
    total = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            for lo, hi in ((0.0, knee), (knee, math.inf)):
                val, _ = integrate.quad(integrand, lo, hi, epsabs=QUAD_EPSABS, epsrel=1e-10, limit=200)
                total += val
        except integrate.IntegrationWarning as exc:
            raise NumericError(f"BER quadrature did not converge (mean_snr={mean_snr}, m={m}): {exc}") from exc
    return min(max(total, 0.0), 0.5)


def ber_closed_paper(mean_snr: float, m: float) -> float:
    """The MGF-style closed form exactly as printed in the source model.

    Not clamped and not physical: it grows with ``mean_snr``. Kept only for
    side-by-side reporting; the simulator uses :func:`ber_numeric`.
    """
    if mean_snr < 0 or m < 0.5:
        raise InvalidArgument("need mean_snr >= 0 and m >= 0.5")
    front = math.exp(special.gammaln(m) - special.gammaln(m + 0.5)) / 2.0
    return front * (1.0 - math.sqrt(m / (m + mean_snr / 2.0))) ** m


PAPER_FORM_NOTE = (
    "ber_closed_paper reproduces the printed closed form verbatim; it increases with mean SNR "
    "and is therefore not used by the simulator (ber_numeric is the default BER path)."
)


def expected_ber_shadowed(params: ChannelParams, p: float, d: float) -> float:
    """BER averaged over small-scale fading and standard-normal shadowing.

    The shadowing expectation uses 32-point Gauss-Hermite with the Gaussian
    normalizer, so the result is a proper expectation in ``[0, 0.5]``.
    """
    if d <= 0:
        raise InvalidArgument("distance must be positive")
    if p < 0:
        raise InvalidArgument("power must be non-negative")
    return _expected_ber_cached(params, float(p), float(d))


@lru_cache(maxsize=65536)
def _expected_ber_cached(params: ChannelParams, p: float, d: float) -> float:
    if p == 0:
        return 0.5
    base = mean_snr(params, p, d, large_scale=True)
    if params.sigma_s == 0:
        return ber_numeric(base, params.m)
    vals = [ber_numeric(base * math.exp(params.sigma_s * math.sqrt(2.0) * x), params.m) for x in _GH_NODES]
    out = float(np.dot(_GH_WEIGHTS, vals) / math.sqrt(math.pi))
    return min(max(out, 0.0), 0.5)


def ber_table_rows(m_values, snr_db_values) -> list[tuple[float, float, float, float]]:
    rows = []
    for m in m_values:
        for db in snr_db_values:
            snr = 10.0 ** (db / 10.0)
            rows.append((float(m), float(db), ber_numeric(snr, m), ber_closed_paper(snr, m)))
    return rows
