"""Uniform power-of-two fixed-point formats and analytic quantization formulas.

A format is described by its predetermined dynamic range ``r`` and its
quantization step ``delta`` (the LSB value), both exact powers of two.

Precision conventions
---------------------
Unsigned formats cover ``[0, 2r - delta]`` and use ``log2(r/delta) + 1`` bits.

Signed formats come in two flavours selected by ``extended``:

* ``extended=True`` (default): range ``[-2r, 2r - delta]``, ``log2(r/delta) + 2``
  bits. The PDR ``r`` is the clipping threshold used by the gradient
  criteria and the extra bit is headroom above it.
* ``extended=False``: range ``[-r, r - delta]``, ``log2(r/delta) + 1`` bits.

Both conventions give exactly ``2**bits`` representable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, FormatError, NumericError

BERRY_ESSEEN_CONSTANT = 0.4785


def is_power_of_two(x: float) -> bool:
    """True when ``x`` is a positive finite float equal to ``2**k`` for an integer ``k``."""
    if not (isinstance(x, (int, float, np.floating)) and math.isfinite(x) and x > 0):
        return False
    return math.frexp(x)[0] == 0.5


def log2_exact(x: float) -> int:
    if not is_power_of_two(x):
        raise FormatError(f"{x!r} is not an exact power of 2")
    return math.frexp(x)[1] - 1


def ceil_pow2(bound: float) -> float:
    """Smallest power of two ``>= bound``."""
    if not (math.isfinite(bound) and bound > 0):
        raise DomainError(f"bound must be positive and finite, got {bound!r}")
    m, e = math.frexp(bound)
    return math.ldexp(1.0, e - 1) if m == 0.5 else math.ldexp(1.0, e)


def floor_pow2_strict(bound: float) -> float:
    """Largest power of two strictly ``< bound``."""
    if not (math.isfinite(bound) and bound > 0):
        raise DomainError(f"bound must be positive and finite, got {bound!r}")
    m, e = math.frexp(bound)
    # bound = m * 2**e with m in [0.5, 1)
    return math.ldexp(1.0, e - 2) if m == 0.5 else math.ldexp(1.0, e - 1)


def snap_pow2(x: float, rel_tol: float = 0.005) -> float:
    """Snap a rounded decimal (e.g. ``3.91e-3``) to its power-of-two neighbour.

    Raises :class:`FormatError` if no power of two lies within ``rel_tol``.
    """
    if not (math.isfinite(x) and x > 0):
        raise FormatError(f"cannot snap {x!r} to a power of 2")
    k = round(math.log2(x))
    p = math.ldexp(1.0, k)
    if abs(x / p - 1.0) > rel_tol:
        raise FormatError(f"{x!r} is not within {rel_tol:.1%} of a power of 2 (nearest {p!r})")
    return p


def precision_from_range(r: float, delta: float, signed: bool, extended: bool = True) -> int:
    """Bit count of the format with PDR ``r`` and step ``delta``."""
    kr = log2_exact(r)
    kd = log2_exact(delta)
    if kd > kr:
        raise DomainError(f"step {delta!r} exceeds range {r!r}")
    extra = 2 if (signed and extended) else 1
    return kr - kd + extra


@dataclass(frozen=True)
class QuantizerSpec:
    """One tensor's fixed-point format."""

    signed: bool
    bits: int
    r: float
    delta: float
    extended: bool = True

    def __post_init__(self):
        if self.bits < 1:
            raise DomainError(f"precision must be >= 1 bit, got {self.bits}")
        expected = precision_from_range(self.r, self.delta, self.signed, self.extended)
        if expected != self.bits:
            raise FormatError(
                f"bits={self.bits} inconsistent with r={self.r!r}, delta={self.delta!r} "
                f"(expected {expected})"
            )

    @classmethod
    def from_range(cls, r: float, delta: float, signed: bool, extended: bool = True) -> QuantizerSpec:
        return cls(signed, precision_from_range(r, delta, signed, extended), r, delta, extended)

    @classmethod
    def from_bits(cls, bits: int, r: float, signed: bool, extended: bool = True) -> QuantizerSpec:
        extra = 2 if (signed and extended) else 1
        kr = log2_exact(r)
        if bits < extra:
            raise DomainError(f"{bits}-bit format cannot hold range {r!r} (needs >= {extra} bits)")
        return cls(signed, bits, r, math.ldexp(1.0, kr - (bits - extra)), extended)

    @property
    def lo(self) -> float:
        if not self.signed:
            return 0.0
        return -2.0 * self.r if self.extended else -self.r

    @property
    def hi(self) -> float:
        if not self.signed:
            return 2.0 * self.r - self.delta
        return (2.0 * self.r if self.extended else self.r) - self.delta

    @property
    def levels(self) -> int:
        return 2 ** self.bits

    def grid(self) -> np.ndarray:
        """Every representable value, ascending. Only sensible for small formats."""
        return self.lo + self.delta * np.arange(self.levels, dtype=np.float64)

    def with_bits(self, bits: int) -> QuantizerSpec:
        """Same PDR, different precision (the step moves with the bit count)."""
        return QuantizerSpec.from_bits(bits, self.r, self.signed, self.extended)


@dataclass(frozen=True)
class ClippingReport:
    clip_rate: float
    clipped_count: int
    total_count: int


def quantize(x, q: QuantizerSpec):
    """Round to the nearest grid value (ties away from zero), saturating at the range ends.

    Accepts a scalar or an array; returns the same kind.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("cannot quantize non-finite values")
    # delta is a power of two so scaling is exact
    k = np.floor(np.abs(arr) / q.delta + 0.5)
    out = np.clip(np.copysign(k, arr) * q.delta, q.lo, q.hi)
    # normalise -0.0
    out = out + 0.0
    if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
        return float(out)
    return out


def quantization_noise_variance(delta: float) -> float:
    return delta * delta / 12.0


def measure_clipping_rate(samples, r: float) -> ClippingReport:
    """Empirical clipping rate; the boundary ``|t| == r`` counts as clipped."""
    arr = np.asarray(samples, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DomainError("clipping rate of an empty sample set is undefined")
    clipped = int(np.count_nonzero(np.abs(arr) >= r))
    return ClippingReport(clipped / arr.size, clipped, int(arr.size))


def q_function(x: float) -> float:
    """Standard Gaussian tail probability Pr(N(0,1) > x)."""
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def _q_difference(a: float, b: float) -> float:
    """Q(a) - Q(b) for 0 <= a <= b without cancellation on either tail."""
    s = math.sqrt(2.0)
    if a < 1.0:
        return 0.5 * (math.erf(b / s) - math.erf(a / s))
    return 0.5 * (math.erfc(a / s) - math.erfc(b / s))


def gaussian_clipping_rate(r: float, sigma: float) -> float:
    """Clipping rate ``2 Q(r / sigma)`` of a zero-mean Gaussian tensor."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    if math.isinf(r):
        return 0.0
    return 2.0 * q_function(r / sigma)


def first_level_mean_gaussian(delta: float, sigma: float) -> float:
    """E[x | x in [delta/2, 3 delta/2]] for x ~ N(0, sigma^2)."""
    if not (delta > 0 and sigma > 0):
        raise DomainError(f"delta and sigma must be positive, got {delta!r}, {sigma!r}")
    u = delta / sigma
    lo, hi = u * u / 8.0, 9.0 * u * u / 8.0
    # exp(-lo) - exp(-hi), stable for small u
    num = -math.exp(-lo) * math.expm1(-(hi - lo))
    den = _q_difference(u / 2.0, 1.5 * u)
    if not (den > 0 and num > 0 and math.isfinite(num / den)):
        raise NumericError(
            f"first-level conditional mean is degenerate at delta/sigma={u:g}: "
            f"Gaussian mass in [delta/2, 3 delta/2] underflows ({den:g})"
        )
    return sigma * num / (den * math.sqrt(2.0 * math.pi))


def relative_quantization_bias_gaussian(delta: float, sigma: float) -> float:
    """Relative offset ``|delta - mu| / mu`` of the first quantization level."""
    mu = first_level_mean_gaussian(delta, sigma)
    return abs(delta - mu) / mu


def berry_esseen_bound(rho: float, sigma: float, n: int) -> float:
    """Worst-case Kolmogorov-Smirnov distance of an n-sample mean from its Gaussian limit."""
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    return BERRY_ESSEEN_CONSTANT * rho / (math.sqrt(n) * sigma**3)
