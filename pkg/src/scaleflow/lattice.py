"""Periodic lattice geometry, spectral operators and noise.

Conventions used throughout the package (fixed here, once):

* The lattice is the periodic grid ``(eps * Z / n*eps*Z)^d`` with ``n`` a
  power of two.  Physical side length ``L = n * eps``.
* Mode wavenumbers are ``k_i = 2*pi*m_i / L`` with ``m_i`` in
  ``{-n/2, ..., n/2 - 1}`` (FFT ordering).
* Forward transform carries ``eps^d``, the inverse carries ``1/L^d``::

      fhat(k) = eps^d * sum_x f(x) exp(-i k.x)
      f(x)    = L^-d  * sum_k fhat(k) exp(+i k.x)

  so lattice symbols match continuum symbols as ``eps -> 0`` and Parseval
  reads ``eps^d sum_x f(x)^2 = L^-d sum_k |fhat(k)|^2``.
* The lattice delta is ``eps^-d`` times a Kronecker delta; white noise with
  covariance ``da * delta`` has per-site variance ``da / eps^d``.
* Inner product: ``<f, g> = eps^d sum_x f(x) g(x)``.  Operator traces are
  taken in this inner product; for a translation-invariant operator the
  trace equals the plain sum of its spectral coefficients.

Fields are plain ``numpy`` arrays of shape ``lattice.shape``; batched
operations accept leading ensemble axes ``(..., *lattice.shape)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft


class ValidationError(ValueError):
    """Invalid argument or incompatible lattice data."""


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class LatticeSpec:
    """Periodic d-dimensional grid: ``n`` sites per side, spacing ``eps``."""

    d: int
    n: int
    eps: float

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValidationError(f"dimension must be 1, 2 or 3, got {self.d}")
        if not isinstance(self.n, (int, np.integer)) or not _is_power_of_two(int(self.n)) or self.n < 2:
            raise ValidationError(f"sites per side must be a power of two >= 2, got {self.n}")
        if not (float(self.eps) > 0.0) or not np.isfinite(self.eps):
            raise ValidationError(f"lattice spacing must be positive, got {self.eps}")

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    @property
    def nsites(self) -> int:
        return self.n**self.d

    @property
    def length(self) -> float:
        return self.n * self.eps

    @property
    def volume(self) -> float:
        return self.length**self.d

    @property
    def cell(self) -> float:
        """Volume element eps^d."""
        return self.eps**self.d

    def axes(self) -> tuple:
        """FFT axes of a field array (the trailing d axes)."""
        return tuple(range(-self.d, 0))

    def wavenumbers(self) -> list:
        """Per-axis mode wavenumbers k_i = 2*pi*m_i/L, broadcastable grids."""
        k1 = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.eps)
        grids = np.meshgrid(*([k1] * self.d), indexing="ij")
        return grids

    def ksq(self) -> np.ndarray:
        """Continuum |k|^2 per mode."""
        return sum(k * k for k in self.wavenumbers())

    def khat_sq(self) -> np.ndarray:
        """Nearest-neighbour Laplacian symbol (4/eps^2) sum_i sin^2(k_i eps/2)."""
        out = np.zeros(self.shape)
        for k in self.wavenumbers():
            out = out + (4.0 / self.eps**2) * np.sin(0.5 * k * self.eps) ** 2
        return out

    def coordinates(self) -> list:
        """Per-axis site coordinates x_i = eps * j_i."""
        x1 = self.eps * np.arange(self.n)
        return np.meshgrid(*([x1] * self.d), indexing="ij")

    def min_image(self, delta: np.ndarray) -> np.ndarray:
        """Reduce coordinate differences to the fundamental domain [-L/2, L/2)."""
        L = self.length
        return (np.asarray(delta) + 0.5 * L) % L - 0.5 * L

    def separation(self) -> np.ndarray:
        """Euclidean minimal-image distance of every site from the origin."""
        r2 = np.zeros(self.shape)
        for x in self.coordinates():
            r2 = r2 + self.min_image(x) ** 2
        return np.sqrt(r2)


def make_lattice(d: int, n: int, eps: float) -> LatticeSpec:
    """Build a validated lattice spec (L = n*eps, periodic).

    Raises
    ------
    ValidationError
        If d is not 1/2/3, n is not a power of two >= 2, or eps <= 0.
    """
    return LatticeSpec(int(d), int(n), float(eps))


def fourier(lattice: LatticeSpec, f: np.ndarray) -> np.ndarray:
    """Forward transform, eps^d * FFT.  Accepts leading batch axes."""
    f = np.asarray(f)
    _check_shape(lattice, f)
    return lattice.cell * sfft.fftn(f, axes=lattice.axes())


def inverse_fourier(lattice: LatticeSpec, fhat: np.ndarray) -> np.ndarray:
    """Inverse transform, (1/L^d) * sum_k; returns a complex array."""
    fhat = np.asarray(fhat)
    _check_shape(lattice, fhat)
    return sfft.ifftn(fhat, axes=lattice.axes()) / lattice.cell


def _check_shape(lattice: LatticeSpec, f: np.ndarray):
    if f.shape[-lattice.d:] != lattice.shape:
        raise ValidationError(
            f"field shape {f.shape} does not end in lattice shape {lattice.shape}"
        )


@dataclass(frozen=True)
class SpectralMultiplier:
    """Real, even multiplier acting mode-wise in Fourier space.

    Represents a symmetric translation-invariant operator; ``coeffs[k]``
    must equal ``coeffs[-k]`` so the operator maps real fields to real
    fields.
    """

    lattice: LatticeSpec
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != self.lattice.shape:
            raise ValidationError(
                f"coefficient shape {c.shape} != lattice shape {self.lattice.shape}"
            )
        if not np.all(np.isfinite(c)):
            raise ValidationError("multiplier coefficients must be finite")
        flipped = _reflect(c, self.lattice.d)
        if not np.allclose(c, flipped, rtol=0.0, atol=1e-12 * max(1.0, np.abs(c).max())):
            raise ValidationError("multiplier must satisfy coeffs(k) == coeffs(-k)")
        object.__setattr__(self, "coeffs", c)

    def apply(self, f: np.ndarray) -> np.ndarray:
        return spectral_apply(self, f)

    def position_kernel(self) -> np.ndarray:
        """Position-space kernel K with (Mf)(x) = eps^d sum_y K(x-y) f(y)."""
        K = inverse_fourier(self.lattice, self.coeffs.astype(complex))
        return K.real


def _reflect(c: np.ndarray, d: int) -> np.ndarray:
    """coeffs at -k: index reversal modulo n along each of the last d axes."""
    out = c
    for ax in range(-d, 0):
        out = np.roll(np.flip(out, axis=ax), 1, axis=ax)
    return out


def multiplier_from_values(lattice: LatticeSpec, values) -> SpectralMultiplier:
    values = np.broadcast_to(np.asarray(values, dtype=float), lattice.shape).copy()
    return SpectralMultiplier(lattice, values)


def spectral_apply(m: SpectralMultiplier, f: np.ndarray) -> np.ndarray:
    """Apply the circulant operator with symbol ``m`` to ``f``.

    Exact linearity; the output is real (symbol is even).  Batched over
    leading axes.  Raises ValidationError on lattice mismatch.
    """
    f = np.asarray(f, dtype=float)
    _check_shape(m.lattice, f)
    axes = m.lattice.axes()
    fhat = sfft.fftn(f, axes=axes)
    out = sfft.ifftn(m.coeffs * fhat, axes=axes)
    return out.real


def position_apply(lattice: LatticeSpec, kernel: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Apply (Mf)(x) = eps^d sum_y K(x-y) f(y) by direct circular summation.

    Slow (O(nsites^2)) but exact where the kernel has exact zeros: terms
    with K == 0 contribute exactly 0.0, which FFT round-off would destroy.
    """
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape != lattice.shape:
        raise ValidationError("kernel shape does not match lattice")
    f = np.asarray(f, dtype=float)
    _check_shape(lattice, f)
    out = np.zeros_like(f)
    for idx in np.ndindex(*lattice.shape):
        w = kernel[idx]
        if w == 0.0:
            continue
        shifted = np.roll(f, shift=idx, axis=lattice.axes())
        out += w * shifted
    return lattice.cell * out


# ---------------------------------------------------------------------------
# Counter-based random streams
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


class RngStream:
    """Counter-based random stream: (seed, stream, counter) -> bits is pure.

    Every draw constructs a fresh Philox generator keyed by (seed, stream)
    at counter block ``counter << 128`` and then advances ``counter``, so
    identical triples reproduce identical output bit-for-bit and distinct
    streams are statistically independent.
    """

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.counter = int(counter)

    def _generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        bitgen = np.random.Philox(counter=self.counter << 128, key=key)
        self.counter += 1
        return np.random.Generator(bitgen)

    def normal(self, shape=()) -> np.ndarray:
        return self._generator().standard_normal(shape)

    def uniform(self, shape=()) -> np.ndarray:
        return self._generator().random(shape)

    def integers(self, low, high, shape=()) -> np.ndarray:
        return self._generator().integers(low, high, size=shape)

    def child(self, tag: int) -> "RngStream":
        """Derived independent stream; deterministic in (stream, tag)."""
        mixed = _splitmix64((self.stream * 0x9E3779B97F4A7C15 + int(tag) + 1) & _MASK64)
        return RngStream(self.seed, mixed, 0)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"


def white_noise_increment(lattice: LatticeSpec, da: float, rng: RngStream, size=None) -> np.ndarray:
    """Gaussian white-noise increment over a scale step of width ``da``.

    Per-site i.i.d. centered normals with variance ``da / eps^d`` (the
    lattice delta normalisation), so that covariances accumulate as
    ``da * delta(x - y)``.

    Parameters
    ----------
    size : int, optional
        Leading ensemble axis; draws ``(size, *lattice.shape)``.
    """
    if not (da > 0.0) or not np.isfinite(da):
        raise ValidationError(f"scale step must be positive, got {da}")
    shape = lattice.shape if size is None else (int(size),) + lattice.shape
    return rng.normal(shape) * np.sqrt(da / lattice.cell)


def unit_white_noise(lattice: LatticeSpec, rng: RngStream, size=None) -> np.ndarray:
    """White noise with unit delta covariance (per-site variance 1/eps^d)."""
    return white_noise_increment(lattice, 1.0, rng, size=size)
