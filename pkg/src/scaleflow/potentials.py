"""Local lattice potentials with spatial infrared weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeSpec, SpectralMultiplier, ValidationError


@dataclass
class PolynomialPotential:
    """V(phi) = eps^d sum_x rho(x) v(phi(x)) with polynomial v.

    ``coeffs[p]`` is the coefficient of phi^p (index 0 unused for the
    energy offset only).  ``rho`` is a field of nonnegative site weights,
    all ones by default.  Gradient and Hessian follow the eps-weighted
    inner product convention, so DV(x) = rho(x) v'(phi(x)).
    """

    lattice: LatticeSpec
    coeffs: np.ndarray
    rho: np.ndarray | None = None
    name: str = "polynomial"

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 1 or self.coeffs.size < 1:
            raise ValidationError("polynomial coefficients must be a 1d array")
        if self.rho is not None:
            self.rho = np.asarray(self.rho, dtype=float)
            if self.rho.shape != self.lattice.shape:
                raise ValidationError("rho must be a field on the lattice")
            if self.rho.min() < 0:
                raise ValidationError("rho must be nonnegative")

    def _w(self):
        return 1.0 if self.rho is None else self.rho

    def _v(self, x):
        return np.polynomial.polynomial.polyval(x, self.coeffs)

    def _vp(self, x):
        return np.polynomial.polynomial.polyval(x, np.polynomial.polynomial.polyder(self.coeffs))

    def _vpp(self, x):
        d2 = np.polynomial.polynomial.polyder(self.coeffs, 2)
        return np.polynomial.polynomial.polyval(x, d2)

    def value(self, phi: np.ndarray):
        axes = tuple(range(-self.lattice.d, 0))
        return self.lattice.cell * (self._w() * self._v(phi)).sum(axis=axes)

    def grad(self, phi: np.ndarray) -> np.ndarray:
        return self._w() * self._vp(phi)

    def hess_action(self, phi: np.ndarray, h: np.ndarray) -> np.ndarray:
        return self._w() * self._vpp(phi) * h

    def hess_trace(self, phi: np.ndarray, mult: SpectralMultiplier):
        """Tr[mult . D^2 V] = (eps^d sum_x rho v''(phi)) * L^-d sum_k mult(k)."""
        axes = tuple(range(-self.lattice.d, 0))
        diag = self.lattice.cell * (self._w() * self._vpp(phi)).sum(axis=axes)
        return diag * mult.coeffs.sum() / self.lattice.volume

    def bounded_below(self) -> bool:
        lead = self.coeffs[np.nonzero(self.coeffs)[0][-1]] if self.coeffs.any() else 0.0
        deg = np.nonzero(self.coeffs)[0][-1] if self.coeffs.any() else 0
        return deg % 2 == 0 and lead >= 0 or not self.coeffs.any()


def quartic_potential(lattice: LatticeSpec, lam: float, rho=None, mass_sq: float = 0.0,
                      counterterm: float | None = None) -> PolynomialPotential:
    """v(phi) = lam phi^4 + (mass_sq/2) phi^2, optionally with a mass counterterm.

    In d = 2 a quartic needs an explicit user-supplied counterterm (it is
    the caller's responsibility to tune it); without one it is refused.
    """
    if lattice.d >= 2 and lam != 0.0 and counterterm is None:
        raise ValidationError(
            "d >= 2 quartic potentials need an explicit mass counterterm; pass counterterm="
        )
    c2 = 0.5 * mass_sq + (counterterm or 0.0)
    return PolynomialPotential(lattice, np.array([0.0, 0.0, c2, 0.0, lam]), rho=rho, name="quartic")


@dataclass
class QuadraticPotential:
    """V(phi) = (1/2) <phi, B phi> for a spectral multiplier B (closed-form family)."""

    lattice: LatticeSpec
    bmult: SpectralMultiplier
    name: str = "quadratic"

    def value(self, phi: np.ndarray):
        axes = tuple(range(-self.lattice.d, 0))
        return 0.5 * self.lattice.cell * (phi * self.bmult.apply(phi)).sum(axis=axes)

    def grad(self, phi: np.ndarray) -> np.ndarray:
        return self.bmult.apply(phi)

    def hess_action(self, phi: np.ndarray, h: np.ndarray) -> np.ndarray:
        return self.bmult.apply(h)

    def hess_trace(self, phi: np.ndarray, mult: SpectralMultiplier):
        return float((self.bmult.coeffs * mult.coeffs).sum())


def zero_potential(lattice: LatticeSpec) -> PolynomialPotential:
    return PolynomialPotential(lattice, np.array([0.0]), name="zero")


def _smoothstep(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)
    def f(u):
        out = np.zeros_like(u)
        pos = u > 0
        out[pos] = np.exp(-1.0 / u[pos])
        return out
    a = f(t)
    b = f(1.0 - t)
    return a / (a + b)


def plateau_weight(lattice: LatticeSpec, inner_radius: float, outer_radius: float) -> np.ndarray:
    """Smooth compactly supported IR weight: 1 inside, 0 outside, C-infinity ramp."""
    if not (0 < inner_radius < outer_radius):
        raise ValidationError("need 0 < inner_radius < outer_radius")
    sep = lattice.separation()
    t = (outer_radius - sep) / (outer_radius - inner_radius)
    return _smoothstep(t)
