"""Scale-averaging kernel families and their linear-force integration.

Two mollifier kinds are shipped:

* ``gaussian`` — symbol ``exp(-s^2 |k|^2 / (2 a^2))``, smooth and exactly
  positive with monotone scale derivative; used for all SDE runs.
* ``bump-selfconvolved`` — a compactly supported C-infinity bump sampled on
  the lattice and self-convolved there, so the position kernel at scale
  ``a`` vanishes *exactly* outside radius ``1/a`` (up to one lattice cell)
  while the spectral coefficients are exactly nonnegative squares.  Used
  where disjoint support must be exact.  Its scale derivative has small
  negative spectral parts near symbol zeros (compact support and a
  radially monotone symbol are incompatible); square roots clamp these at
  zero and the magnitude is recorded on the family.

The smoothing family carries, per grid scale, the accumulated symbol, its
scale derivative, and exact step increments; all quantities involving the
infinite-scale limit use the exact symbol 1 (never an extrapolation).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .lattice import (
    LatticeSpec,
    RngStream,
    SpectralMultiplier,
    ValidationError,
    fourier,
    multiplier_from_values,
    unit_white_noise,
)


class KernelConstructionError(ValueError):
    """Mollifier or operator data produced an invalid kernel family."""


# ---------------------------------------------------------------------------
# Scale grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScaleGrid:
    """Ordered scales a_0 = 0 < a_1 < ... < a_M = a_max."""

    scales: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.scales, dtype=float)
        if a.ndim != 1 or a.size < 2:
            raise ValidationError("scale grid needs at least two scales")
        if a[0] != 0.0:
            raise ValidationError("scale grid must start at a = 0")
        if not np.all(np.diff(a) > 0) or not np.all(np.isfinite(a)):
            raise ValidationError("scale grid must be finite and strictly increasing")
        object.__setattr__(self, "scales", a)

    @property
    def n_steps(self) -> int:
        return self.scales.size - 1

    @property
    def a_max(self) -> float:
        return float(self.scales[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.scales)

    def index(self, a: float) -> int:
        """Exact grid lookup; off-grid scales are refused, not interpolated."""
        a = float(a)
        j = int(np.argmin(np.abs(self.scales - a)))
        if abs(self.scales[j] - a) > 1e-12 * max(1.0, abs(a)):
            raise ValidationError(f"scale {a} is not on the grid")
        return j


def make_scale_grid(a_max: float, n_linear: int = 8, n_geometric: int = 144,
                    a_switch: float | None = None) -> ScaleGrid:
    """Linear warmup to ``a_switch`` then geometric spacing up to ``a_max``."""
    if not (a_max > 0):
        raise ValidationError("a_max must be positive")
    if a_switch is None:
        a_switch = a_max / 512.0
    if not (0 < a_switch < a_max):
        raise ValidationError("need 0 < a_switch < a_max")
    lin = np.linspace(0.0, a_switch, int(n_linear) + 1)
    geo = np.geomspace(a_switch, a_max, int(n_geometric) + 1)
    return ScaleGrid(np.concatenate([lin, geo[1:]]))


def default_grid(lattice: LatticeSpec, a_max: float | None = None, n_geometric: int = 144) -> ScaleGrid:
    """Grid resolving mode transitions from below k_min up to a_max.

    Default a_max is 12*pi/eps so that the unresolved tail of the top
    lattice mode is below one percent.
    """
    if a_max is None:
        a_max = 12.0 * np.pi / lattice.eps
    k_min = 2.0 * np.pi / lattice.length
    a_switch = min(0.25 * k_min, a_max / 8.0)
    return make_scale_grid(a_max, n_linear=8, n_geometric=n_geometric, a_switch=a_switch)


# ---------------------------------------------------------------------------
# Mollifiers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MollifierSpec:
    """Unit-integral, radially symmetric, positive-definite mollifier.

    ``width`` rescales the profile; the bump kind has support radius
    ``width`` after self-convolution, so the kernel of C_a vanishes outside
    ``width / a``.
    """

    kind: str = "gaussian"
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "bump-selfconvolved"):
            raise ValidationError(f"unknown mollifier kind {self.kind!r}")
        if not (self.width > 0):
            raise ValidationError("mollifier width must be positive")


def _bump_profile(r):
    """C-infinity bump on |r| < 1/2 (unnormalised)."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = np.abs(r) < 0.5
    u = np.clip(2.0 * r[inside], -1.0 + 1e-300, 1.0 - 1e-300)
    out[inside] = np.exp(-1.0 / (1.0 - u * u))
    return out


def _bump_profile_deriv(r):
    """d/dr of the bump profile."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = np.abs(r) < 0.5
    u = np.clip(2.0 * r[inside], -1.0 + 1e-300, 1.0 - 1e-300)
    w = 1.0 - u * u
    out[inside] = np.exp(-1.0 / w) * (-2.0 * u / w**2) * 2.0
    return out


class _GaussianSymbol:
    def __init__(self, lattice: LatticeSpec, width: float):
        self.ksq = lattice.ksq()
        self.s2 = width * width

    def at(self, a: float) -> np.ndarray:
        if a <= 0.0:
            return np.zeros_like(self.ksq)
        return np.exp(-0.5 * self.s2 * self.ksq / (a * a))

    def rate_at(self, a: float) -> np.ndarray:
        if a <= 0.0:
            return np.zeros_like(self.ksq)
        return (self.s2 * self.ksq / a**3) * np.exp(-0.5 * self.s2 * self.ksq / (a * a))


class _BumpSymbol:
    """Lattice-sampled, self-convolved compact bump.

    The half-profile has support radius width/2 before convolution, so the
    C_a position kernel vanishes exactly outside radius ``width/a`` plus at
    most one lattice cell of sampling slack.
    """

    def __init__(self, lattice: LatticeSpec, width: float):
        self.lattice = lattice
        self.width = width
        self.sep = lattice.separation()

    def _half(self, a: float):
        r = self.sep * a / self.width
        b = _bump_profile(r)
        norm = self.lattice.cell * b.sum()
        if norm <= 0.0:
            raise KernelConstructionError(f"bump unresolvable at scale a={a}")
        return b, norm, r

    def at(self, a: float) -> np.ndarray:
        if a <= 0.0:
            return np.zeros(self.lattice.shape)
        b, norm, _ = self._half(a)
        bhat = fourier(self.lattice, b / norm).real
        return bhat * bhat

    def rate_at(self, a: float) -> np.ndarray:
        if a <= 0.0:
            return np.zeros(self.lattice.shape)
        b, norm, r = self._half(a)
        db = _bump_profile_deriv(r) * (self.sep / self.width)
        dnorm = self.lattice.cell * db.sum()
        dbn = db / norm - b * dnorm / norm**2
        bhat = fourier(self.lattice, b / norm).real
        dbhat = fourier(self.lattice, dbn).real
        return 2.0 * bhat * dbhat

    def half_radius(self, a: float) -> float:
        """Largest site radius with a nonzero sampled half-profile."""
        b, _, _ = self._half(a)
        mask = b > 0.0
        if not mask.any():
            return 0.0
        return float(self.sep[mask].max())


def _make_symbol(mollifier: MollifierSpec, lattice: LatticeSpec):
    if mollifier.kind == "gaussian":
        return _GaussianSymbol(lattice, mollifier.width)
    return _BumpSymbol(lattice, mollifier.width)


# ---------------------------------------------------------------------------
# Kernel families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IntegrationStep:
    """One substep of the covariance integration path.

    The first grid step carries the instantaneous zero-mode jump of the
    symbol at a = 0+, so it is subdivided linearly in covariance with the
    drift re-evaluated at each substep (the dynamics is covariant under
    reparametrisations of the covariance path, so the subdivision
    converges to the exact law while single-step Euler through the jump
    would not).
    """

    index: int
    grid_index: int
    a: float
    da: float
    fraction: float


class SmoothingFamily:
    """Per-grid-scale spectral tables shared by the C- and Q-families.

    ``levels[j]`` holds the accumulated symbol K_{a_j} - K_0 and
    ``rates[j]`` the scale derivative at a_j.  Step increments are exact
    differences of levels, clamped at zero before square roots (clamping is
    a no-op for the Gaussian family; the recorded ``rate_clip`` measures it
    for the bump family).
    """

    def __init__(self, lattice: LatticeSpec, grid: ScaleGrid, levels: np.ndarray, rates: np.ndarray,
                 jump_substeps: int = 1):
        self.lattice = lattice
        self.grid = grid
        self.levels = levels
        self.rates = rates
        inc = np.diff(levels, axis=0)
        self.increments = np.maximum(inc, 0.0)
        self.increment_clip = float(np.maximum(-inc, 0.0).max()) if inc.size else 0.0
        self.rate_clip = float(np.maximum(-rates, 0.0).max())
        self._rates_clipped = np.maximum(rates, 0.0)
        self.jump_substeps = max(1, int(jump_substeps))
        self._build_path()

    def _build_path(self):
        """Integration path: grid steps, with the first one subdivided."""
        steps = []
        path_inc = []
        start_levels = []
        acc = np.zeros_like(self.levels[0])
        idx = 0
        checkpoints = [0]
        for j in range(self.grid.n_steps):
            k = self.jump_substeps if j == 0 else 1
            sub = self.increments[j] / k
            for s in range(k):
                steps.append(IntegrationStep(
                    index=idx,
                    grid_index=j,
                    a=float(self.grid.scales[j]),
                    da=float(self.grid.steps[j] / k),
                    fraction=s / k,
                ))
                path_inc.append(sub)
                start_levels.append(acc.copy())
                acc = acc + sub
                idx += 1
            checkpoints.append(idx)
        self.path = steps
        self.path_increments = np.stack(path_inc) if path_inc else np.zeros((0,) + self.lattice.shape)
        self.path_start_levels = np.stack(start_levels) if start_levels else np.zeros((0,) + self.lattice.shape)
        self.grid_checkpoints = checkpoints

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def n_path_steps(self) -> int:
        return len(self.path)

    def checkpoint_of(self, grid_index: int) -> int:
        """Integration checkpoint index of the state at grid scale a_j."""
        return self.grid_checkpoints[grid_index]

    def path_increment(self, i: int) -> SpectralMultiplier:
        return self._mult(self.path_increments[i])

    def path_increment_sqrt(self, i: int) -> SpectralMultiplier:
        return self._mult(np.sqrt(self.path_increments[i]))

    def path_tail(self, i: int) -> np.ndarray:
        """Remaining covariance before substep i: total minus accumulated."""
        return self.total_covariance() - self.path_start_levels[i]

    def _mult(self, values) -> SpectralMultiplier:
        return multiplier_from_values(self.lattice, values)

    def level(self, j: int) -> SpectralMultiplier:
        return self._mult(self.levels[j])

    def rate(self, j: int) -> SpectralMultiplier:
        return self._mult(self.rates[j])

    def rate_sqrt(self, j: int) -> SpectralMultiplier:
        return self._mult(np.sqrt(self._rates_clipped[j]))

    def step_increment(self, j: int) -> SpectralMultiplier:
        return self._mult(self.increments[j])

    def step_increment_sqrt(self, j: int) -> SpectralMultiplier:
        return self._mult(np.sqrt(self.increments[j]))

    def step_rate(self, j: int) -> SpectralMultiplier:
        """Step-averaged rate (K_{j+1} - K_j) / da_j."""
        return self._mult(self.increments[j] / self.grid.steps[j])

    def sample(self, j, rng: RngStream, size=None) -> np.ndarray:
        """Exact Gaussian sample with spectral covariance levels[j]."""
        xi = unit_white_noise(self.lattice, rng, size=size)
        if isinstance(j, float) and np.isinf(j):
            cov = self.total_covariance()
        else:
            cov = self.levels[int(j)]
        return self._mult(np.sqrt(np.maximum(cov, 0.0))).apply(xi)

    def total_covariance(self) -> np.ndarray:
        raise NotImplementedError


class KernelFamily(SmoothingFamily):
    """Averaging family C_a with unit-integral mollifier; C_0 = 0, C_inf = 1."""

    def __init__(self, mollifier: MollifierSpec, lattice: LatticeSpec, grid: ScaleGrid,
                 levels, rates, symbol, jump_substeps: int = 1):
        super().__init__(lattice, grid, levels, rates, jump_substeps=jump_substeps)
        self.mollifier = mollifier
        self._symbol = symbol

    def symbol_at(self, a: float) -> np.ndarray:
        return self._symbol.at(a)

    def rate_at(self, a: float) -> np.ndarray:
        return self._symbol.rate_at(a)

    def tail(self, j: int) -> SpectralMultiplier:
        """C_{inf,a} = 1 - C_a, using the exact identity symbol at infinity."""
        return self._mult(1.0 - self.levels[j])

    def total_covariance(self) -> np.ndarray:
        return np.ones(self.lattice.shape)

    def position_kernel(self, j: int) -> np.ndarray:
        """Position kernel of C_{a_j}; exact zeros outside the bump support."""
        K = self.level(j).position_kernel()
        return self._mask_support(K, float(self.grid.scales[j]))

    def rate_position_kernel(self, j: int) -> np.ndarray:
        K = self.rate(j).position_kernel()
        return self._mask_support(K, float(self.grid.scales[j]))

    def _mask_support(self, K: np.ndarray, a: float) -> np.ndarray:
        if self.mollifier.kind != "bump-selfconvolved" or a <= 0.0:
            return K
        radius = self.support_radius(a)
        K = K.copy()
        K[self.lattice.separation() > radius * (1.0 + 1e-12)] = 0.0
        return K

    def support_radius(self, a: float) -> float:
        """Exact support radius of the C_a position kernel (bump only)."""
        if self.mollifier.kind != "bump-selfconvolved":
            raise ValidationError("support radius is exact for the bump mollifier only")
        if a <= 0.0:
            return 0.0
        return 2.0 * self._symbol.half_radius(a)

    def at_scales(self, grid: ScaleGrid) -> "KernelFamily":
        return build_c_family(self.mollifier, self.lattice, grid, jump_substeps=self.jump_substeps)

    def descriptor(self) -> dict:
        return {
            "family": "averaging",
            "mollifier": {"kind": self.mollifier.kind, "width": self.mollifier.width},
            "lattice": {"d": self.lattice.d, "n": self.lattice.n, "eps": self.lattice.eps},
            "grid": self.grid.scales.tolist(),
        }


def build_c_family(mollifier: MollifierSpec, lattice: LatticeSpec, grid: ScaleGrid,
                   jump_substeps: int = 16) -> KernelFamily:
    """Construct C_a, Cdot_a and modewise square roots on the grid.

    Spectral coefficients are the mollifier symbol ``chihat(k/a)`` with
    ``Chat_0 := 0``; the scale derivative is analytic in ``a``.  Raises
    KernelConstructionError if any accumulated coefficient is negative
    (non-positive-definite mollifier) or if a compact mollifier is not
    resolvable at the largest grid scale.
    """
    symbol = _make_symbol(mollifier, lattice)
    if mollifier.kind == "bump-selfconvolved" and grid.a_max > np.pi / lattice.eps * (1 + 1e-9):
        raise KernelConstructionError(
            f"bump mollifier not resolvable: a_max={grid.a_max} exceeds pi/eps={np.pi / lattice.eps}"
        )
    levels = np.stack([symbol.at(a) for a in grid.scales])
    rates = np.stack([symbol.rate_at(a) for a in grid.scales])
    if levels.min() < -1e-12:
        raise KernelConstructionError(
            f"negative spectral coefficient {levels.min():.3e}: mollifier not positive definite"
        )
    return KernelFamily(mollifier, lattice, grid, np.maximum(levels, 0.0), rates, symbol,
                        jump_substeps=jump_substeps)


def cdot_sqrt_apply(family: SmoothingFamily, a: float, f: np.ndarray) -> np.ndarray:
    """Apply the modewise square root of the scale derivative at grid scale a."""
    j = family.grid.index(a)
    return family.rate_sqrt(j).apply(f)


# ---------------------------------------------------------------------------
# Q-families: linear force integrated into the averaging
# ---------------------------------------------------------------------------

class QFamily(SmoothingFamily):
    """Family produced by absorbing the linear force -alpha*A*phi.

    All symbols are stored in cancellation-free closed forms in terms of
    the averaging symbol ``c = Chat_a`` and its complement ``ct = 1 - c``::

        Qdot_a      = alpha * Cdot_a / (1 + alpha*ct*A)^2
        Q_a - Q_0   = alpha * c / ((1 + alpha*ct*A) * (1 + alpha*A))
        Q_{inf,a}   = alpha * ct / (1 + alpha*ct*A)
        Q_{inf,0}   = alpha / (1 + alpha*A)

    which satisfy (Q_a - Q_0) + Q_{inf,a} = Q_{inf,0} identically.
    """

    def __init__(self, cfam: KernelFamily, alpha: float, a_symbol: SpectralMultiplier,
                 levels, rates, tails):
        super().__init__(cfam.lattice, cfam.grid, levels, rates, jump_substeps=cfam.jump_substeps)
        self.cfam = cfam
        self.alpha = alpha
        self.a_symbol = a_symbol
        self.tails = tails

    def tail(self, j: int) -> SpectralMultiplier:
        """Q_{inf,a_j} = Q_inf - Q_{a_j}, exact tail symbol."""
        return self._mult(self.tails[j])

    def tail_sqrt(self, j: int) -> SpectralMultiplier:
        return self._mult(np.sqrt(np.maximum(self.tails[j], 0.0)))

    def total_covariance(self) -> np.ndarray:
        """Q_{inf,0} = alpha (1 + alpha A)^{-1}, the terminal Gaussian covariance."""
        ahat = self.a_symbol.coeffs
        return self.alpha / (1.0 + self.alpha * ahat)

    def at_scales(self, grid: ScaleGrid) -> "QFamily":
        return build_q_family(self.alpha, self.a_symbol, self.cfam.at_scales(grid))

    def descriptor(self) -> dict:
        d = self.cfam.descriptor()
        d["family"] = "q"
        d["alpha"] = self.alpha
        return d


def build_q_family(alpha: float, a_symbol: SpectralMultiplier, cfam: KernelFamily) -> QFamily:
    """Integrate the linear force with operator symbol ``a_symbol`` and coupling alpha.

    Requires alpha > 0 and a strictly positive operator symbol.
    """
    if not (alpha > 0) or not np.isfinite(alpha):
        raise KernelConstructionError(f"coupling alpha must be positive, got {alpha}")
    ahat = a_symbol.coeffs
    if ahat.min() <= 0.0:
        raise KernelConstructionError(
            f"operator symbol must be strictly positive, min={ahat.min():.3e}"
        )
    if a_symbol.lattice != cfam.lattice:
        raise ValidationError("operator symbol and averaging family live on different lattices")
    c = cfam.levels
    ct = 1.0 - c
    levels = alpha * c / ((1.0 + alpha * ct * ahat) * (1.0 + alpha * ahat))
    rates = alpha * cfam.rates / (1.0 + alpha * ct * ahat) ** 2
    tails = alpha * ct / (1.0 + alpha * ct * ahat)
    return QFamily(cfam, alpha, a_symbol, levels, rates, tails)


def make_a_symbol(lattice: LatticeSpec, mass: float, kind: str = "laplacian") -> SpectralMultiplier:
    """Operator symbol m^2 + khat^2 (lattice stencil) or m^2 + k^2 (continuum)."""
    if kind == "laplacian":
        vals = mass * mass + lattice.khat_sq()
    elif kind == "continuum":
        vals = mass * mass + lattice.ksq()
    else:
        raise ValidationError(f"unknown operator kind {kind!r}")
    return multiplier_from_values(lattice, vals)


def sample_xq(qfam: QFamily, a, rng: RngStream, size=None) -> np.ndarray:
    """Exact Gaussian sample with modewise covariance Q_a - Q_0.

    ``a = np.inf`` uses the exact tail symbol and returns the regularised
    free-field sample with covariance Q_{inf,0}; ``a = 0`` is the zero
    field.
    """
    if isinstance(a, float) and np.isinf(a):
        return qfam.sample(np.inf, rng, size=size)
    j = qfam.grid.index(a)
    return qfam.sample(j, rng, size=size)


# ---------------------------------------------------------------------------
# Descriptors and spectral-table cache
# ---------------------------------------------------------------------------

def descriptor_hash(desc: dict) -> str:
    blob = json.dumps(desc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def cache_tables(family: SmoothingFamily, directory) -> str:
    """Write the spectral tables keyed by a content hash; returns the path."""
    import pathlib

    desc = family.descriptor()
    key = descriptor_hash(desc)
    path = pathlib.Path(directory) / f"kernels-{key}.npz"
    payload = {"levels": family.levels, "rates": family.rates}
    if isinstance(family, QFamily):
        payload["tails"] = family.tails
    np.savez(path, descriptor=json.dumps(desc, sort_keys=True), **payload)
    return str(path)


def family_from_descriptor(desc: dict):
    lat = LatticeSpec(desc["lattice"]["d"], desc["lattice"]["n"], desc["lattice"]["eps"])
    grid = ScaleGrid(np.asarray(desc["grid"], dtype=float))
    moll = MollifierSpec(desc["mollifier"]["kind"], desc["mollifier"]["width"])
    cfam = build_c_family(moll, lat, grid)
    if desc.get("family") == "q":
        raise ValidationError("q-family descriptors need the operator symbol; rebuild explicitly")
    return cfam
