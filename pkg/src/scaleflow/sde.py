"""Forward integration of scale-indexed diffusions and the martingale harness.

The integrator is explicit Euler--Maruyama over the scale grid with the
kernel taken as its exact step average: over the step [a_j, a_{j+1}] the
drift applies (K_{j+1} - K_j) f_j and the noise applies the modewise
square root of (K_{j+1} - K_j) to unit white noise.  For constant
diffusivity the noise part is thereby integrated exactly (free-field laws
are exact in law, including the zero-mode contribution of the first step)
while the drift keeps the usual first-order weak error.

Path functionals of the discrete chain are compensated with the same step
kernels, so martingale residual tests of polynomial functionals on linear
systems are exactly centred and purely statistical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeSpec, RngStream, ValidationError, unit_white_noise
from .kernels import ScaleGrid, SmoothingFamily
from .regression import RegressionBasis, ConditionalMeanTest, conditional_mean_test


class SimulationBlowUp(RuntimeError):
    def __init__(self, step: int, scale: float):
        super().__init__(f"non-finite state at step {step} (scale a = {scale:.6g})")
        self.step = step
        self.scale = scale


@dataclass
class DriftModel:
    """Pre-averaging force and diffusivity for the scale dynamics.

    ``force(a, states)`` must be vectorised over leading ensemble axes and
    return an array like ``states``; ``sigma(a, states)`` returns a positive
    scalar (constant 1 by default, the case all quantitative tests use).
    Forces that depend on the remaining covariance (nested conditional
    expectations, closed-form effective gradients) may instead provide
    ``step_force(family, step, states)``, which receives the integration
    substep and can read the exact remaining tail.
    """

    force: callable
    sigma: callable = None
    step_force: callable = None
    name: str = ""

    def __post_init__(self):
        if self.sigma is None:
            self.sigma = lambda a, states: 1.0
        if self.force is None and self.step_force is None:
            raise ValidationError("drift model needs a force or step_force rule")

    def eval(self, family, step, states):
        if self.step_force is not None:
            return self.step_force(family, step, states)
        return self.force(step.a, states)


def zero_drift() -> DriftModel:
    return DriftModel(force=lambda a, states: np.zeros_like(states), name="free")


def constant_drift(c: np.ndarray, sigma: float = 1.0) -> DriftModel:
    c = np.asarray(c, dtype=float)
    return DriftModel(
        force=lambda a, states: np.broadcast_to(c, states.shape).copy(),
        sigma=lambda a, states: sigma,
        name="constant",
    )


@dataclass
class Trajectory:
    """Ensemble of scale-indexed paths with the noises that drove them.

    States are recorded at integration checkpoints; ``state(j)`` returns
    the ensemble state at grid scale a_j (shape (T, *lattice.shape)) via
    the family's checkpoint map.  Initial state is zero.
    """

    lattice: LatticeSpec
    grid: ScaleGrid
    checkpoints: list
    grid_checkpoints: list
    noises: list | None
    stream: tuple

    @property
    def n_traj(self) -> int:
        for s in self.checkpoints:
            if s is not None:
                return s.shape[0]
        return 0

    @property
    def terminal(self) -> np.ndarray:
        return self.checkpoints[-1]

    def state(self, j: int) -> np.ndarray:
        s = self.checkpoints[self.grid_checkpoints[j]]
        if s is None:
            raise ValidationError(f"state at grid index {j} was not recorded")
        return s

    def checkpoint(self, i: int) -> np.ndarray:
        s = self.checkpoints[i]
        if s is None:
            raise ValidationError(f"state at integration checkpoint {i} was not recorded")
        return s


def _record_set(family: SmoothingFamily, record) -> set:
    if record == "all":
        return set(range(family.n_path_steps + 1))
    if record == "terminal":
        return {0, family.n_path_steps}
    idx = {family.checkpoint_of(int(j)) for j in record}
    idx.add(0)
    idx.add(family.n_path_steps)
    return idx


def run_chain(drift: DriftModel, family: SmoothingFamily, rng: RngStream, n_traj: int,
              on_checkpoint=None, store_noise: bool = False, initial=None,
              start_checkpoint: int = 0):
    """Drive the Euler--Maruyama chain along the family's integration path.

    Calls on_checkpoint(i, states) at every integration checkpoint.
    Returns (terminal_states, noises or None).  The drift at a step reads
    only the current state, so the chain is adapted by construction.
    ``start_checkpoint`` launches sub-trajectories from a mid-path state.
    """
    lat = family.lattice
    shape = (n_traj,) + lat.shape
    if initial is None:
        states = np.zeros(shape)
    else:
        states = np.broadcast_to(np.asarray(initial, dtype=float), shape).copy()
    noises = [] if store_noise else None
    if on_checkpoint is not None:
        on_checkpoint(start_checkpoint, states)
    for step in family.path[start_checkpoint:]:
        f = drift.eval(family, step, states)
        sig = drift.sigma(step.a, states)
        xi = unit_white_noise(lat, rng, size=n_traj)
        states = states + family.path_increment(step.index).apply(f) \
            + family.path_increment_sqrt(step.index).apply(sig * xi)
        if not np.all(np.isfinite(states)):
            raise SimulationBlowUp(step.index + 1, step.a)
        if store_noise:
            noises.append(xi)
        if on_checkpoint is not None:
            on_checkpoint(step.index + 1, states)
    return states, noises


def simulate(drift: DriftModel, family: SmoothingFamily, rng: RngStream, n_traj: int = 1,
             record="all", store_noise: bool = False) -> Trajectory:
    """Integrate d(phi) = Kdot_a f_a da + Kdot_a^{1/2} sigma_a dW_a on the grid.

    Works with an averaging family or a Q-family.  Aborts with
    SimulationBlowUp on non-finite states.
    """
    keep = _record_set(family, record)
    recorded = [None] * (family.n_path_steps + 1)

    def on_checkpoint(i, states):
        if i in keep:
            recorded[i] = states.copy()

    stream = (rng.seed, rng.stream)
    _, noises = run_chain(drift, family, rng, n_traj, on_checkpoint=on_checkpoint,
                          store_noise=store_noise)
    return Trajectory(family.lattice, family.grid, recorded, list(family.grid_checkpoints),
                      noises, stream)


def reparametrized_simulate(drift: DriftModel, family: SmoothingFamily, a_map,
                            rng: RngStream, tilde_grid: ScaleGrid | None = None,
                            n_traj: int = 1, record="all") -> Trajectory:
    """Simulate the scale-reparametrised system with kernels C_{A(a)}.

    ``a_map`` must be deterministic and increasing with A(0) = 0.  The
    tilde system uses the same families evaluated at the mapped scales and
    the drift at the mapped scale, so states at tilde scale a correspond to
    direct states at A(a).  With the identity map and the same stream the
    result is bitwise identical to ``simulate``.
    """
    if tilde_grid is None:
        tilde_grid = family.grid
    mapped = np.array([a_map(a) for a in tilde_grid.scales], dtype=float)
    if abs(mapped[0]) > 1e-15:
        raise ValidationError("scale change must satisfy A(0) = 0")
    if not np.all(np.diff(mapped) > 0):
        raise ValidationError("scale change must be strictly increasing")
    mapped[0] = 0.0
    mapped_family = family.at_scales(ScaleGrid(mapped))
    tilde_drift = DriftModel(
        force=lambda a, states: drift.force(a_map(a), states),
        sigma=lambda a, states: drift.sigma(a_map(a), states),
        name=drift.name + "~",
    )
    # note: mapped_family.grid holds the *mapped* scales; record against it
    traj = simulate(tilde_drift, mapped_family, rng, n_traj=n_traj, record=record)
    return traj


# ---------------------------------------------------------------------------
# Test functionals and the generator
# ---------------------------------------------------------------------------

@dataclass
class TestFunctional:
    """Scale-dependent functional with gradient and Hessian action.

    ``value(a, phi) -> scalar`` (vectorised: batched phi gives batched
    values), ``grad(a, phi) -> field``, ``hess_action(a, phi, h) -> field``
    and optional explicit ``da``.  ``hess_trace(a, phi, mult)``, when
    provided, returns Tr[mult . D^2 F] exactly for structured functionals.
    """

    value: callable
    grad: callable
    hess_action: callable = None
    da: callable = None
    hess_trace: callable = None
    name: str = ""


def linear_functional(lattice: LatticeSpec, g: np.ndarray, name="linear") -> TestFunctional:
    """F(phi) = <g, phi> in the eps-weighted inner product."""
    g = np.asarray(g, dtype=float)
    cell = lattice.cell
    axes = tuple(range(-lattice.d, 0))
    return TestFunctional(
        value=lambda a, phi: cell * (g * phi).sum(axis=axes),
        grad=lambda a, phi: np.broadcast_to(g, phi.shape).copy(),
        hess_action=lambda a, phi, h: np.zeros(np.broadcast_shapes(phi.shape, h.shape)),
        hess_trace=lambda a, phi, mult: 0.0,
        name=name,
    )


def quadratic_functional(lattice: LatticeSpec, mult, name="quadratic") -> TestFunctional:
    """F(phi) = <phi, M phi> for a spectral multiplier M (gradient 2 M phi)."""
    cell = lattice.cell
    axes = tuple(range(-lattice.d, 0))
    return TestFunctional(
        value=lambda a, phi: cell * (phi * mult.apply(phi)).sum(axis=axes),
        grad=lambda a, phi: 2.0 * mult.apply(phi),
        hess_action=lambda a, phi, h: 2.0 * mult.apply(h),
        hess_trace=lambda a, phi, other: 2.0 * float((other.coeffs * mult.coeffs).sum())
        if hasattr(other, "coeffs") else None,
        name=name,
    )


def check_gradient(F: TestFunctional, a: float, phi: np.ndarray, lattice: LatticeSpec,
                   rng: RngStream, eta: float = 1e-5) -> float:
    """Relative error of <DF, h> against centred finite differences."""
    h = rng.normal(phi.shape)
    plus = F.value(a, phi + eta * h)
    minus = F.value(a, phi - eta * h)
    fd = (plus - minus) / (2 * eta)
    axes = tuple(range(-lattice.d, 0))
    ip = lattice.cell * (F.grad(a, phi) * h).sum(axis=axes)
    denom = max(abs(fd), abs(ip), 1e-12)
    return abs(fd - ip) / denom


@dataclass
class GeneratorValue:
    value: float
    trace: float
    trace_se: float
    mode: str


def _basis_fields(lattice: LatticeSpec, block) -> np.ndarray:
    """Orthonormal site basis e_x = eps^{-d/2} delta_x, rows of a block."""
    n = lattice.nsites
    out = np.zeros((len(block), n))
    for i, x in enumerate(block):
        out[i, x] = lattice.cell ** -0.5
    return out.reshape((len(block),) + lattice.shape)


def operator_trace(lattice: LatticeSpec, action, exact_limit: int = 4096,
                   probes: int = 64, rng: RngStream | None = None) -> tuple:
    """Trace of a symmetric operator given its action on batched fields.

    Exact orthonormal-basis summation when nsites <= exact_limit, else a
    Rademacher randomised estimator with its standard error.
    """
    n = lattice.nsites
    if n <= exact_limit:
        total = 0.0
        step = 512
        for start in range(0, n, step):
            block = range(start, min(start + step, n))
            e = _basis_fields(lattice, block)
            Me = action(e)
            flat = Me.reshape(len(e), n)
            for i, x in enumerate(block):
                total += lattice.cell**0.5 * flat[i, x]
        return float(total), 0.0, "exact"
    if rng is None:
        raise ValidationError("randomised trace needs an RngStream")
    z = rng.integers(0, 2, (probes,) + lattice.shape) * 2.0 - 1.0
    z = z * lattice.cell ** -0.5
    Mz = action(z)
    axes = tuple(range(-lattice.d, 0))
    est = lattice.cell * (z * Mz).sum(axis=axes)
    return float(est.mean()), float(est.std(ddof=1) / np.sqrt(probes)), "hutchinson"


def apply_generator(F: TestFunctional, drift: DriftModel, family: SmoothingFamily,
                    a: float, phi: np.ndarray, probes: int = 64,
                    rng: RngStream | None = None, exact_limit: int = 4096) -> GeneratorValue:
    """Evaluate dF/da + <DF, Kdot_a f_a> + (sigma^2/2) Tr[Kdot^{1/2} D^2F Kdot^{1/2}].

    The trace is exact by basis summation for nsites <= exact_limit, else
    estimated with Rademacher probes (standard error reported).
    """
    if F.grad is None:
        raise ValidationError("test functional must provide a gradient rule")
    lat = family.lattice
    j = family.grid.index(a)
    rate = family.rate(j)
    rate_sqrt = family.rate_sqrt(j)
    axes = tuple(range(-lat.d, 0))
    f = drift.force(a, phi[None])[0]
    sig = float(np.asarray(drift.sigma(a, phi[None])).ravel()[0])
    dF = F.da(a, phi) if F.da is not None else 0.0
    drift_term = lat.cell * (F.grad(a, phi) * rate.apply(f)).sum(axis=axes)
    if F.hess_trace is not None:
        tr = F.hess_trace(a, phi, rate)
        se, mode = 0.0, "closed-form"
        if tr is None:
            tr, se, mode = _generator_trace(F, family, a, phi, j, probes, rng, exact_limit)
    else:
        tr, se, mode = _generator_trace(F, family, a, phi, j, probes, rng, exact_limit)
    value = float(dF + drift_term + 0.5 * sig**2 * tr)
    return GeneratorValue(value=value, trace=float(tr), trace_se=0.5 * sig**2 * se, mode=mode)


def _generator_trace(F, family, a, phi, j, probes, rng, exact_limit):
    if F.hess_action is None:
        raise ValidationError("test functional must provide a Hessian action or trace rule")
    rate_sqrt = family.rate_sqrt(j)

    def action(h):
        return rate_sqrt.apply(F.hess_action(a, phi, rate_sqrt.apply(h)))

    return operator_trace(family.lattice, action, exact_limit=exact_limit, probes=probes, rng=rng)


# ---------------------------------------------------------------------------
# Path compensator and martingale residuals
# ---------------------------------------------------------------------------

def generator_quadrature(F: TestFunctional, drift: DriftModel, family: SmoothingFamily,
                         traj: Trajectory, j_lo: int, j_hi: int) -> np.ndarray:
    """Per-trajectory sum of the compensator over grid steps [j_lo, j_hi).

    Uses the exact integration-path kernels of the simulated chain: each
    substep contributes dF*da + <DF, dK f> + (sigma^2/2) Tr[dK D^2 F] with
    dK the substep increment, so polynomial functionals of linear systems
    are compensated exactly (residuals are purely statistical).
    """
    lat = family.lattice
    axes = tuple(range(-lat.d, 0))
    total = None
    i_lo = family.checkpoint_of(j_lo)
    i_hi = family.checkpoint_of(j_hi)
    for i in range(i_lo, i_hi):
        step = family.path[i]
        phi = traj.checkpoint(i)
        f = drift.eval(family, step, phi)
        sig = drift.sigma(step.a, phi)
        inc = family.path_increment(i)
        term = lat.cell * (F.grad(step.a, phi) * inc.apply(f)).sum(axis=axes)
        if F.da is not None:
            term = term + F.da(step.a, phi) * step.da
        tr = F.hess_trace(step.a, phi, inc) if F.hess_trace is not None else None
        if tr is None:
            raise ValidationError(
                "path quadrature needs a hess_trace rule (exact for the structured suite)"
            )
        sig2 = np.asarray(sig) ** 2
        term = term + 0.5 * sig2 * tr
        total = term if total is None else total + term
    return total if total is not None else np.zeros(traj.n_traj)


@dataclass
class MartingaleStats:
    """Regression residuals of E[M^F_a - M^F_b | state at b] per scale pair."""

    pairs: list
    tests: list
    n_traj: int

    @property
    def z_max(self) -> float:
        return max(t.z_max for t in self.tests)

    def summary(self) -> str:
        lines = []
        for (b, a), t in zip(self.pairs, self.tests):
            lines.append(f"pair (a_{b}, a_{a}): z_mean={t.z_mean:+.2f} z_max={t.z_max:.2f}")
        return "\n".join(lines)


def martingale_residual(F: TestFunctional, drift: DriftModel, family: SmoothingFamily,
                        traj: Trajectory, pairs, basis: RegressionBasis | None = None) -> MartingaleStats:
    """Test E[M^F_a - M^F_b | F_b] = 0 by regression on scale-b features.

    ``pairs`` is a list of grid-index pairs (j_b, j_a) with j_b < j_a; the
    trajectory must have recorded those states (and everything between for
    the compensator quadrature).
    """
    if basis is None:
        basis = RegressionBasis(degree=2, extra_smooth_factors=(), include_average=True)
    tests = []
    for (jb, ja) in pairs:
        if not (0 <= jb < ja <= family.grid.n_steps):
            raise ValidationError(f"bad scale pair {(jb, ja)}")
        phib = traj.state(jb)
        phia = traj.state(ja)
        Fa = F.value(family.grid.scales[ja], phia)
        Fb = F.value(family.grid.scales[jb], phib)
        comp = generator_quadrature(F, drift, family, traj, jb, ja)
        y = Fa - Fb - comp
        X = basis.features(family, jb, phib)
        # scalar targets: compress per-site features to site-averaged moments
        Xs = X.mean(axis=1)
        tests.append(conditional_mean_test(Xs[:, 1:], y))
    return MartingaleStats(pairs=list(pairs), tests=tests, n_traj=traj.n_traj)
