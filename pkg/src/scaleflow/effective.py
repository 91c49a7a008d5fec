"""Effective potentials by Gaussian smoothing, flow residuals and exact-drift sampling.

The effective potential at scale ``a`` is minus the log of the Gaussian
smoothing of ``exp(-V)`` over the exact tail covariance Q_{inf,a}.  It is
estimated by nested Monte Carlo with self-normalised importance weights
and common random numbers across scales: one cached block of unit noise
generates every tail sample, so scale differences are low-variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import RngStream, SpectralMultiplier, ValidationError, multiplier_from_values, unit_white_noise
from .kernels import QFamily
from .sde import DriftModel, Trajectory, simulate


class EstimatorUnderflow(RuntimeError):
    def __init__(self, max_exponent, min_exponent):
        super().__init__(
            f"all Gibbs weights underflow: exponents in [{min_exponent:.3g}, {max_exponent:.3g}]"
        )
        self.max_exponent = max_exponent
        self.min_exponent = min_exponent


@dataclass
class ValueEstimate:
    value: float
    stderr: float
    ess: float


@dataclass
class GradientEstimate:
    field: np.ndarray
    stderr: np.ndarray
    ess: float
    low_ess: bool


class EffectivePotentialEstimator:
    """Nested Monte Carlo for V_a(phi) = -log E[exp(-V(phi + G))], G ~ N(0, Q_{inf,a}).

    The same unit-noise block drives the tail sample at every scale
    (common random numbers), so central differences across adjacent grid
    scales see strongly correlated estimates.
    """

    def __init__(self, qfam: QFamily, potential, budget: int = 2048, rng: RngStream | None = None,
                 ess_warn_fraction: float = 0.1):
        self.qfam = qfam
        self.potential = potential
        self.budget = int(budget)
        self.rng = rng if rng is not None else RngStream(0, 101)
        self.ess_warn_fraction = ess_warn_fraction
        self._xi = None
        self._tail_cache = {}

    def _unit_block(self) -> np.ndarray:
        if self._xi is None:
            stream = self.rng.child(0xEFF)
            self._xi = unit_white_noise(self.qfam.lattice, stream, size=self.budget)
        return self._xi

    def _index(self, a):
        if isinstance(a, float) and np.isinf(a):
            return None
        return self.qfam.grid.index(a)

    def tails(self, a) -> np.ndarray:
        """Tail samples G with covariance Q_{inf,a} (zero block at a = inf)."""
        j = self._index(a)
        if j in self._tail_cache:
            return self._tail_cache[j]
        if j is None:
            g = np.zeros((self.budget,) + self.qfam.lattice.shape)
        else:
            g = self.qfam.tail_sqrt(j).apply(self._unit_block())
        self._tail_cache[j] = g
        return g

    def _exponents(self, a, phi) -> np.ndarray:
        g = self.tails(a)
        return -np.asarray(self.potential.value(phi + g), dtype=float)

    def value(self, a, phi: np.ndarray) -> ValueEstimate:
        """-log of the empirical mean of exp(-V(phi+G)), with jackknife stderr."""
        e = self._exponents(a, phi)
        return _neglog_mean_exp(e)

    def gradient(self, a, phi: np.ndarray) -> GradientEstimate:
        """Self-normalised Gibbs average of DV(phi+G), same G as the value call."""
        g = self.tails(a)
        e = self._exponents(a, phi)
        m = e.max()
        if not np.isfinite(m):
            raise EstimatorUnderflow(m, e.min())
        w = np.exp(e - m)
        dv = self.potential.grad(phi + g)
        flat = dv.reshape(self.budget, -1)
        S = w.sum()
        N = w @ flat
        mean = N / S
        # delete-one jackknife of the ratio, vectorised over left-out samples
        S_i = S - w
        N_i = N[None, :] - w[:, None] * flat
        loo = N_i / S_i[:, None]
        B = self.budget
        se = np.sqrt((B - 1) / B * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0))
        ess = float(S * S / (w @ w))
        return GradientEstimate(
            field=mean.reshape(phi.shape),
            stderr=se.reshape(phi.shape),
            ess=ess,
            low_ess=ess < self.ess_warn_fraction * B,
        )

    def flow_residual(self, a, phi: np.ndarray, stencil: int = 1) -> ValueEstimate:
        """Residual of dV_a/da - (1/2)<DV_a, Qdot DV_a> + (1/2)Tr[Qdot D^2 V_a].

        The scale derivative is a central difference across grid
        neighbours (common random numbers); DV_a and the Hessian trace use
        the weighted estimator at ``a``.  The whole composite is
        jackknifed over the inner samples.  Exact-Hessian evaluation is
        restricted to small lattices.
        """
        lat = self.qfam.lattice
        if lat.nsites > 64:
            raise ValidationError("flow residual uses exact Hessian traces; need nsites <= 64")
        grid = self.qfam.grid
        j = grid.index(a)
        if j - stencil < 1 or j + stencil > grid.n_steps:
            raise ValidationError("scale too close to the grid ends for the central difference")
        jm, jp = j - stencil, j + stencil
        da = grid.scales[jp] - grid.scales[jm]
        qdot = self.qfam.rate(j)

        e_m = self._exponents(grid.scales[jm], phi)
        e_p = self._exponents(grid.scales[jp], phi)
        e_0 = self._exponents(grid.scales[j], phi)
        g_0 = self.tails(grid.scales[j])

        dv = self.potential.grad(phi + g_0)
        flat = dv.reshape(self.budget, -1)
        qdv = qdot.apply(dv).reshape(self.budget, -1)
        cross = lat.cell * (flat * qdv).sum(axis=1)          # <DV, Qdot DV> per sample
        tr = np.asarray(self.potential.hess_trace(phi + g_0, qdot), dtype=float)
        tr = np.broadcast_to(tr, (self.budget,))

        def composite(keep):
            vm = _neglog_mean_exp(e_m[keep]).value
            vp = _neglog_mean_exp(e_p[keep]).value
            d_a = (vp - vm) / da
            w = np.exp(e_0[keep] - e_0[keep].max())
            S = w.sum()
            mean_dv = (w @ flat[keep]) / S
            mean_qdv = (w @ qdv[keep]) / S
            mean_cross = (w @ cross[keep]) / S
            mean_tr = (w @ tr[keep]) / S
            grad_term = lat.cell * (mean_dv * mean_qdv).sum()
            hess_trace = mean_tr - (mean_cross - grad_term)
            return d_a - 0.5 * grad_term + 0.5 * hess_trace

        full = composite(np.ones(self.budget, dtype=bool))
        B = self.budget
        loo = np.empty(B)
        mask = np.ones(B, dtype=bool)
        for i in range(B):
            mask[i] = False
            loo[i] = composite(mask)
            mask[i] = True
        se = float(np.sqrt((B - 1) / B * ((loo - loo.mean()) ** 2).sum()))
        ess = _ess(e_0)
        return ValueEstimate(value=float(full), stderr=se, ess=ess)


def _ess(exponents: np.ndarray) -> float:
    w = np.exp(exponents - exponents.max())
    return float(w.sum() ** 2 / (w @ w))


def _neglog_mean_exp(e: np.ndarray) -> ValueEstimate:
    m = e.max()
    if m < -745.0 or not np.isfinite(m):
        raise EstimatorUnderflow(m, e.min())
    w = np.exp(e - m)
    B = e.size
    S = w.sum()
    val = -(m + np.log(S / B))
    S_i = (S - w) / (B - 1)
    loo = -(m + np.log(np.maximum(S_i, 1e-300)))
    se = np.sqrt((B - 1) / B * ((loo - loo.mean()) ** 2).sum())
    return ValueEstimate(value=float(val), stderr=float(se), ess=_ess(e))


# ---------------------------------------------------------------------------
# Closed forms for quadratic potentials (Gaussian conjugacy)
# ---------------------------------------------------------------------------

def quadratic_effective_multiplier(qfam: QFamily, bmult: SpectralMultiplier, j) -> np.ndarray:
    """Spectral coefficients of DV_a = (1 + B Q_{inf,a})^{-1} B for quadratic V."""
    if j is None or (isinstance(j, float) and np.isinf(j)):
        tail = np.zeros(qfam.lattice.shape)
    else:
        tail = qfam.tails[int(j)]
    return bmult.coeffs / (1.0 + bmult.coeffs * tail)


def quadratic_effective_value(qfam: QFamily, bmult: SpectralMultiplier, j, phi: np.ndarray) -> float:
    """Closed form (1/2)<phi,(1+B Q)^{-1} B phi> + (1/2) log det(1 + Q B)."""
    lat = qfam.lattice
    tail = np.zeros(lat.shape) if j is None else qfam.tails[int(j)]
    eff = bmult.coeffs / (1.0 + bmult.coeffs * tail)
    mult = multiplier_from_values(lat, eff)
    quad = 0.5 * lat.cell * (phi * mult.apply(phi)).sum()
    logdet = 0.5 * np.log1p(tail * bmult.coeffs).sum()
    return float(quad + logdet)


def linear_exact_drift(qfam: QFamily, bmult: SpectralMultiplier) -> DriftModel:
    """Closed-form drift -DV_a for quadratic potentials (force martingale).

    Uses the exact remaining covariance of the integration substep, so the
    zero-mode jump at a = 0+ is drifted correctly through its subdivision.
    """
    lat = qfam.lattice

    def step_force(family, step, states):
        tail = family.path_tail(step.index)
        eff = bmult.coeffs / (1.0 + bmult.coeffs * tail)
        return -multiplier_from_values(lat, eff).apply(states)

    def force(a, states):
        j = qfam.grid.index(a)
        eff = quadratic_effective_multiplier(qfam, bmult, j)
        return -multiplier_from_values(lat, eff).apply(states)

    return DriftModel(force=force, step_force=step_force, name="linear-closed-form")


def gibbs_terminal_covariance(qfam: QFamily, bmult: SpectralMultiplier) -> np.ndarray:
    """Modewise (Q_{inf,0}^{-1} + B)^{-1}, the quadratic-potential terminal law."""
    q0 = qfam.total_covariance()
    return q0 / (1.0 + q0 * bmult.coeffs)


# ---------------------------------------------------------------------------
# Exact-drift forward sampler (nested-Monte-Carlo drift)
# ---------------------------------------------------------------------------

class NestedDriftForce:
    """Drift -E_w[DV(psi + G)] with fresh inner tails at every integration step.

    G is drawn with the exact covariance remaining before the substep, so
    the estimator stays conditionally unbiased along the whole path
    including the zero-mode jump subdivision.  The inner block is shared
    across trajectories at a given step (the induced cross-trajectory
    correlation is O(1/budget)) and independent of the driving noise.
    """

    def __init__(self, potential, budget: int, rng: RngStream, chunk: int = 256):
        self.potential = potential
        self.budget = int(budget)
        self.rng = rng
        self.chunk = chunk

    def __call__(self, family, step, states):
        lat = family.lattice
        tail = np.sqrt(np.maximum(family.path_tail(step.index), 0.0))
        tail_sqrt = multiplier_from_values(lat, tail)
        stream = self.rng.child(step.index + 1)
        T = states.shape[0]
        m = np.full(T, -np.inf)
        S = np.zeros(T)
        N = np.zeros((T, lat.nsites))
        done = 0
        while done < self.budget:
            b = min(self.chunk, self.budget - done)
            xi = unit_white_noise(lat, stream, size=b)
            g = tail_sqrt.apply(xi)
            shifted = states[:, None] + g[None, :]
            e = -np.asarray(self.potential.value(shifted), dtype=float)   # (T, b)
            dv = self.potential.grad(shifted).reshape(T, b, -1)
            m_new = np.maximum(m, e.max(axis=1))
            rescale = np.exp(np.where(np.isfinite(m), m - m_new, 0.0))
            S *= rescale
            N *= rescale[:, None]
            w = np.exp(e - m_new[:, None])
            S += w.sum(axis=1)
            N += np.einsum("tb,tbn->tn", w, dv)
            m = m_new
            done += b
        if np.any(S <= 0) or not np.all(np.isfinite(S)):
            raise EstimatorUnderflow(float(np.nanmax(m)), float(np.nanmin(m)))
        return -(N / S[:, None]).reshape(states.shape)


def exact_drift_simulate(est: EffectivePotentialEstimator, qfam: QFamily, rng: RngStream,
                         n_traj: int = 1, record="terminal", budget: int | None = None) -> Trajectory:
    """Forward sampler whose drift is the nested-MC effective gradient.

    The terminal ensemble approximates the Gibbs perturbation of the
    Gaussian with covariance Q_{inf,0} restricted to the grid range.
    Inner randomness is derived from a child of ``rng`` and is independent
    of the driving noise.
    """
    budget = est.budget if budget is None else int(budget)
    force = NestedDriftForce(est.potential, budget, rng.child(0xD217))
    drift = DriftModel(force=None, step_force=force, name="exact-drift")
    return simulate(drift, qfam, rng, n_traj=n_traj, record=record)


# ---------------------------------------------------------------------------
# Girsanov weight diagnostics
# ---------------------------------------------------------------------------

@dataclass
class WeightCheck:
    scales: list
    means: np.ndarray
    stderrs: np.ndarray
    pair_tests: list

    @property
    def z_pairs_max(self) -> float:
        return max(t.z_max for t in self.pair_tests) if self.pair_tests else 0.0

    def z_constancy(self) -> np.ndarray:
        """z-scores of mean differences against the first selected scale."""
        base, se0 = self.means[0], self.stderrs[0]
        return (self.means - base) / np.sqrt(self.stderrs**2 + se0**2 + 1e-300)


def girsanov_weight_check(qfam: QFamily, potential, traj: Trajectory, scale_indices,
                          budget: int = 512, rng: RngStream | None = None,
                          basis=None) -> WeightCheck:
    """Track exp(-V_a(X_a)) along free trajectories: a positive martingale.

    Per trajectory and scale, exp(-V_a) is the conditional sample mean of
    exp(-V(X_a + G)) over independent tails (unbiased given X_a), so mean
    constancy across scales and vanishing regression residuals are exact
    properties up to Monte Carlo error.
    """
    from .regression import RegressionBasis, conditional_mean_test

    if rng is None:
        rng = RngStream(0, 909)
    if basis is None:
        basis = RegressionBasis(degree=2)
    lat = qfam.lattice
    T = traj.n_traj
    weights = []
    for j in scale_indices:
        X = traj.state(j)
        xi = unit_white_noise(lat, rng.child(1000 + j), size=(budget,))
        g = qfam.tail_sqrt(j).apply(xi)
        shifted = X[:, None] + g[None, :]
        e = -np.asarray(potential.value(shifted), dtype=float)
        m = e.max()
        weights.append(np.exp(m) * np.exp(e - m).mean(axis=1))
    weights = np.stack(weights)            # (n_scales, T)
    means = weights.mean(axis=1)
    ses = weights.std(axis=1, ddof=1) / np.sqrt(T)
    pair_tests = []
    for i in range(len(scale_indices) - 1):
        jb = scale_indices[i]
        y = weights[i + 1] - weights[i]
        Xf = basis.features(qfam, jb, traj.state(jb)).mean(axis=1)
        pair_tests.append(conditional_mean_test(Xf[:, 1:], y))
    return WeightCheck(scales=list(scale_indices), means=means, stderrs=ses, pair_tests=pair_tests)
