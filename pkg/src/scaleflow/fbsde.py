"""Picard iteration for the terminal-gradient FBSDE without knowing V_a.

The forward equation's drift is the conditional expectation of the
terminal potential gradient; it is represented per integration step by
per-site linear regression coefficients on adapted state features.  Each
Picard sweep simulates forward with the current drift on fresh noise,
evaluates the terminal gradient (with the analytic tail appended), and
regresses it back onto every scale by streaming normal equations over a
deterministic re-simulation of the same trajectories, so memory stays
O(n_steps * nsites * n_features^2) regardless of the ensemble size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import RngStream, ValidationError, multiplier_from_values, unit_white_noise
from .kernels import QFamily
from .regression import (
    RegressionBasis,
    accumulate_normal_equations,
    conditional_mean_test,
    regress_conditional,
    solve_normal_equations,
)
from .sde import DriftModel, Trajectory, run_chain, simulate


@dataclass
class DriftRepresentation:
    """Per-integration-step, per-site linear drift coefficients."""

    basis: RegressionBasis
    thetas: list                 # n_path_steps arrays of shape (nsites, F)

    def predict(self, family, step_index: int, states: np.ndarray) -> np.ndarray:
        step = family.path[step_index]
        X = self.basis.features(family, step.grid_index, states)
        return np.einsum("tnf,nf->tn", X, self.thetas[step_index]).reshape(states.shape)

    def predict_from_features(self, step_index: int, X: np.ndarray) -> np.ndarray:
        return np.einsum("tnf,nf->tn", X, self.thetas[step_index])


def zero_representation(family, basis: RegressionBasis) -> DriftRepresentation:
    nF = basis.n_features()
    n = family.lattice.nsites
    return DriftRepresentation(basis, [np.zeros((n, nF)) for _ in range(family.n_path_steps)])


def representation_drift(rep: DriftRepresentation) -> DriftModel:
    """Forward drift f = -(fitted conditional terminal gradient)."""

    def step_force(family, step, states):
        return -rep.predict(family, step.index, states)

    return DriftModel(force=None, step_force=step_force, name="fbsde-regression")


@dataclass
class PicardState:
    representation: DriftRepresentation
    change_history: list
    gradient_sup_history: list
    converged: bool
    n_iterations: int
    damping: float

    @property
    def drift(self) -> DriftModel:
        return representation_drift(self.representation)


def sample_terminal(qfam: QFamily, terminal_states: np.ndarray, rng: RngStream) -> np.ndarray:
    """Append the analytic tail beyond a_max: psi_inf = psi_amax + G_tail."""
    tail = qfam.tail_sqrt(qfam.grid.n_steps)
    xi = unit_white_noise(qfam.lattice, rng, size=terminal_states.shape[0])
    return terminal_states + tail.apply(xi)


def picard_solve(potential, qfam: QFamily, basis: RegressionBasis, n_traj: int,
                 rng: RngStream, tol: float = 2e-2, max_iter: int = 12,
                 damping: float = 0.5, fresh_noise: bool = True) -> tuple:
    """Solve the terminal-gradient FBSDE by damped Picard iteration.

    Returns (PicardState, terminal ensemble (T, *shape)).  Convergence is
    measured as the sup over scales of the RMS drift change on the current
    sample, relative to the drift scale; non-convergence at max_iter is
    flagged, not raised.  ``fresh_noise=False`` keeps one noise realisation
    across iterations (debugging aid only).
    """
    if tol <= 0:
        raise ValidationError("tolerance must be positive")
    lat = qfam.lattice
    nF = basis.n_features()
    if n_traj < 10 * nF:
        raise ValidationError(f"need >= {10 * nF} trajectories for {nF} features")
    rep = zero_representation(qfam, basis)
    history = []
    grad_sup = []
    converged = False
    terminal = None
    n_steps = qfam.n_path_steps
    it = 0
    for it in range(max_iter):
        noise_stream = rng.child(1000 + (it if fresh_noise else 0))
        tail_stream = rng.child(2000 + (it if fresh_noise else 0))
        drift = representation_drift(rep)

        # pass A: forward to the terminal, form targets
        final, _ = run_chain(drift, qfam, RngStream(noise_stream.seed, noise_stream.stream),
                             n_traj)
        psi_inf = sample_terminal(qfam, final, tail_stream)
        targets = np.asarray(potential.grad(psi_inf), dtype=float).reshape(n_traj, lat.nsites)
        grad_sup.append(float(np.abs(targets).max()))

        # pass B: identical trajectories, streaming normal equations per step
        accs = [None] * n_steps

        def collect(i, states):
            if i < n_steps:
                X = basis.features(qfam, qfam.path[i].grid_index, states)
                accs[i] = accumulate_normal_equations(X, targets, into=accs[i])

        run_chain(drift, qfam, RngStream(noise_stream.seed, noise_stream.stream),
                  n_traj, on_checkpoint=collect)

        new_thetas = [solve_normal_equations(acc, basis.ridge) for acc in accs]
        # damped update and sample-weighted change norm via the Gram matrices
        change = 0.0
        scale = 0.0
        for i in range(n_steps):
            delta = new_thetas[i] - rep.thetas[i]
            G = accs[i][0] / accs[i][2]
            change = max(change, float(np.sqrt(max(np.einsum("nf,nfg,ng->", delta, G, delta), 0.0) / lat.nsites)))
            scale = max(scale, float(np.sqrt(max(np.einsum("nf,nfg,ng->", new_thetas[i], G, new_thetas[i]), 0.0) / lat.nsites)))
            rep.thetas[i] = rep.thetas[i] + damping * delta
        rel_change = change / max(scale, 1e-12) if scale > 0 else change
        history.append(rel_change)
        terminal = psi_inf
        if rel_change < tol:
            converged = True
            break
    state = PicardState(
        representation=rep,
        change_history=history,
        gradient_sup_history=grad_sup,
        converged=converged,
        n_iterations=it + 1,
        damping=damping,
    )
    return state, terminal


def resimulate_terminal(state: PicardState, qfam: QFamily, n_traj: int, rng: RngStream,
                        record="terminal") -> Trajectory:
    """Fresh ensemble under the converged drift (terminal tail not appended)."""
    return simulate(state.drift, qfam, rng, n_traj=n_traj, record=record)


@dataclass
class ForceMartingaleStats:
    pairs: list
    tests: list

    @property
    def z_max(self) -> float:
        return max(t.z_max for t in self.tests)

    @property
    def residual_norms(self) -> list:
        return [t.fitted_rms for t in self.tests]


def force_martingale_check(state: PicardState, qfam: QFamily, n_traj: int, rng: RngStream,
                           grid_pairs, probes: int = 3) -> ForceMartingaleStats:
    """Tower-property check of the fitted drift along fresh paths.

    For scale pairs (b, a), projections of f~_a - f~_b onto probe fields
    are regressed on scale-b features; statistically nonzero coefficients
    flag a violated martingale property.
    """
    lat = qfam.lattice
    rep = state.representation
    keep = sorted({j for pair in grid_pairs for j in pair})
    traj = simulate(state.drift, qfam, rng.child(1), n_traj=n_traj, record=keep)
    w_rng = rng.child(2)
    probe_fields = [np.ones(lat.shape)]
    for _ in range(probes - 1):
        probe_fields.append(w_rng.normal(lat.shape))
    tests = []
    pairs_out = []
    for (jb, ja) in grid_pairs:
        fb = rep.predict(qfam, qfam.checkpoint_of(jb) if jb < qfam.n_steps else qfam.n_path_steps - 1,
                         traj.state(jb))
        fa = rep.predict(qfam, qfam.checkpoint_of(ja) if ja < qfam.n_steps else qfam.n_path_steps - 1,
                         traj.state(ja))
        diff = fa - fb
        Xb = rep.basis.features(qfam, jb, traj.state(jb)).mean(axis=1)
        for w in probe_fields:
            y = lat.cell * (diff * w).sum(axis=tuple(range(-lat.d, 0)))
            tests.append(conditional_mean_test(Xb[:, 1:], y))
            pairs_out.append((jb, ja))
    return ForceMartingaleStats(pairs=pairs_out, tests=tests)


def drift_distance(rep_a: DriftRepresentation, rep_b: DriftRepresentation, qfam: QFamily,
                   states: np.ndarray, grid_indices) -> float:
    """RMS distance of two drift representations on common probe states."""
    lat = qfam.lattice
    num = 0.0
    den = 0.0
    for j in grid_indices:
        i = qfam.checkpoint_of(j) if j < qfam.n_steps else qfam.n_path_steps - 1
        pa = rep_a.predict(qfam, i, states)
        pb = rep_b.predict(qfam, i, states)
        num += float(((pa - pb) ** 2).mean())
        den += float((0.5 * (pa + pb) ** 2).mean())
    return np.sqrt(num / max(den, 1e-30))
