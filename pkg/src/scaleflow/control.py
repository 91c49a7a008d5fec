"""Stochastic-control formulation: minimise terminal energy plus control cost.

The control is parametrised through the same feature basis as the FBSDE
drift regression: the policy emits a pre-kernel field p_a(psi) and the
control is u_a = Qdot_a^{1/2} p_a, so the controlled dynamics is the
standard forward chain with force p and the running cost is
(1/2) <p, dQ p> per step.  At the optimum p approaches minus the effective
potential gradient, which makes closed-form and cross-module comparisons
like for like.

Gradients are exact pathwise (reparametrised noise) adjoints of the
discrete chain, verified against finite differences in the tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .lattice import RngStream, ValidationError, multiplier_from_values, unit_white_noise
from .kernels import QFamily
from .regression import RegressionBasis
from .sde import DriftModel, simulate
from .fbsde import sample_terminal


@dataclass
class ControlPolicy:
    """Feature-linear adapted control: p_i(psi) = features(psi) . theta_i per site."""

    basis: RegressionBasis
    thetas: list
    bound: float = 1e3

    def predict(self, family, step_index: int, states: np.ndarray) -> np.ndarray:
        step = family.path[step_index]
        X = self.basis.features(family, step.grid_index, states)
        return np.einsum("tnf,nf->tn", X, self.thetas[step_index]).reshape(states.shape)

    def clip_(self):
        for th in self.thetas:
            np.clip(th, -self.bound, self.bound, out=th)

    def copy(self) -> "ControlPolicy":
        return ControlPolicy(self.basis, [t.copy() for t in self.thetas], self.bound)

    def to_json(self) -> str:
        return json.dumps({
            "degree": self.basis.degree,
            "thetas": [t.tolist() for t in self.thetas],
        })


def zero_policy(family, basis: RegressionBasis) -> ControlPolicy:
    n = family.lattice.nsites
    nF = basis.n_features()
    return ControlPolicy(basis, [np.zeros((n, nF)) for _ in range(family.n_path_steps)])


def policy_drift(policy: ControlPolicy) -> DriftModel:
    def step_force(family, step, states):
        return policy.predict(family, step.index, states)
    return DriftModel(force=None, step_force=step_force, name="controlled")


def policy_from_drift_representation(rep) -> ControlPolicy:
    """Warm start: the FBSDE drift regression negated (p = -E[DV])."""
    return ControlPolicy(rep.basis, [-t.copy() for t in rep.thetas])


class ClosedFormQuadraticPolicy:
    """Exact optimal control for quadratic potentials: p = -(1+B Q_{inf,a})^{-1} B psi."""

    def __init__(self, qfam: QFamily, bmult):
        self.qfam = qfam
        self.bmult = bmult

    def predict(self, family, step_index: int, states: np.ndarray) -> np.ndarray:
        tail = family.path_tail(step_index)
        eff = self.bmult.coeffs / (1.0 + self.bmult.coeffs * tail)
        return -multiplier_from_values(family.lattice, eff).apply(states)


@dataclass
class ObjectiveEstimate:
    value: float
    stderr: float
    per_traj: np.ndarray


def _control_cost_step(family, i, p):
    """(1/2) <p, dQ p> per trajectory: the step's share of (1/2) int <u,u> da."""
    lat = family.lattice
    axes = tuple(range(-lat.d, 0))
    dq = family.path_increment(i)
    return 0.5 * lat.cell * (p * dq.apply(p)).sum(axis=axes)


def psi_objective(policy: ControlPolicy, potential, qfam: QFamily, n_traj: int,
                  rng: RngStream) -> ObjectiveEstimate:
    """E[V(psi^u_inf) + (1/2) int <u,u> da] by grid quadrature, common random numbers.

    The analytic tail beyond a_max is appended (uncontrolled) before the
    terminal potential is evaluated.  Same-stream calls reuse identical
    noise, so policy comparisons are low-variance.
    """
    lat = qfam.lattice
    noise = RngStream(rng.seed, rng.stream)
    tail_stream = noise.child(0xA11)
    cost = np.zeros(n_traj)
    states = np.zeros((n_traj,) + lat.shape)
    for step in qfam.path:
        i = step.index
        p = policy.predict(qfam, i, states).reshape(n_traj, *lat.shape)
        cost += _control_cost_step(qfam, i, p)
        xi = unit_white_noise(lat, noise, size=n_traj)
        states = states + qfam.path_increment(i).apply(p) + qfam.path_increment_sqrt(i).apply(xi)
        if not np.all(np.isfinite(states)):
            from .sde import SimulationBlowUp
            raise SimulationBlowUp(i + 1, step.a)
    psi_inf = sample_terminal(qfam, states, tail_stream)
    total = cost + np.asarray(potential.value(psi_inf), dtype=float)
    return ObjectiveEstimate(
        value=float(total.mean()),
        stderr=float(total.std(ddof=1) / np.sqrt(n_traj)),
        per_traj=total,
    )


# ---------------------------------------------------------------------------
# Pathwise adjoint gradient
# ---------------------------------------------------------------------------

def _feature_vjp(basis: RegressionBasis, family, grid_index: int, states: np.ndarray,
                 theta: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """(d p / d psi)^T mu for the feature-linear per-site policy.

    ``states``/``mu`` are (T, *shape); theta is (nsites, F).  Mirrors the
    feature layout of RegressionBasis.features.
    """
    lat = family.lattice
    T = states.shape[0]
    flat = states.reshape(T, lat.nsites)
    mu_flat = mu.reshape(T, lat.nsites)
    out = np.zeros_like(flat)
    col = 1
    if basis.include_raw:
        local = np.zeros_like(flat)
        for p in range(1, basis.degree + 1):
            coef = theta[:, col][None, :]
            local += coef * p * flat ** (p - 1)
            col += 1
        out += local * mu_flat
    smooth_sources = []
    if basis.include_smoothed:
        smooth_sources.append(1.0)
    smooth_sources.extend(basis.extra_smooth_factors)
    for factor in smooth_sources:
        cfam = getattr(family, "cfam", family)
        a = family.grid.scales[max(grid_index, 1)] * factor
        jj = max(1, int(np.argmin(np.abs(cfam.grid.scales - a))))
        smoother = cfam.level(jj)
        s = smoother.apply(states).reshape(T, lat.nsites)
        inner = np.zeros_like(flat)
        for p in range(1, basis.degree + 1):
            coef = theta[:, col][None, :]
            inner += coef * p * s ** (p - 1)
            col += 1
        out += smoother.apply((inner * mu_flat).reshape(states.shape)).reshape(T, lat.nsites)
    if basis.include_average:
        w = np.ones(lat.nsites) if basis.rho is None else np.asarray(basis.rho).reshape(-1)
        coef = theta[:, col]
        proj = (mu_flat * coef[None, :]).sum(axis=1)
        out += proj[:, None] * (w / w.sum())[None, :]
    return out.reshape(states.shape)


def objective_gradient(policy: ControlPolicy, potential, qfam: QFamily, n_traj: int,
                       rng: RngStream):
    """Minibatch objective and its exact gradient in the policy coefficients.

    Reverse sweep of the discrete controlled chain with the noise held
    fixed (pathwise derivative); returns (objective mean, [dJ/dtheta_i]).
    """
    lat = qfam.lattice
    noise = RngStream(rng.seed, rng.stream)
    tail_stream = noise.child(0xA11)
    cell = lat.cell
    states = np.zeros((n_traj,) + lat.shape)
    saved_states = []
    saved_X = []
    saved_p = []
    cost = np.zeros(n_traj)
    for step in qfam.path:
        i = step.index
        X = policy.basis.features(qfam, step.grid_index, states)
        p = np.einsum("tnf,nf->tn", X, policy.thetas[i]).reshape(states.shape)
        saved_states.append(states)
        saved_X.append(X)
        saved_p.append(p)
        cost += _control_cost_step(qfam, i, p)
        xi = unit_white_noise(lat, noise, size=n_traj)
        states = states + qfam.path_increment(i).apply(p) + qfam.path_increment_sqrt(i).apply(xi)
    psi_inf = sample_terminal(qfam, states, tail_stream)
    value = cost + np.asarray(potential.value(psi_inf), dtype=float)

    # raw-coordinate adjoint: lambda = dJ/d(states)
    lam = cell * np.asarray(potential.grad(psi_inf), dtype=float)
    grads = [None] * qfam.n_path_steps
    for step in reversed(qfam.path):
        i = step.index
        p = saved_p[i]
        mu = qfam.path_increment(i).apply(lam + cell * p)      # dJ/dp (raw)
        X = saved_X[i]
        grads[i] = np.einsum("tnf,tn->nf", X, mu.reshape(n_traj, lat.nsites)) / n_traj
        lam = lam + _feature_vjp(policy.basis, qfam, step.grid_index, saved_states[i],
                                 policy.thetas[i], mu)
    return float(value.mean()), grads


@dataclass
class OptimizationTrace:
    objective: list
    smoothed: list
    eval_points: list
    diverged: bool


def optimize_policy(potential, qfam: QFamily, basis: RegressionBasis, rng: RngStream,
                    n_iterations: int = 300, minibatch: int = 128, learning_rate: float = 0.05,
                    decay: float = 1.0, eval_every: int = 25, eval_traj: int = 1024,
                    patience: int = 6, init: ControlPolicy | None = None) -> tuple:
    """Adam on the policy coefficients with pathwise minibatch gradients.

    Fresh noise per minibatch; a fixed common-random-number stream scores
    candidate policies every ``eval_every`` iterations and the best scorer
    is returned.  ``decay`` multiplies the learning rate down geometrically
    over the run.  If the smoothed objective keeps increasing over the
    patience window the run stops and the best-so-far is flagged.
    """
    policy = init.copy() if init is not None else zero_policy(qfam, basis)
    m = [np.zeros_like(t) for t in policy.thetas]
    v = [np.zeros_like(t) for t in policy.thetas]
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    trace = OptimizationTrace(objective=[], smoothed=[], eval_points=[], diverged=False)
    eval_stream = rng.child(0xE7A1)
    best = policy.copy()
    best_score = psi_objective(policy, potential, qfam, eval_traj, eval_stream).value
    trace.eval_points.append((0, best_score))
    ema = None
    bad = 0
    for it in range(1, n_iterations + 1):
        mb_rng = rng.child(it)
        val, grads = objective_gradient(policy, potential, qfam, minibatch, mb_rng)
        trace.objective.append(val)
        ema = val if ema is None else 0.9 * ema + 0.1 * val
        trace.smoothed.append(ema)
        lr = learning_rate * decay ** (it / n_iterations)
        for i, g in enumerate(grads):
            m[i] = beta1 * m[i] + (1 - beta1) * g
            v[i] = beta2 * v[i] + (1 - beta2) * g * g
            mhat = m[i] / (1 - beta1**it)
            vhat = v[i] / (1 - beta2**it)
            policy.thetas[i] -= lr * mhat / (np.sqrt(vhat) + eps_adam)
        policy.clip_()
        if it % eval_every == 0 or it == n_iterations:
            score = psi_objective(policy, potential, qfam, eval_traj, eval_stream).value
            trace.eval_points.append((it, score))
            if score < best_score:
                best_score = score
                best = policy.copy()
                bad = 0
            else:
                bad += 1
                if bad >= patience:
                    trace.diverged = True
                    break
    return best, trace


# ---------------------------------------------------------------------------
# First-order (weak) condition
# ---------------------------------------------------------------------------

@dataclass
class WeakResidual:
    value: float
    stderr: float

    @property
    def z(self) -> float:
        return self.value / max(self.stderr, 1e-300)


def weak_residual(policy: ControlPolicy, potential, qfam: QFamily, test_policy: ControlPolicy,
                  n_traj: int, rng: RngStream) -> WeakResidual:
    """Monte Carlo E[int <v, u> da + <int Qdot^{1/2} v da, DV(psi^u_inf)>].

    The adapted test field v is generated by ``test_policy`` along the
    controlled path (v = Qdot^{1/2} q).  Zero within error at a minimiser.
    """
    lat = qfam.lattice
    axes = tuple(range(-lat.d, 0))
    noise = RngStream(rng.seed, rng.stream)
    tail_stream = noise.child(0xA11)
    states = np.zeros((n_traj,) + lat.shape)
    inner = np.zeros(n_traj)
    w_acc = np.zeros_like(states)
    for step in qfam.path:
        i = step.index
        p = policy.predict(qfam, i, states)
        q = test_policy.predict(qfam, i, states)
        dq = qfam.path_increment(i)
        inner += lat.cell * (q * dq.apply(p)).sum(axis=axes)    # <v, u> da with v = G q, u = G p
        w_acc += dq.apply(q)                                    # int Qdot^{1/2} v da
        xi = unit_white_noise(lat, noise, size=n_traj)
        states = states + dq.apply(p) + qfam.path_increment_sqrt(i).apply(xi)
    psi_inf = sample_terminal(qfam, states, tail_stream)
    dv = np.asarray(potential.grad(psi_inf), dtype=float)
    outer = lat.cell * (w_acc * dv).sum(axis=axes)
    total = inner + outer
    return WeakResidual(value=float(total.mean()), stderr=float(total.std(ddof=1) / np.sqrt(n_traj)))


def feature_test_policies(qfam: QFamily, basis: RegressionBasis, amplitude: float = 1.0,
                          rng: RngStream | None = None, n_random: int = 2) -> list:
    """Adapted test-field suite: unit feature directions plus random mixes."""
    policies = []
    nF = basis.n_features()
    n = qfam.lattice.nsites
    for f in range(nF):
        pol = zero_policy(qfam, basis)
        for th in pol.thetas:
            th[:, f] = amplitude
        policies.append(pol)
    if rng is not None:
        for k in range(n_random):
            pol = zero_policy(qfam, basis)
            mix = rng.normal((n, nF)) * amplitude / np.sqrt(nF)
            for th in pol.thetas:
                th[:] = mix
            policies.append(pol)
    return policies
