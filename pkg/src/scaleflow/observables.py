"""Germ-based observables: remainders, coherence, products, coupled force systems.

A germ is a scale family of functionals with declared spatial support;
its observable is reconstructed as the germ value plus a remainder, the
conditional expectation of the generator integrated over the remaining
scales.  Remainders are estimated by nested sub-simulation with the same
step kernels as the forward chain, so reconstruction residuals on linear
systems are purely statistical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeSpec, RngStream, SpectralMultiplier, ValidationError
from .kernels import SmoothingFamily
from .regression import (
    RegressionBasis,
    accumulate_normal_equations,
    solve_normal_equations,
)
from .sde import DriftModel, run_chain


@dataclass
class Germ:
    """Scale family of scalar functionals with declared support.

    ``value(a, phi) -> scalar`` (batched over leading axes), ``grad``,
    ``hess_action`` and optional explicit ``da``; ``hess_trace(a, phi,
    mult)`` must return Tr[mult . D^2 O] (exact rules for the structured
    suite).  ``support`` is a boolean site mask (None = global) and
    ``radius(a)`` the declared enlargement radius; evaluation may only read
    sites within the enlargement.
    """

    value: callable
    grad: callable
    hess_trace: callable
    da: callable = None
    hess_action: callable = None
    support: np.ndarray | None = None
    radius: callable = None
    tail_bound: callable = None
    name: str = ""

    def enlargement(self, lattice: LatticeSpec, a: float) -> np.ndarray:
        """Site mask of the declared support enlarged by radius(a)."""
        if self.support is None:
            return np.ones(lattice.shape, dtype=bool)
        r = self.radius(a) if self.radius is not None else (1.0 / a if a > 0 else np.inf)
        if not np.isfinite(r):
            return np.ones(lattice.shape, dtype=bool)
        sep = lattice.separation()
        mask = np.zeros(lattice.shape, dtype=bool)
        coords = np.argwhere(self.support)
        for idx in coords:
            shifted = np.roll(sep, shift=tuple(idx), axis=tuple(range(lattice.d)))
            mask |= shifted <= r + 1e-12
        return mask


@dataclass
class ForceGerm:
    """Field-valued germ (an effective-force candidate).

    ``value(a, phi) -> field``; ``jac_action(a, phi, h)`` is the
    directional derivative of the field in direction h; ``hess_trace(a,
    phi, mult)`` returns the per-site field Tr[mult . D^2 f(x)].
    """

    value: callable
    jac_action: callable
    hess_trace: callable
    da: callable = None
    name: str = ""


def constant_germ(lattice: LatticeSpec, c: float) -> Germ:
    return Germ(
        value=lambda a, phi: np.broadcast_to(c, phi.shape[:-lattice.d]).copy()
        if phi.ndim > lattice.d else c,
        grad=lambda a, phi: np.zeros_like(phi),
        hess_trace=lambda a, phi, mult: 0.0,
        da=lambda a, phi: 0.0,
        support=np.zeros(lattice.shape, dtype=bool),
        name="constant",
    )


def linear_germ(lattice: LatticeSpec, g: np.ndarray, da_g=None, name="linear") -> Germ:
    """O_a(phi) = <g_a, phi> with optional scale-dependent g (g(a) callable)."""
    axes = tuple(range(-lattice.d, 0))
    g_fn = g if callable(g) else (lambda a: g)
    if not callable(g):
        support = np.asarray(g) != 0.0
    else:
        support = None

    def value(a, phi):
        return lattice.cell * (g_fn(a) * phi).sum(axis=axes)

    def grad(a, phi):
        return np.broadcast_to(g_fn(a), phi.shape).copy()

    def da(a, phi):
        if da_g is None:
            return 0.0
        return lattice.cell * (da_g(a) * phi).sum(axis=axes)

    return Germ(value=value, grad=grad, hess_trace=lambda a, phi, mult: 0.0,
                da=da, support=support, name=name)


def site_polynomial_germ(lattice: LatticeSpec, site, coeffs, name="site-poly") -> Germ:
    """O_a(phi) = v(phi(x0)) for a fixed site x0 and polynomial v."""
    coeffs = np.asarray(coeffs, dtype=float)
    d1 = np.polynomial.polynomial.polyder(coeffs)
    d2 = np.polynomial.polynomial.polyder(coeffs, 2)
    site = tuple(np.atleast_1d(site))
    support = np.zeros(lattice.shape, dtype=bool)
    support[site] = True
    idx = (Ellipsis,) + site

    def value(a, phi):
        return np.polynomial.polynomial.polyval(phi[idx], coeffs)

    def grad(a, phi):
        out = np.zeros_like(phi)
        out[idx] = np.polynomial.polynomial.polyval(phi[idx], d1) / lattice.cell
        return out

    def hess_trace(a, phi, mult):
        k0 = mult.coeffs.sum() / lattice.volume
        return np.polynomial.polynomial.polyval(phi[idx], d2) / lattice.cell * lattice.cell * k0

    return Germ(value=value, grad=grad, hess_trace=hess_trace,
                da=lambda a, phi: 0.0, support=support, name=name)


def local_polynomial_force_germ(lattice: LatticeSpec, coeffs, rho=None,
                                name="local-force") -> ForceGerm:
    """f(phi)(x) = -rho(x) v'(phi(x)) for polynomial v (sign of a gradient force)."""
    coeffs = np.asarray(coeffs, dtype=float)
    d1 = np.polynomial.polynomial.polyder(coeffs)
    d2 = np.polynomial.polynomial.polyder(coeffs, 2)
    d3 = np.polynomial.polynomial.polyder(coeffs, 3)
    w = 1.0 if rho is None else np.asarray(rho)

    def value(a, phi):
        return -w * np.polynomial.polynomial.polyval(phi, d1)

    def jac_action(a, phi, h):
        return -w * np.polynomial.polynomial.polyval(phi, d2) * h

    def hess_trace(a, phi, mult):
        k0 = mult.coeffs.sum() / lattice.volume
        return -w * np.polynomial.polynomial.polyval(phi, d3) * k0

    return ForceGerm(value=value, jac_action=jac_action, hess_trace=hess_trace,
                     da=lambda a, phi: np.zeros_like(phi), name=name)


def force_germ_drift(germ: ForceGerm) -> DriftModel:
    return DriftModel(force=lambda a, states: germ.value(a, states), name=germ.name)


# ---------------------------------------------------------------------------
# Ring generator
# ---------------------------------------------------------------------------

def ring_generator(germ, force_germ: ForceGerm, family: SmoothingFamily, a: float,
                   phi: np.ndarray):
    """Evaluate da O + <DO, Kdot_a f> + (1/2) Tr[Kdot_a D^2 O] at (a, phi).

    ``germ`` may be scalar (Germ) or field-valued (ForceGerm applied to
    itself); phi may carry leading batch axes.
    """
    lat = family.lattice
    j = family.grid.index(a)
    rate = family.rate(j)
    axes = tuple(range(-lat.d, 0))
    batched = phi.ndim > lat.d
    ph = phi if batched else phi[None]
    f = force_germ.value(a, ph)
    kf = rate.apply(f)
    if isinstance(germ, ForceGerm):
        out = germ.jac_action(a, ph, kf) + 0.5 * germ.hess_trace(a, ph, rate)
        if germ.da is not None:
            out = out + germ.da(a, ph)
    else:
        if germ.grad is None:
            raise ValidationError("germ must provide a gradient rule")
        out = lat.cell * (germ.grad(a, ph) * kf).sum(axis=axes) + 0.5 * germ.hess_trace(a, ph, rate)
        if germ.da is not None:
            out = out + germ.da(a, ph)
    return out if batched else np.asarray(out)[0]


def _step_ring_increment(germ, drift: DriftModel, family: SmoothingFamily, i: int,
                         states: np.ndarray):
    """Step-kernel compensator increment of a scalar germ along the chain."""
    lat = family.lattice
    axes = tuple(range(-lat.d, 0))
    step = family.path[i]
    inc = family.path_increment(i)
    f = drift.eval(family, step, states)
    term = lat.cell * (germ.grad(step.a, states) * inc.apply(f)).sum(axis=axes)
    term = term + 0.5 * germ.hess_trace(step.a, states, inc)
    if germ.da is not None:
        term = term + np.asarray(germ.da(step.a, states)) * step.da
    return term


# ---------------------------------------------------------------------------
# Remainder estimation and coherence
# ---------------------------------------------------------------------------

@dataclass
class RemainderEstimate:
    value: float
    stderr: float
    tail_bound: float


@dataclass
class Observable:
    """A germ with remainder machinery: O_a = germ(phi_a) + R_a."""

    germ: Germ
    drift: DriftModel
    family: SmoothingFamily
    budget: int = 256

    def reconstruct(self, j: int, phi: np.ndarray, rng: RngStream) -> tuple:
        a = self.family.grid.scales[j]
        r = remainder_estimate(self.germ, self.drift, self.family, j, phi, self.budget, rng)
        base = self.germ.value(a, phi)
        return float(base + r.value), r


def remainder_estimate(germ, drift: DriftModel, family: SmoothingFamily, j: int,
                       phi_b: np.ndarray, budget: int, rng: RngStream,
                       tail_tol: float = np.inf) -> RemainderEstimate:
    """R_b = E_b[ sum_{c >= b} generator increments ] by nested sub-simulation.

    Launches ``budget`` sub-trajectories from (a_j, phi_b) under ``drift``
    and integrates the germ's compensator with the chain's exact step
    kernels; the germ's analytic tail bound beyond a_max (when declared)
    is reported and enforced against ``tail_tol``.
    """
    start = family.checkpoint_of(j)
    totals = np.zeros(budget)

    def on_checkpoint(i, states):
        if i < family.n_path_steps:
            totals[:] += _step_ring_increment(germ, drift, family, i, states)

    run_chain(drift, family, rng, budget, on_checkpoint=on_checkpoint,
              initial=phi_b, start_checkpoint=start)
    tail = 0.0
    if germ.tail_bound is not None:
        tail = float(germ.tail_bound(family))
    elif np.isfinite(tail_tol):
        raise ValidationError("germ declares no analytic tail bound; enlarge a_max or provide one")
    if tail > tail_tol:
        raise ValidationError(f"tail bound {tail:.3e} exceeds tolerance {tail_tol:.3e}; enlarge a_max")
    return RemainderEstimate(
        value=float(totals.mean()),
        stderr=float(totals.std(ddof=1) / np.sqrt(budget)),
        tail_bound=tail,
    )


@dataclass
class CoherenceReport:
    value: float
    half_budget_value: float
    tail_bound: float

    @property
    def budget_stable(self) -> bool:
        scale = max(abs(self.value), 1e-12)
        return abs(self.value - self.half_budget_value) < 0.5 * scale + 1e-9


def coherence_norm(germ, force_germ: ForceGerm, drift: DriftModel, family: SmoothingFamily,
                   j: int, probe_states: np.ndarray, budget: int, rng: RngStream) -> CoherenceReport:
    """Estimate int_b^{a_max} | E_b[ring-generator of the germ] | dc plus tail.

    Sub-trajectories evolve under the system ``drift``; the integrand is
    the ring operator (germ force, not the full force).  Budget stability
    is reported via a half-budget comparison.
    """
    lat = family.lattice
    start = family.checkpoint_of(j)
    n_probe = probe_states.shape[0]
    vals = np.zeros((2, n_probe))
    for half, b in enumerate((max(budget // 2, 2), budget)):
        for p in range(n_probe):
            total = [0.0]

            def cb(i, states):
                if i >= family.n_path_steps:
                    return
                step = family.path[i]
                lv = ring_generator(germ, force_germ, family, step.a, states)
                cond_mean = np.mean(lv, axis=0)
                if np.ndim(cond_mean) > 0:
                    norm = np.sqrt(lat.cell * (cond_mean**2).sum())
                else:
                    norm = abs(float(cond_mean))
                total[0] += norm * step.da

            run_chain(drift, family, rng.child(17 * (p + 1) + half), b,
                      on_checkpoint=cb, initial=probe_states[p], start_checkpoint=start)
            vals[half, p] = total[0]
    tail = float(germ.tail_bound(family)) if germ.tail_bound is not None else 0.0
    return CoherenceReport(
        value=float(vals[1].mean() + tail),
        half_budget_value=float(vals[0].mean() + tail),
        tail_bound=tail,
    )


# ---------------------------------------------------------------------------
# Disjoint-support products
# ---------------------------------------------------------------------------

def support_distance(lattice: LatticeSpec, s1: np.ndarray, s2: np.ndarray) -> float:
    """Minimal periodic Euclidean distance between two site masks."""
    sep = lattice.separation()
    coords1 = np.argwhere(s1)
    coords2 = np.argwhere(s2)
    best = np.inf
    for i1 in coords1:
        for i2 in coords2:
            delta = lattice.min_image((i2 - i1) * lattice.eps)
            best = min(best, float(np.sqrt((delta**2).sum())))
    return best


def germ_product(o1: Germ, o2: Germ, a0: float, family, kernel_radius=None) -> Germ:
    """Product germ for disjointly supported coherent germs, valid for a >= a0.

    Requires the supports, enlarged at a0, to be farther apart than the
    averaging kernel's support radius at a0, so the mixed second-order
    term vanishes exactly on the lattice and the ring operator obeys the
    Leibniz rule.
    """
    lat = family.lattice
    if o1.support is None or o2.support is None:
        raise ValidationError("product germs need declared supports")
    r_kernel = kernel_radius if kernel_radius is not None else family.support_radius(a0)
    m1 = o1.enlargement(lat, a0)
    m2 = o2.enlargement(lat, a0)
    dist = support_distance(lat, m1, m2)
    if dist <= r_kernel:
        raise ValidationError(
            f"support distance {dist:.4g} within kernel radius {r_kernel:.4g} at a0={a0:.4g}"
        )

    def value(a, phi):
        return o1.value(a, phi) * o2.value(a, phi)

    def grad(a, phi):
        v1 = np.asarray(o1.value(a, phi))
        v2 = np.asarray(o2.value(a, phi))
        sh = (...,) + (None,) * lat.d
        return v2[sh] * o1.grad(a, phi) + v1[sh] * o2.grad(a, phi)

    def hess_trace(a, phi, mult):
        # cross term Tr[mult DO1 (x) DO2] vanishes by the support condition
        v1 = np.asarray(o1.value(a, phi))
        v2 = np.asarray(o2.value(a, phi))
        return v2 * o1.hess_trace(a, phi, mult) + v1 * o2.hess_trace(a, phi, mult)

    def da(a, phi):
        t = 0.0
        if o1.da is not None:
            t = t + np.asarray(o1.da(a, phi)) * o2.value(a, phi)
        if o2.da is not None:
            t = t + np.asarray(o2.da(a, phi)) * o1.value(a, phi)
        return t

    support = o1.support | o2.support
    tail = None
    if o1.tail_bound is not None and o2.tail_bound is not None:
        def tail(family_):
            return o1.tail_bound(family_) + o2.tail_bound(family_)

    return Germ(value=value, grad=grad, hess_trace=hess_trace, da=da,
                support=support, tail_bound=tail, name=f"{o1.name}*{o2.name}")


def product_cross_term(o1: Germ, o2: Germ, family, j: int, phi: np.ndarray) -> float:
    """<DO1, Cdot_a DO2> evaluated in position space (exact support algebra).

    Uses the compactly supported position kernel directly, so every
    contribution with a zero kernel entry is exactly 0.0.
    """
    from .lattice import position_apply

    lat = family.lattice
    a = family.grid.scales[j]
    kernel = family.rate_position_kernel(j)
    g1 = o1.grad(a, phi)
    g2 = o2.grad(a, phi)
    return float(lat.cell * (g1 * position_apply(lat, kernel, g2)).sum())


# ---------------------------------------------------------------------------
# Coupled force-germ / remainder system
# ---------------------------------------------------------------------------

@dataclass
class ForceSystemState:
    representation: object         # DriftRepresentation for the remainder field
    change_history: list
    converged: bool
    n_iterations: int


def force_germ_system_solve(germ: ForceGerm, family: SmoothingFamily, basis: RegressionBasis,
                            n_traj: int, rng: RngStream, tol: float = 5e-2,
                            max_iter: int = 10, damping: float = 0.5) -> tuple:
    """Picard iteration for the coupled forward / remainder system.

    Forward drift is germ + remainder; the remainder at each scale is the
    regression of the path integral of the ring generator plus the
    Jacobian coupling term, with the mixed initial/final conditions
    phi_0 = 0 and R_{a_max} = 0.  Returns (ForceSystemState, terminal
    ensemble).
    """
    from .fbsde import DriftRepresentation, zero_representation

    lat = family.lattice
    rep = zero_representation(family, basis)
    S = family.n_path_steps
    history = []
    converged = False
    terminal = None
    it = 0
    for it in range(max_iter):
        stream = rng.child(3000 + it)

        def step_force(fam, step, states):
            return germ.value(step.a, states) + rep.predict(fam, step.index, states)

        drift = DriftModel(force=None, step_force=step_force, name="force-germ")
        states_log = [None] * (S + 1)

        def keep(i, states):
            states_log[i] = states.copy()

        run_chain(drift, family, RngStream(stream.seed, stream.stream), n_traj,
                  on_checkpoint=keep)
        terminal = states_log[-1]

        # per-step source increments, then reverse cumulative targets
        increments = np.zeros((S, n_traj, lat.nsites))
        for i in range(S):
            step = family.path[i]
            ph = states_log[i]
            inc = family.path_increment(i)
            rhat = rep.predict(family, i, ph)
            ring = germ.jac_action(step.a, ph, inc.apply(germ.value(step.a, ph))) \
                + 0.5 * germ.hess_trace(step.a, ph, inc)
            if germ.da is not None:
                ring = ring + germ.da(step.a, ph) * step.da
            coupling = germ.jac_action(step.a, ph, inc.apply(rhat))
            increments[i] = (ring + coupling).reshape(n_traj, lat.nsites)
        targets = np.cumsum(increments[::-1], axis=0)[::-1]   # sum over c >= i

        change = 0.0
        scale = 0.0
        new_thetas = []
        for i in range(S):
            X = basis.features(family, family.path[i].grid_index, states_log[i])
            acc = accumulate_normal_equations(X, targets[i])
            theta = solve_normal_equations(acc, basis.ridge)
            new_thetas.append(theta)
            delta = theta - rep.thetas[i]
            G = acc[0] / acc[2]
            change = max(change, float(np.sqrt(max(np.einsum("nf,nfg,ng->", delta, G, delta), 0) / lat.nsites)))
            scale = max(scale, float(np.sqrt(max(np.einsum("nf,nfg,ng->", theta, G, theta), 0) / lat.nsites)))
        for i in range(S):
            rep.thetas[i] = rep.thetas[i] + damping * (new_thetas[i] - rep.thetas[i])
        rel = change / max(scale, 1e-12) if scale > 0 else change
        history.append(rel)
        if rel < tol:
            converged = True
            break
    return ForceSystemState(representation=rep, change_history=history,
                            converged=converged, n_iterations=it + 1), terminal
