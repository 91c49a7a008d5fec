"""Independent samplers and exact computations for the terminal Gibbs law.

Everything here is deliberately independent of the forward solvers: the
preconditioned Crank--Nicolson chain needs only exact reference-Gaussian
draws and potential evaluations, the tensor quadrature brute-forces tiny
site counts, and the one-dimensional references come from closed formulas
or a finite-difference eigensolver.  These are the ground truth the
solver modules are gated against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .lattice import RngStream, ValidationError, multiplier_from_values, unit_white_noise
from .kernels import QFamily


class OracleError(RuntimeError):
    pass


@dataclass
class GibbsTarget:
    """Terminal law: reference Gaussian with covariance Q_{inf,0} tilted by exp(-V)."""

    qfam: QFamily
    potential: object

    def __post_init__(self):
        if self.qfam.total_covariance().min() <= 0:
            raise ValidationError("reference covariance must be positive definite modewise")

    def reference_sample(self, rng: RngStream, size=None) -> np.ndarray:
        cov = self.qfam.total_covariance()
        mult = multiplier_from_values(self.qfam.lattice, np.sqrt(cov))
        return mult.apply(unit_white_noise(self.qfam.lattice, rng, size=size))

    def covariance_matrix(self) -> np.ndarray:
        """Dense site-space covariance of the reference Gaussian."""
        lat = self.qfam.lattice
        mult = multiplier_from_values(lat, self.qfam.total_covariance())
        n = lat.nsites
        if lat.d != 1:
            deltas = np.eye(n).reshape((n,) + lat.shape) / lat.cell
            return mult.apply(deltas).reshape(n, n).T
        kernel = mult.position_kernel().reshape(-1)
        idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
        return kernel[idx]


# ---------------------------------------------------------------------------
# Preconditioned Crank--Nicolson
# ---------------------------------------------------------------------------

@dataclass
class ChainDiagnostics:
    acceptance_rate: float
    iact: np.ndarray            # per-site integrated autocorrelation times
    gelman_rubin: np.ndarray    # per-site potential scale reduction
    n_chains: int
    n_kept: int

    @property
    def iact_max(self) -> float:
        return float(self.iact.max())


@dataclass
class McmcResult:
    samples: np.ndarray         # (n_kept, n_chains, *shape)
    diagnostics: ChainDiagnostics

    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1, *self.samples.shape[2:])


def pcn_mcmc(target: GibbsTarget, n_steps: int, beta: float, rng: RngStream,
             n_chains: int = 4, burn_fraction: float = 0.2, thin: int = 1,
             min_acceptance: float = 0.01) -> McmcResult:
    """Preconditioned Crank--Nicolson chain for the tilted Gaussian.

    Proposes psi' = sqrt(1 - beta^2) psi + beta xi with xi drawn exactly
    from the reference Gaussian and accepts with min(1, exp(V(psi) -
    V(psi'))), so the V = 0 chain accepts every proposal and is exact.
    Aborts if the acceptance rate drops below ``min_acceptance``.
    """
    if not (0.0 < beta <= 1.0):
        raise ValidationError(f"pCN step must satisfy 0 < beta <= 1, got {beta}")
    lat = target.qfam.lattice
    state = target.reference_sample(rng.child(1), size=n_chains)
    v = np.asarray(target.potential.value(state), dtype=float)
    prop_rng = rng.child(2)
    acc_rng = rng.child(3)
    kept = []
    n_burn = int(burn_fraction * n_steps)
    accepted = 0
    total = 0
    root = np.sqrt(1.0 - beta * beta)
    for step in range(n_steps):
        xi = target.reference_sample(prop_rng, size=n_chains)
        proposal = root * state + beta * xi
        v_new = np.asarray(target.potential.value(proposal), dtype=float)
        logu = np.log(acc_rng.uniform((n_chains,)) + 1e-300)
        accept = logu < (v - v_new)
        state = np.where(accept.reshape((-1,) + (1,) * lat.d), proposal, state)
        v = np.where(accept, v_new, v)
        accepted += int(accept.sum())
        total += n_chains
        if step >= n_burn and (step - n_burn) % thin == 0:
            kept.append(state.copy())
        if step == max(200, n_burn) and accepted / max(total, 1) < min_acceptance:
            raise OracleError(
                f"pCN acceptance rate {accepted / total:.3%} below {min_acceptance:.0%}; reduce beta"
            )
    rate = accepted / max(total, 1)
    if rate < min_acceptance:
        raise OracleError(f"pCN acceptance rate {rate:.3%} below {min_acceptance:.0%}; reduce beta")
    samples = np.stack(kept)
    diag = _chain_diagnostics(samples, rate)
    return McmcResult(samples=samples, diagnostics=diag)


def _chain_diagnostics(samples: np.ndarray, rate: float) -> ChainDiagnostics:
    n_kept, n_chains = samples.shape[:2]
    flat_sites = samples.reshape(n_kept, n_chains, -1)
    iact = np.array([
        np.mean([integrated_autocorrelation(flat_sites[:, c, s]) for c in range(n_chains)])
        for s in range(flat_sites.shape[2])
    ])
    gr = gelman_rubin(flat_sites)
    return ChainDiagnostics(
        acceptance_rate=rate, iact=iact, gelman_rubin=gr,
        n_chains=n_chains, n_kept=n_kept,
    )


def integrated_autocorrelation(series: np.ndarray, window: float = 6.0) -> float:
    """Self-consistent windowed IACT (sum truncated at window * tau)."""
    x = np.asarray(series, dtype=float)
    x = x - x.mean()
    n = x.size
    if n < 8 or x.std() == 0:
        return 1.0
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acf = np.fft.irfft(f * np.conj(f))[:n].real
    acf /= acf[0]
    tau = 1.0
    for m in range(1, n):
        tau += 2.0 * acf[m]
        if m >= window * tau:
            break
    return max(tau, 1.0)


def gelman_rubin(chains: np.ndarray) -> np.ndarray:
    """Potential scale reduction per site for (n, m, sites) chains."""
    n, m = chains.shape[:2]
    means = chains.mean(axis=0)
    B = n * means.var(axis=0, ddof=1) if m > 1 else np.zeros(chains.shape[2])
    W = chains.var(axis=0, ddof=1).mean(axis=0)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(np.where(W > 0, var_plus / np.maximum(W, 1e-300), 1.0))
    return r


def batch_mean_stderr(series: np.ndarray, n_batches: int = 32) -> float:
    """Conservative stderr of the mean by non-overlapping batch means."""
    x = np.asarray(series, dtype=float).ravel()
    n_batches = min(n_batches, max(2, x.size // 4))
    usable = (x.size // n_batches) * n_batches
    batches = x[:usable].reshape(n_batches, -1).mean(axis=1)
    return float(batches.std(ddof=1) / np.sqrt(n_batches))


# ---------------------------------------------------------------------------
# Tensor quadrature (<= 3 sites)
# ---------------------------------------------------------------------------

@dataclass
class MomentTable:
    first: np.ndarray          # <psi_x>
    second: np.ndarray         # <psi_x psi_y>
    fourth: np.ndarray         # <psi_x^4>
    nodes: int

    def row_dicts(self) -> list:
        rows = []
        s = self.first.size
        for x in range(s):
            rows.append({"kind": "mean", "x": x, "y": x, "value": self.first[x]})
        for x in range(s):
            for y in range(x, s):
                rows.append({"kind": "pair", "x": x, "y": y, "value": self.second[x, y]})
        for x in range(s):
            rows.append({"kind": "fourth", "x": x, "y": x, "value": self.fourth[x]})
        return rows


def tensor_quadrature(target: GibbsTarget, nodes: int = 64, rel_tol: float = 1e-8,
                      max_doublings: int = 3) -> MomentTable:
    """Gauss--Hermite tensor quadrature of the tilted-Gaussian moments.

    Deterministic oracle for up to three sites; convergence is verified by
    node doubling (relative change below ``rel_tol``) and failure to
    converge is an error.
    """
    lat = target.qfam.lattice
    s = lat.nsites
    if s > 3:
        raise ValidationError(f"tensor quadrature is for <= 3 sites, got {s}")
    if nodes < 64:
        raise ValidationError("need at least 64 nodes per site")
    prev = None
    for _ in range(max_doublings + 1):
        table = _gh_moments(target, nodes)
        if prev is not None:
            num = max(
                np.abs(table.second - prev.second).max(),
                np.abs(table.fourth - prev.fourth).max(),
                np.abs(table.first - prev.first).max(),
            )
            den = max(np.abs(table.second).max(), np.abs(table.fourth).max(), 1e-12)
            if num / den < rel_tol:
                return table
        prev = table
        nodes *= 2
    raise OracleError(f"quadrature failed to converge at {nodes // 2} nodes per site")


def _gh_moments(target: GibbsTarget, nodes: int) -> MomentTable:
    lat = target.qfam.lattice
    s = lat.nsites
    cov = target.covariance_matrix()
    w_evals, w_evecs = np.linalg.eigh(cov)
    if w_evals.min() <= 0:
        raise OracleError("reference covariance matrix not positive definite")
    root = w_evecs @ np.diag(np.sqrt(w_evals))
    x1, w1 = np.polynomial.hermite_e.hermegauss(nodes)   # weight exp(-z^2/2)
    grids = np.meshgrid(*([x1] * s), indexing="ij")
    z = np.stack([g.ravel() for g in grids], axis=-1)    # (nodes^s, s)
    logw = np.zeros(z.shape[0])
    for g in np.meshgrid(*([np.log(w1)] * s), indexing="ij"):
        logw += g.ravel()
    psi = z @ root.T                                      # (points, s)
    v = np.asarray(target.potential.value(psi.reshape((-1,) + lat.shape)), dtype=float)
    logp = logw - v
    logp -= logp.max()
    p = np.exp(logp)
    Z = p.sum()
    first = (p @ psi) / Z
    second = (psi.T * p) @ psi / Z
    fourth = (p @ psi**4) / Z
    return MomentTable(first=first, second=second, fourth=fourth, nodes=nodes)


# ---------------------------------------------------------------------------
# One-dimensional references
# ---------------------------------------------------------------------------

@dataclass
class OuReference:
    separations: np.ndarray
    continuum: np.ndarray      # (1/2) exp(-|x-y|) at lattice separations
    lattice_exact: np.ndarray  # inverse symbol covariance on the lattice
    discretization: np.ndarray  # |lattice_exact - continuum| per separation


def ou_reference(qfam: QFamily) -> OuReference:
    """Exact references for the d=1 massive free field.

    ``continuum`` samples (1/2) e^{-|x-y|}; ``lattice_exact`` is the exact
    lattice covariance of the sampled field (inverse-symbol transform of
    Q_{inf,0}), so their difference accounts for discretisation and torus
    wrap deterministically.
    """
    lat = qfam.lattice
    if lat.d != 1:
        raise ValidationError("the Ornstein-Uhlenbeck reference is one-dimensional")
    sep = lat.separation()
    continuum = 0.5 * np.exp(-np.abs(sep))
    mult = multiplier_from_values(lat, qfam.total_covariance())
    lattice_exact = mult.position_kernel()
    return OuReference(
        separations=sep,
        continuum=continuum,
        lattice_exact=lattice_exact,
        discretization=np.abs(lattice_exact - continuum),
    )


@dataclass
class GroundStateDrift:
    grid: np.ndarray
    drift: np.ndarray
    energy: float
    resolution_error: float

    def __call__(self, x):
        return np.interp(x, self.grid, self.drift)


def ground_state_drift(v_coeffs, half_width: float = 8.0, n_points: int = 2001,
                       rel_tol: float = 1e-6) -> GroundStateDrift:
    """Spatial drift d/dphi log Psi for the Hamiltonian -d^2/2 + phi^2/2 + v(phi).

    Finite-difference eigensolver on [-half_width, half_width] with a
    resolution-doubling convergence check on the drift table.
    """
    v_coeffs = np.asarray(v_coeffs, dtype=float)
    lead = np.nonzero(v_coeffs)[0][-1] if v_coeffs.any() else 0
    if v_coeffs.any() and (lead % 2 == 1 or v_coeffs[lead] < 0):
        raise ValidationError("one-site potential must be bounded below")

    coarse = _solve_ground_state(v_coeffs, half_width, n_points)
    fine = _solve_ground_state(v_coeffs, half_width, 2 * n_points - 1)
    drift_c = np.interp(fine[0], coarse[0], coarse[1])
    scale = np.abs(fine[1]).max()
    err = float(np.abs(drift_c - fine[1]).max() / max(scale, 1e-12))
    if err > 200 * rel_tol:
        raise OracleError(f"eigensolver drift not converged: doubling change {err:.2e}")
    return GroundStateDrift(grid=fine[0], drift=fine[1], energy=fine[2], resolution_error=err)


def _solve_ground_state(v_coeffs, half_width, n_points):
    x = np.linspace(-half_width, half_width, n_points)
    h = x[1] - x[0]
    pot = 0.5 * x**2 + np.polynomial.polynomial.polyval(x, v_coeffs)
    diag = 1.0 / h**2 + pot
    off = np.full(n_points - 1, -0.5 / h**2)
    vals, vecs = eigh_tridiagonal(diag, off, select="i", select_range=(0, 0))
    psi = vecs[:, 0]
    psi *= np.sign(psi[np.argmax(np.abs(psi))])
    if psi.min() <= 0:
        psi = np.abs(psi) + 1e-300
    # central-difference log derivative; trim the outermost points
    dlog = (np.log(psi[2:]) - np.log(psi[:-2])) / (2 * h)
    xc = x[1:-1]
    # keep the window where the wavefunction is well above underflow
    keep = psi[1:-1] > psi.max() * 1e-12
    return xc[keep], dlog[keep], float(vals[0])
