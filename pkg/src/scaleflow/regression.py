"""Feature bases and ridge regression for scale-conditional expectations.

Conditional expectations given the scale-``a`` state are estimated by
per-site ridge least squares on adapted features of the state: raw site
values and their powers, block-averaged (C_a-smoothed) values and their
powers, and weighted spatial averages.  The same basis parametrises FBSDE
drift representations, variational control policies and martingale
residual tests, so cross-checks compare like with like.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lattice import ValidationError


class RegressionError(RuntimeError):
    """Ill-posed regression (rank deficiency after regularisation)."""


@dataclass(frozen=True)
class RegressionBasis:
    """Adapted per-site feature map (a, state) -> feature vector.

    Features per site x: constant, psi(x)^p and (C_a psi)(x)^p for
    p = 1..degree, optionally extra smoothing scales (grid scale nearest to
    factor*a), and a rho-weighted spatial average.  Feature count must stay
    below a tenth of the sample count.
    """

    degree: int = 3
    include_raw: bool = True
    include_smoothed: bool = True
    extra_smooth_factors: tuple = ()
    include_average: bool = True
    rho: np.ndarray | None = None
    ridge: float = 1e-9

    def n_features(self) -> int:
        n = 1
        if self.include_raw:
            n += self.degree
        if self.include_smoothed:
            n += self.degree
        n += self.degree * len(self.extra_smooth_factors)
        if self.include_average:
            n += 1
        return n

    def feature_names(self) -> list:
        names = ["1"]
        if self.include_raw:
            names += [f"psi^{p}" for p in range(1, self.degree + 1)]
        if self.include_smoothed:
            names += [f"s^{p}" for p in range(1, self.degree + 1)]
        for g in self.extra_smooth_factors:
            names += [f"s[{g}a]^{p}" for p in range(1, self.degree + 1)]
        if self.include_average:
            names += ["rho_avg"]
        return names

    def features(self, family, j: int, states: np.ndarray) -> np.ndarray:
        """Feature tensor of shape (T, nsites, F) for states (T, *shape)."""
        lat = family.lattice
        T = states.shape[0]
        flat = states.reshape(T, lat.nsites)
        cols = [np.ones_like(flat)]
        if self.include_raw:
            p = flat
            for _ in range(self.degree):
                cols.append(p)
                p = p * flat
        smooth_sources = []
        if self.include_smoothed:
            smooth_sources.append(1.0)
        smooth_sources.extend(self.extra_smooth_factors)
        for factor in smooth_sources:
            s = self._smoothed(family, j, states, factor).reshape(T, lat.nsites)
            p = s
            for _ in range(self.degree):
                cols.append(p)
                p = p * s
        if self.include_average:
            w = np.ones(lat.nsites) if self.rho is None else np.asarray(self.rho).reshape(-1)
            avg = (flat * w).sum(axis=1) / w.sum()
            cols.append(np.broadcast_to(avg[:, None], flat.shape))
        return np.stack(cols, axis=-1)

    def _smoothed(self, family, j: int, states: np.ndarray, factor: float) -> np.ndarray:
        cfam = getattr(family, "cfam", family)
        a = family.grid.scales[max(j, 1)] * factor
        jj = max(1, int(np.argmin(np.abs(cfam.grid.scales - a))))
        return cfam.level(jj).apply(states)


@dataclass
class RegressionFit:
    """Per-site linear predictor with fit diagnostics."""

    coef: np.ndarray          # (nsites, F)
    basis: RegressionBasis
    scale_index: int
    in_sample_rms: float
    out_sample_rms: float
    target_rms: float

    def predict_from_features(self, X: np.ndarray) -> np.ndarray:
        return np.einsum("tnf,nf->tn", X, self.coef)

    def predict(self, family, states: np.ndarray) -> np.ndarray:
        X = self.basis.features(family, self.scale_index, states)
        return self.predict_from_features(X).reshape(states.shape)


def _solve_ridge(X: np.ndarray, Y: np.ndarray, ridge: float) -> np.ndarray:
    """Batched per-site ridge solve: X (T,n,F), Y (T,n) -> coef (n,F)."""
    T = X.shape[0]
    G = np.einsum("tnf,tng->nfg", X, X) / T
    b = np.einsum("tnf,tn->nf", X, Y) / T
    scale = np.maximum(np.einsum("nff->nf", G), 1e-30)
    F = X.shape[-1]
    reg = ridge * scale[:, :, None] * np.eye(F)[None]
    try:
        coef = np.linalg.solve(G + reg, b[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        conds = np.linalg.cond(G + reg)
        raise RegressionError(
            f"rank-deficient design, condition numbers up to {conds.max():.3e}"
        ) from exc
    if not np.all(np.isfinite(coef)):
        raise RegressionError("non-finite regression coefficients")
    return coef


def regress_conditional(states: np.ndarray, targets: np.ndarray, basis: RegressionBasis,
                        family, j: int, holdout: float = 0.2) -> RegressionFit:
    """Fit E[target | state at scale a_j] by per-site ridge least squares.

    ``states``/``targets`` are (T, *shape) pairs; requires at least ten
    samples per feature.  Returns the predictor with in-sample and held-out
    residual norms.
    """
    T = states.shape[0]
    nF = basis.n_features()
    if T < 10 * nF:
        raise ValidationError(f"need >= {10 * nF} samples for {nF} features, got {T}")
    lat = family.lattice
    X = basis.features(family, j, states)
    Y = targets.reshape(T, lat.nsites)
    n_hold = max(1, int(holdout * T)) if holdout > 0 else 0
    n_fit = T - n_hold
    coef = _solve_ridge(X[:n_fit], Y[:n_fit], basis.ridge)
    fit_pred = np.einsum("tnf,nf->tn", X[:n_fit], coef)
    in_rms = float(np.sqrt(np.mean((fit_pred - Y[:n_fit]) ** 2)))
    if n_hold:
        hold_pred = np.einsum("tnf,nf->tn", X[n_fit:], coef)
        out_rms = float(np.sqrt(np.mean((hold_pred - Y[n_fit:]) ** 2)))
    else:
        out_rms = in_rms
    fit = RegressionFit(
        coef=coef,
        basis=basis,
        scale_index=j,
        in_sample_rms=in_rms,
        out_sample_rms=out_rms,
        target_rms=float(np.sqrt(np.mean(Y**2))),
    )
    return fit


def accumulate_normal_equations(X: np.ndarray, Y: np.ndarray, into=None):
    """Streaming (X^T X, X^T Y, count) accumulation for two-pass solvers."""
    G = np.einsum("tnf,tng->nfg", X, X)
    b = np.einsum("tnf,tn->nf", X, Y)
    if into is None:
        return [G, b, X.shape[0]]
    into[0] += G
    into[1] += b
    into[2] += X.shape[0]
    return into


def solve_normal_equations(acc, ridge: float) -> np.ndarray:
    G, b, T = acc
    G = G / T
    b = b / T
    scale = np.maximum(np.einsum("nff->nf", G), 1e-30)
    F = G.shape[-1]
    reg = ridge * scale[:, :, None] * np.eye(F)[None]
    try:
        return np.linalg.solve(G + reg, b[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise RegressionError("rank-deficient streaming design") from exc


# ---------------------------------------------------------------------------
# Conditional-mean hypothesis tests
# ---------------------------------------------------------------------------

@dataclass
class ConditionalMeanTest:
    """z-statistics for H0: E[y | features] = 0."""

    z_mean: float
    z_coefs: np.ndarray
    fitted_rms: float
    n: int

    @property
    def z_max(self) -> float:
        return float(max(abs(self.z_mean), np.abs(self.z_coefs).max()))


def conditional_mean_test(X: np.ndarray, y: np.ndarray) -> ConditionalMeanTest:
    """OLS of scalar samples y on rows of X (with intercept prepended).

    Under the martingale null every coefficient is 0; reports per
    coefficient z-scores and the fitted-value RMS.
    """
    y = np.asarray(y, dtype=float)
    T = y.size
    X = np.column_stack([np.ones(T), np.asarray(X, dtype=float).reshape(T, -1)])
    G = X.T @ X
    scale = np.diag(G).copy()
    G_reg = G + 1e-12 * np.diag(np.maximum(scale, 1e-30))
    beta = np.linalg.solve(G_reg, X.T @ y)
    resid = y - X @ beta
    dof = max(T - X.shape[1], 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(G_reg)
    se = np.sqrt(np.maximum(np.diag(cov), 1e-300))
    z = beta / se
    fitted = X @ beta
    return ConditionalMeanTest(
        z_mean=float(z[0]),
        z_coefs=z[1:],
        fitted_rms=float(np.sqrt(np.mean(fitted**2))),
        n=T,
    )
