"""Lattice connections, holonomies and gauge-covariant averaging.

Group data: U(1) as unit complex numbers with a real 1-component algebra,
SU(2) as unit quaternions with the 3-component algebra; the adjoint action
on the algebra is an exact isometry (rotation) and the algebra inner
product is the Euclidean one.

The gauge action on connections is implemented multiplicatively on link
variables U_i(x) = exp(eps * phi_i(x)) (exactly covariant) and additively
on the algebra (agrees to O(eps)); both are exposed and every test states
which it uses.  Holonomies follow a fixed axis-ordered staircase between
the lexicographically ordered endpoints, so h^{yx} = (h^{xy})^{-1} holds
by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import LatticeSpec, RngStream, ValidationError


class LieGroup:
    """Vectorised group/algebra operations for U(1) and SU(2)."""

    def __init__(self, kind: str):
        if kind not in ("u1", "su2"):
            raise ValidationError(f"unsupported structure group {kind!r}")
        self.kind = kind
        self.algebra_dim = 1 if kind == "u1" else 3

    # group elements: u1 -> complex arrays (...); su2 -> float arrays (..., 4)
    def identity(self, shape=()) -> np.ndarray:
        if self.kind == "u1":
            return np.ones(shape, dtype=complex)
        out = np.zeros(shape + (4,))
        out[..., 0] = 1.0
        return out

    def mul(self, g1, g2):
        if self.kind == "u1":
            return g1 * g2
        w1, v1 = g1[..., :1], g1[..., 1:]
        w2, v2 = g2[..., :1], g2[..., 1:]
        w = w1 * w2 - (v1 * v2).sum(axis=-1, keepdims=True)
        v = w1 * v2 + w2 * v1 + np.cross(v1, v2)
        return np.concatenate([w, v], axis=-1)

    def inv(self, g):
        if self.kind == "u1":
            return np.conj(g)
        out = g.copy()
        out[..., 1:] *= -1.0
        return out

    def renormalize(self, g):
        if self.kind == "u1":
            return g / np.abs(g)
        return g / np.linalg.norm(g, axis=-1, keepdims=True)

    def exp(self, x):
        """Algebra (..., dim) -> group element."""
        if self.kind == "u1":
            return np.exp(1j * x[..., 0])
        theta = np.linalg.norm(x, axis=-1, keepdims=True)
        half = 0.5 * theta
        w = np.cos(half)
        sinc = np.where(theta > 1e-12, np.sin(half) / np.maximum(theta, 1e-300), 0.5)
        return np.concatenate([w, sinc * x], axis=-1)

    def log(self, g):
        """Group -> algebra, principal branch."""
        if self.kind == "u1":
            return np.angle(g)[..., None]
        w = np.clip(g[..., :1], -1.0, 1.0)
        v = g[..., 1:]
        vn = np.linalg.norm(v, axis=-1, keepdims=True)
        half = np.arctan2(vn, w)
        fac = np.where(vn > 1e-12, 2.0 * half / np.maximum(vn, 1e-300), 2.0 / np.maximum(np.abs(w), 1e-300))
        return fac * v

    def ad(self, g, x):
        """Adjoint action on the algebra: exact rotation for SU(2), identity for U(1)."""
        if self.kind == "u1":
            return x
        w = g[..., :1]
        v = g[..., 1:]
        return x + 2.0 * w * np.cross(v, x) + 2.0 * np.cross(v, np.cross(v, x))

    def bracket(self, x, y):
        if self.kind == "u1":
            return np.zeros_like(x)
        return np.cross(x, y)

    def trace(self, g):
        """Trace of the defining representation (2 Re for SU(2), Re for U(1))."""
        if self.kind == "u1":
            return g.real
        return 2.0 * g[..., 0]


@dataclass
class LinkConnection:
    """Algebra-valued 1-form on links: values shape (d, *lattice.shape, algebra_dim)."""

    group: LieGroup
    lattice: LatticeSpec
    values: np.ndarray

    def __post_init__(self):
        expected = (self.lattice.d,) + self.lattice.shape + (self.group.algebra_dim,)
        v = np.asarray(self.values, dtype=float)
        if v.shape != expected:
            raise ValidationError(f"connection shape {v.shape} != {expected}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("connection entries must be finite")
        self.values = v

    def links(self) -> np.ndarray:
        """Group-valued link variables U_i(x) = exp(eps * phi_i(x))."""
        return self.group.exp(self.lattice.eps * self.values)


def zero_connection(group: LieGroup, lattice: LatticeSpec) -> LinkConnection:
    shape = (lattice.d,) + lattice.shape + (group.algebra_dim,)
    return LinkConnection(group, lattice, np.zeros(shape))


def random_connection(group: LieGroup, lattice: LatticeSpec, rng: RngStream,
                      amplitude: float = 0.3) -> LinkConnection:
    shape = (lattice.d,) + lattice.shape + (group.algebra_dim,)
    return LinkConnection(group, lattice, amplitude * rng.normal(shape))


def random_gauge_transform(group: LieGroup, lattice: LatticeSpec, rng: RngStream,
                           amplitude: float = 0.4) -> np.ndarray:
    """Smooth-ish random G-valued field g(x)."""
    x = amplitude * rng.normal(lattice.shape + (group.algebra_dim,))
    return group.exp(x)


def _roll_site(arr: np.ndarray, axis: int, shift: int, lattice: LatticeSpec):
    """Roll along a lattice axis of a (..., *shape, comp) or (..., *shape) array."""
    return np.roll(arr, -shift, axis=axis - lattice.d - 1)


def transform_links(phi: LinkConnection, g: np.ndarray) -> LinkConnection:
    """Multiplicative gauge action: U_i(x) -> g(x) U_i(x) g(x+e_i)^{-1}, logged back."""
    grp, lat = phi.group, phi.lattice
    U = phi.links()
    out = np.empty_like(phi.values)
    for i in range(lat.d):
        g_here = g
        g_next = _shift_group(grp, lat, g, i)
        Ui = grp.mul(grp.mul(g_here, U[i]), grp.inv(g_next))
        out[i] = grp.log(grp.renormalize(Ui)) / lat.eps
    return LinkConnection(grp, lat, out)


def transform_additive(phi: LinkConnection, g: np.ndarray) -> LinkConnection:
    """Algebra-level action Ad_g phi - (dg) g^{-1} with the lattice difference.

    (dg g^{-1})_i(x) is discretised as log(g(x+e_i) g(x)^{-1}) / eps; agrees
    with the multiplicative action to O(eps).
    """
    grp, lat = phi.group, phi.lattice
    out = np.empty_like(phi.values)
    for i in range(lat.d):
        g_next = _shift_group(grp, lat, g, i)
        dg = grp.log(grp.renormalize(grp.mul(g_next, grp.inv(g)))) / lat.eps
        out[i] = grp.ad(g, phi.values[i]) - dg
    return LinkConnection(grp, lat, out)


def transform_form(group: LieGroup, omega: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pointwise adjoint action on forms: (g . f)_i(x) = Ad_{g(x)} f_i(x)."""
    return np.stack([group.ad(g, omega[i]) for i in range(omega.shape[0])])


def _shift_group(group: LieGroup, lattice: LatticeSpec, g: np.ndarray, axis: int) -> np.ndarray:
    """g(x + e_axis) with periodic wrap."""
    if group.kind == "u1":
        return np.roll(g, -1, axis=axis)
    return np.roll(g, -1, axis=axis)


def covariant_derivative(phi: LinkConnection, h: np.ndarray) -> np.ndarray:
    """(d_phi h)_i = (h(x+e_i) - h(x))/eps + [phi_i, h], algebra-valued 1-form."""
    grp, lat = phi.group, phi.lattice
    out = np.empty_like(phi.values)
    for i in range(lat.d):
        h_next = np.roll(h, -1, axis=i)
        out[i] = (h_next - h) / lat.eps + grp.bracket(phi.values[i], h)
    return out


# ---------------------------------------------------------------------------
# Holonomies
# ---------------------------------------------------------------------------

def _min_image_steps(lattice: LatticeSpec, delta: np.ndarray) -> np.ndarray:
    n = lattice.n
    return (delta + n // 2) % n - n // 2


def holonomy(phi: LinkConnection, x, y) -> np.ndarray:
    """Parallel transport along the fixed axis-ordered staircase from x to y.

    Transforms as h^{xy}(g.phi) = g(x) h^{xy}(phi) g(y)^{-1} under the
    multiplicative link action; h^{yx} = (h^{xy})^{-1} by construction
    (the path between a site pair is canonical).
    """
    table = HolonomyTable(phi)
    return table.pair(tuple(np.atleast_1d(x)), tuple(np.atleast_1d(y)))


class HolonomyTable:
    """All-pairs staircase holonomies, vectorised by offset class.

    Leg products along each axis are built by cumulative link
    multiplication, then composed axis by axis for every minimal-image
    offset; the canonical path always starts at the lexicographically
    smaller flat index.
    """

    def __init__(self, phi: LinkConnection):
        self.phi = phi
        grp, lat = phi.group, phi.lattice
        self.grp, self.lat = grp, lat
        U = phi.links()
        n = lat.n
        # legs[axis][s]: transport from each site x forward s steps along axis
        self.legs = []
        for axis in range(lat.d):
            acc = [grp.identity(lat.shape)]
            cur = acc[0]
            for s in range(1, n // 2 + 1):
                cur = grp.mul(cur, self._rolled(U[axis], axis, s - 1))
                acc.append(cur)
            self.legs.append(acc)
        self._table = None

    @staticmethod
    def _rolled(arr, axis, shift):
        return np.roll(arr, -shift, axis=axis)

    def _leg(self, axis: int, steps: int) -> np.ndarray:
        """Transport field x -> x + steps*e_axis (signed steps)."""
        grp = self.grp
        if steps == 0:
            return grp.identity(self.lat.shape)
        if steps > 0:
            return self.legs[axis][steps]
        fwd = self.legs[axis][-steps]
        fwd_from = self._rolled(fwd, axis, steps)  # start at x + steps*e
        return grp.inv(fwd_from)

    def offset_field(self, delta) -> np.ndarray:
        """h^{x, x+delta} for every base site x, one offset class at a time."""
        grp, lat = self.grp, self.lat
        out = grp.identity(lat.shape)
        pos = np.zeros(lat.d, dtype=int)
        for axis in range(lat.d):
            leg = self._leg(axis, int(delta[axis]))
            leg = np.roll(leg, shift=tuple(-pos), axis=tuple(range(lat.d))) if pos.any() else leg
            out = grp.mul(out, leg)
            pos[axis] += int(delta[axis])
        return out

    def full(self) -> np.ndarray:
        """Table h[x_flat, y_flat] of transports x -> y along canonical paths."""
        if self._table is not None:
            return self._table
        grp, lat = self.grp, self.lat
        n = lat.nsites
        shape = (n, n) if grp.kind == "u1" else (n, n, 4)
        table = np.zeros(shape, dtype=complex if grp.kind == "u1" else float)
        sites = np.array(list(np.ndindex(*lat.shape)))
        flat = np.arange(n)
        for delta_idx in np.ndindex(*lat.shape):
            delta = _min_image_steps(lat, np.array(delta_idx))
            field = self.offset_field(delta)           # h^{x, x+delta} for all x
            y_sites = (sites + np.array(delta_idx)) % lat.n
            y_flat = np.ravel_multi_index(y_sites.T, lat.shape)
            fld = field.reshape((n, -1)) if grp.kind == "su2" else field.reshape(n)
            # canonical: path from min(x,y); store both directions consistently
            for xf, yf in zip(flat, y_flat):
                if xf <= yf:
                    val = fld[xf]
                    table[xf, yf] = val
                    table[yf, xf] = self._inv_entry(val)
        self._table = table
        return table

    def _inv_entry(self, val):
        if self.grp.kind == "u1":
            return np.conj(val)
        out = val.copy()
        out[1:] *= -1.0
        return out

    def pair(self, x: tuple, y: tuple):
        lat = self.lat
        xf = np.ravel_multi_index(x, lat.shape)
        yf = np.ravel_multi_index(y, lat.shape)
        return self.full()[xf, yf]


# ---------------------------------------------------------------------------
# Covariant averaging
# ---------------------------------------------------------------------------

def covariant_averaging_sqrt(phi: LinkConnection, omega: np.ndarray, family, j: int,
                             table: HolonomyTable | None = None) -> np.ndarray:
    """Apply the field-dependent averaging square root to a 1-form.

    (Kdot^{1/2}(phi) w)_i(x) = eps^d sum_y chi(x, y) Ad_{h^{xy}(phi)} w_i(y)
    with chi the position kernel of the scalar family's Kdot_a^{1/2}; at
    phi = 0 this reduces exactly to the scalar operator per component.
    """
    grp, lat = phi.group, phi.lattice
    kernel = family.rate_sqrt(j).position_kernel().reshape(-1)
    if table is None:
        table = HolonomyTable(phi)
    hol = table.full()
    n = lat.nsites
    sep_idx = _pairwise_offset_index(lat)
    w = kernel[sep_idx]                      # chi(x - y), shape (n, n)
    out = np.empty_like(omega)
    d = lat.d
    for i in range(d):
        comp = omega[i].reshape(n, grp.algebra_dim)
        if grp.kind == "u1":
            transported = comp[None, :, :]
        else:
            transported = _ad_table(grp, hol, comp)
        out_i = lat.cell * np.einsum("xy,xyc->xc", w, np.broadcast_to(transported, (n, n, grp.algebra_dim)))
        out[i] = out_i.reshape(lat.shape + (grp.algebra_dim,))
    return out


def _ad_table(grp: LieGroup, hol: np.ndarray, comp: np.ndarray) -> np.ndarray:
    """Ad_{h[x,y]} comp[y] for all pairs: (n, n, 3)."""
    w = hol[..., :1]
    v = hol[..., 1:]
    x = comp[None, :, :]
    return x + 2.0 * w * np.cross(v, x) + 2.0 * np.cross(v, np.cross(v, x))


def _pairwise_offset_index(lattice: LatticeSpec) -> np.ndarray:
    """Flat kernel index of (x - y) mod L for all site pairs."""
    n = lattice.nsites
    sites = np.array(list(np.ndindex(*lattice.shape)))
    diff = (sites[:, None, :] - sites[None, :, :]) % lattice.n
    return np.ravel_multi_index(np.moveaxis(diff, -1, 0), lattice.shape).reshape(n, n)


def covariant_averaging(phi: LinkConnection, omega: np.ndarray, family, j: int,
                        table: HolonomyTable | None = None) -> np.ndarray:
    """Kdot_a(phi) = (Kdot_a^{1/2}(phi))^2: symmetric and nonnegative."""
    if table is None:
        table = HolonomyTable(phi)
    return covariant_averaging_sqrt(
        phi, covariant_averaging_sqrt(phi, omega, family, j, table), family, j, table
    )


def form_inner(lattice: LatticeSpec, w1: np.ndarray, w2: np.ndarray) -> float:
    """eps^d-weighted inner product of algebra-valued 1-forms."""
    return float(lattice.cell * (w1 * w2).sum())


def form_norm(lattice: LatticeSpec, w: np.ndarray) -> float:
    return float(np.sqrt(form_inner(lattice, w, w)))


def random_form(group: LieGroup, lattice: LatticeSpec, rng: RngStream,
                amplitude: float = 1.0) -> np.ndarray:
    return amplitude * rng.normal((lattice.d,) + lattice.shape + (group.algebra_dim,))


def noise_form(group: LieGroup, lattice: LatticeSpec, da: float, rng: RngStream) -> np.ndarray:
    """Algebra-valued white-noise 1-form increment, variance da/eps^d per component."""
    shape = (lattice.d,) + lattice.shape + (group.algebra_dim,)
    return rng.normal(shape) * np.sqrt(da / lattice.cell)


# ---------------------------------------------------------------------------
# Plaquettes and the shipped covariant test force
# ---------------------------------------------------------------------------

def plaquette(phi: LinkConnection, i: int, j: int) -> np.ndarray:
    """U_i(x) U_j(x+e_i) U_i(x+e_j)^{-1} U_j(x)^{-1}, a group-valued field."""
    grp, lat = phi.group, phi.lattice
    U = phi.links()
    Uj_xi = np.roll(U[j], -1, axis=i)
    Ui_xj = np.roll(U[i], -1, axis=j)
    return grp.mul(grp.mul(U[i], Uj_xi), grp.mul(grp.inv(Ui_xj), grp.inv(U[j])))


def wilson_loop_traces(phi: LinkConnection) -> np.ndarray:
    """Traces of all 1x1 plaquette holonomies (d >= 2)."""
    lat = phi.lattice
    if lat.d < 2:
        raise ValidationError("plaquettes need d >= 2")
    traces = []
    for i in range(lat.d):
        for j in range(i + 1, lat.d):
            traces.append(phi.group.trace(plaquette(phi, i, j)))
    return np.stack(traces)


def field_strength_force(phi: LinkConnection) -> np.ndarray:
    """Covariant test force: averaged plaquette logarithms per direction.

    f_i(x) = sum_{j != i} log(P_{ij}(x)) / eps^2 transforms as a form under
    the multiplicative gauge action (plaquettes conjugate by g(x)).  This
    is artifact plumbing: the shipped example of a gauge covariant force,
    not a construction from the source material.
    """
    grp, lat = phi.group, phi.lattice
    out = np.zeros_like(phi.values)
    for i in range(lat.d):
        for j in range(lat.d):
            if j == i:
                continue
            out[i] += grp.log(plaquette(phi, i, j)) / lat.eps**2
    return out


def force_covariance_residual(phi: LinkConnection, g: np.ndarray, force_fn) -> float:
    """max |g . f(phi) - f(g . phi)| under the multiplicative action."""
    grp = phi.group
    f_then = transform_form(grp, force_fn(phi), g)
    then_f = force_fn(transform_links(phi, g))
    return float(np.abs(f_then - then_f).max())


# ---------------------------------------------------------------------------
# Gauged dynamics consistency
# ---------------------------------------------------------------------------

@dataclass
class GaugedStepReport:
    da_values: list
    residuals: list

    @property
    def slope(self) -> float:
        x = np.log(np.asarray(self.da_values))
        y = np.log(np.maximum(np.asarray(self.residuals), 1e-300))
        return float(np.polyfit(x, y, 1)[0])


def gauged_step_residual(phi0: LinkConnection, force_fn, h: np.ndarray, family, j: int,
                         da: float, rng: RngStream, n_noise: int = 4) -> float:
    """One-step defect between the h-modified dynamics and the gauge-rotated reference.

    Euler step A adds the drift d_phi h; the gauge factor solves dg/da =
    h g over the step (g_1 = exp(da * h)); the reference step B is driven
    by the same noise (the rotated noise g.dW equals dW at the step start
    where g = id).  Returns the mean additive-action defect norm
    || g_1 . phi^(h) - phi^[h] ||, which scales as O(da^{3/2}).
    """
    grp, lat = phi0.group, phi0.lattice
    table = HolonomyTable(phi0)
    f0 = force_fn(phi0)
    kf = covariant_averaging(phi0, f0, family, j, table)
    dh = covariant_derivative(phi0, h)
    g1 = grp.exp(da * h)
    total = 0.0
    for k in range(n_noise):
        dw = noise_form(grp, lat, da, rng.child(k + 1))
        noise = covariant_averaging_sqrt(phi0, dw, family, j, table)
        phi_h = LinkConnection(grp, lat, phi0.values + (kf + dh) * da + noise)
        phi_ref = phi0.values + kf * da + noise
        rotated = transform_additive(phi_h, g1)
        total += form_norm(lat, rotated.values - phi_ref)
    return total / n_noise


def gauged_step_consistency(phi0: LinkConnection, force_fn, h: np.ndarray, family, j: int,
                            da_values, rng: RngStream, n_noise: int = 4,
                            covariance_tol: float = 1e-8) -> GaugedStepReport:
    """Residual refinement study; precondition: the force is gauge covariant.

    Raises ValidationError with the probe defect if the supplied force
    fails the covariance probe.
    """
    probe_g = random_gauge_transform(phi0.group, phi0.lattice, rng.child(0x6A06))
    defect = force_covariance_residual(phi0, probe_g, force_fn)
    if defect > covariance_tol:
        raise ValidationError(f"force is not gauge covariant: probe defect {defect:.3e}")
    residuals = [
        gauged_step_residual(phi0, force_fn, h, family, j, da, rng.child(100 + i), n_noise)
        for i, da in enumerate(da_values)
    ]
    return GaugedStepReport(da_values=list(da_values), residuals=residuals)
