"""Experiment configuration: strict schema validation and object construction."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .lattice import RngStream, make_lattice
from .kernels import MollifierSpec, build_c_family, build_q_family, make_a_symbol, make_scale_grid, default_grid
from .potentials import PolynomialPotential, QuadraticPotential, plateau_weight, quartic_potential, zero_potential
from .regression import RegressionBasis
from .lattice import multiplier_from_values


class ConfigError(ValueError):
    """Schema violation; the message names the offending field."""


_SCHEMA = {
    "lattice": {"d", "n", "eps"},
    "kernel": {"mollifier", "width", "a_max", "n_linear", "n_geometric", "a_switch",
               "jump_substeps", "operator_kind", "mass", "alpha"},
    "potential": {"kind", "lambda", "mass_sq", "counterterm", "b", "rho_kind",
                  "rho_inner", "rho_outer", "coeffs"},
    "solver": {"method", "trajectories", "budget", "tolerance", "max_iterations",
               "damping", "degree", "extra_smooth_factors", "ridge", "chain_steps",
               "beta", "chains", "iterations", "minibatch", "learning_rate", "workers",
               "scale_indices", "group", "amplitude"},
}

_METHODS = {"forward", "exact-drift", "fbsde", "variational", "oracle", "germ", "gauge-check"}

_REQUIRED = {"lattice", "kernel", "potential", "solver", "seed"}


def _check_block(name: str, block: dict):
    if not isinstance(block, dict):
        raise ConfigError(f"{name}: expected an object")
    unknown = set(block) - _SCHEMA[name]
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")


def validate_config(raw: dict) -> dict:
    """Strict validation; unknown keys are rejected with the field named."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = set(raw) - _REQUIRED
    if unknown:
        raise ConfigError(f"top level: unknown keys {sorted(unknown)}")
    missing = _REQUIRED - set(raw)
    if missing:
        raise ConfigError(f"top level: missing keys {sorted(missing)}")
    for name in ("lattice", "kernel", "potential", "solver"):
        _check_block(name, raw[name])
    lat = raw["lattice"]
    for key in ("d", "n", "eps"):
        if key not in lat:
            raise ConfigError(f"lattice.{key}: required")
    d, n = int(lat["d"]), int(lat["n"])
    if d not in (1, 2, 3):
        raise ConfigError(f"lattice.d: must be 1, 2 or 3, got {lat['d']}")
    if n < 2 or (n & (n - 1)) != 0:
        raise ConfigError(f"lattice.n: must be a power of two >= 2, got {lat['n']}")
    if not float(lat["eps"]) > 0:
        raise ConfigError(f"lattice.eps: must be positive, got {lat['eps']}")
    if raw["kernel"].get("mollifier", "gaussian") not in ("gaussian", "bump-selfconvolved"):
        raise ConfigError(f"kernel.mollifier: unknown kind {raw['kernel']['mollifier']!r}")
    method = raw["solver"].get("method")
    if method not in _METHODS:
        raise ConfigError(f"solver.method: must be one of {sorted(_METHODS)}, got {method!r}")
    pot_kind = raw["potential"].get("kind", "zero")
    if pot_kind not in ("zero", "quartic", "quadratic", "polynomial"):
        raise ConfigError(f"potential.kind: unknown kind {pot_kind!r}")
    if not isinstance(raw["seed"], (int,)):
        raise ConfigError("seed: must be an integer")
    return raw


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    return validate_config(raw)


class Experiment:
    """Configured objects: lattice, families, potential, basis, streams."""

    def __init__(self, config: dict):
        self.config = validate_config(config)
        lat_cfg = config["lattice"]
        self.lattice = make_lattice(lat_cfg["d"], lat_cfg["n"], lat_cfg["eps"])
        k = config["kernel"]
        a_max = k.get("a_max")
        if a_max is None:
            grid = default_grid(self.lattice, n_geometric=int(k.get("n_geometric", 144)))
        else:
            switch = k.get("a_switch") or min(0.5 * np.pi / self.lattice.length, a_max / 8)
            grid = make_scale_grid(a_max, n_linear=int(k.get("n_linear", 8)),
                                   n_geometric=int(k.get("n_geometric", 144)), a_switch=switch)
        self.grid = grid
        moll = MollifierSpec(k.get("mollifier", "gaussian"), k.get("width", 1.0))
        self.cfam = build_c_family(moll, self.lattice, grid,
                                   jump_substeps=int(k.get("jump_substeps", 16)))
        a_sym = make_a_symbol(self.lattice, mass=float(k.get("mass", 1.0)),
                              kind=k.get("operator_kind", "laplacian"))
        self.qfam = build_q_family(float(k.get("alpha", 1.0)), a_sym, self.cfam)
        self.potential = self._build_potential(config["potential"])
        s = config["solver"]
        self.basis = RegressionBasis(
            degree=int(s.get("degree", 3)),
            extra_smooth_factors=tuple(s.get("extra_smooth_factors", ())),
            rho=self.rho,
            ridge=float(s.get("ridge", 1e-9)),
        )
        self.seed = int(config["seed"])

    def _build_potential(self, p: dict):
        kind = p.get("kind", "zero")
        self.rho = None
        if p.get("rho_kind", "ones") == "plateau":
            self.rho = plateau_weight(self.lattice, float(p["rho_inner"]), float(p["rho_outer"]))
        if kind == "zero":
            return zero_potential(self.lattice)
        if kind == "quartic":
            return quartic_potential(
                self.lattice, lam=float(p.get("lambda", 0.0)),
                rho=self.rho, mass_sq=float(p.get("mass_sq", 0.0)),
                counterterm=p.get("counterterm"),
            )
        if kind == "quadratic":
            b = float(p.get("b", 1.0))
            return QuadraticPotential(self.lattice, multiplier_from_values(self.lattice, b))
        coeffs = np.asarray(p.get("coeffs", [0.0]), dtype=float)
        return PolynomialPotential(self.lattice, coeffs, rho=self.rho)

    def stream(self, substream: int = 0) -> RngStream:
        return RngStream(self.seed, substream)
