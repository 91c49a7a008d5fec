"""Scale-indexed stochastic flows, FBSDE solvers and Gibbs oracles on periodic lattices."""

from .lattice import (
    LatticeSpec,
    RngStream,
    SpectralMultiplier,
    ValidationError,
    fourier,
    inverse_fourier,
    make_lattice,
    spectral_apply,
    white_noise_increment,
)
from .kernels import (
    KernelConstructionError,
    KernelFamily,
    MollifierSpec,
    QFamily,
    ScaleGrid,
    build_c_family,
    build_q_family,
    cdot_sqrt_apply,
    default_grid,
    make_a_symbol,
    make_scale_grid,
    sample_xq,
)

__version__ = "0.1.0"
