"""Bloch band structure of Schrodinger operators on periodically perforated planes."""

from .analysis import (AnalyticityProbe, ThomasCertificate, analyticity_probe, flat_band_test,
                       shape_sweep, thomas_certificate, thomas_operator_bound)
from .discretize import (BlochOperator, PotentialSpec, TorusGrid, apply_multiplier_A,
                         apply_multiplier_B, assemble, assemble_gauge, build_grid)
from .errors import (ConvergenceFailure, DegenerateMap, HoleTooLarge, InsufficientSampling,
                     ParseError, PerfBlochError, SimplicityLost, ValidationError)
from .geometry import HoleShape, Lattice2, ShapeFamily, validate_family
from .spectral import (BandStructure, BlochProblem, KPath, SolverOptions, SpectrumReport,
                       band_structure, dispersion_surface, eigs_lowest, spectrum_report)

__version__ = "0.1.0"
