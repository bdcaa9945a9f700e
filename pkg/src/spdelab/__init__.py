"""Numerical laboratory for linear stochastic parabolic evolution equations
with Morrey-singular lower-order coefficients."""

__version__ = "0.1.0"

from .triple import GridFunction, SpectralTriple
from .morrey import (AdmissibleField, BallSampler, MorreyParams, check_lps,
                     check_weak_ld, decompose_lpq, morrey_norm,
                     verify_embedding)
from .evolution import (EstimateReport, EvolutionProblem, ForcingSet,
                        HypothesesUnmet, LowerOrderSet, NoiseModel,
                        OperatorPair, SolverDivergence, SolveSettings,
                        Trajectory, WeightProcess, check_coercivity,
                        energy_report, ito_residual, solve,
                        stability_experiment)
from .spde import (AssembledProblem, ExactGaussianBenchmark, SPDECoefficients,
                   SPDEForcing, assemble_L2, assemble_W12, gaussian_benchmark,
                   l2_energy_report, lp_report, mollify_problem, w12_energy_report,
                   w1p_report, weak_residual)

__all__ = [name for name in dir() if not name.startswith("_")]
