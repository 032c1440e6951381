"""Staleness-adaptive asynchronous SGD: delay models, step policies, engines and bounds."""

from .distributions import (CMP, Geometric, Poisson, StalenessHistogram, StalenessModel, Uniform,
                            bhattacharyya, fit, fit_families)
from .engine import EventDelay, RunConfig, RunTrace, run
from .errors import (EngineError, InputError, NormalizationError, NumericError, ParameterError,
                     StaleSGDError, UnsupportedError)
from .problems import FiniteSumProblem, MlpProblem, QuadraticProblem
from .steppolicy import (CmpTune, CmpZero, Constant, GeometricTuned, InverseTau, PoissonTune,
                         PolicyWrapper, clip_and_cutoff, derive_C_for_momentum, normalize)

__version__ = "0.1.0"
