"""Robust estimation of Kronecker-structured matrices.

Scaled robust gradient descent with scaled hard thresholding for matrix
trace regression, logistic matrix GLMs and bilinear regression, with robust
convex initializers, ablation baselines and a simulation harness.
"""

from .errors import (DegenerateInit, Infeasible, KronestError, MaxIterations,
                     NearSingularGram, ParameterError, ShapeError)
from .kron import (FactorPair, GroundTruth, KroneckerShape, compose, factor_distance,
                   factorize, permute, permute_inverse, relative_error)
from .models import Dataset, DesignSpec, TailSpec, generate_dataset, get_oracle
from .optimizer import FitResult, OptimizerConfig, cross_validate_tau, fit, srgd_step
from .robust import robust_gradient_pair, truncate
from .sht import SparsityLevels, scaled_hard_threshold

__version__ = "0.1.0"
