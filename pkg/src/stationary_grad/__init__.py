"""Stationary-cost gradients of contracting stochastic systems.

The forward sensitivity recursion estimates ``d/dtheta`` of the long-run
mean of a cost; a finite-difference oracle checks it, and Monte Carlo
certificates check the contraction conditions that make it valid.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, MissingDerivativeError, ModelConditionError,  # noqa: E402
                     NormUnsupportedError, NumericalError, ParameterRegionError,
                     StationaryGradError)
from .model import (Box, CostFunction, NoiseFeed, RngStream, SystemModel,  # noqa: E402
                    simulate, validate_cost, validate_derivatives)
from .finsler import (BaseNorm, FinslerWeight, WeightedNorm, bilinear_norm,  # noqa: E402
                      induced_bilinear_norm, induced_operator_norm, metric_upper,
                      operator_norm, wasserstein1_empirical, weighted_vector_norm)
from .costs import coordinate, cost_registry_lookup, quadratic, register_cost  # noqa: E402
from .sensitivity import (GradientEstimate, JointSystem, SensState, batch_gradient,  # noqa: E402
                          run_gradient, sens_step)
from .oracle import StationaryCostEstimate, fd_gradient, stationary_cost  # noqa: E402
from .certify import (ContractionReport, RegionSampler, build_joint_metric,  # noqa: E402
                      certify, check_interconnection, check_lyapunov,
                      check_parameter_lipschitz, empirical_kernel_contraction, estimate_L)
from .zoo import (Example2Config, LinearAR1Config, StochasticNNConfig, build_model,  # noqa: E402
                  make_ar1, make_example2, make_stochastic_nn)
