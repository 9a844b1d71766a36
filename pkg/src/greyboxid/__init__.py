"""Grey-box state-space identification of vibrating systems with
localized nonlinearities.

The pipeline: design a periodic excitation (`signals`), synthesize or
load response data (`simulate`), initialize a nonlinear state-space model
by frequency-domain subspace identification (`fnsi`), refine all
parameters by Levenberg-Marquardt with analytical Jacobians (`optimize`)
and extract modal parameters and physical nonlinear coefficients
(`physical`). `stats` repeats the experiment over input realizations and
`cli` exposes the whole chain as commands.
"""

from .model import (BasisSet, BasisTerm, Dimensions, FunctionTerm,
                    GreyBoxModel, ParameterMask, basis_gradient, eval_basis,
                    free_parameter_count, load_model, model_from_json,
                    model_to_json, pack_parameters, save_model,
                    unpack_parameters)
from .signals import (ExcitedBand, NoiseModel, SpectrumSet, TimeRecord,
                      dft, differentiate_periodic, estimate_frf,
                      generate_multisine, load_time_record, noise_variance,
                      period_dft, period_idft, rms, save_spectra,
                      save_time_record, z_of_lines)
from .simulate import (PhysicalSystem, PhysicalTerm, SimulationOutput,
                       load_physical_system, make_duffing_system,
                       make_two_dof_system, resample_periodic,
                       run_to_steady_state, save_physical_system,
                       simulate_discrete, simulate_newton)
from .fnsi import (FnsiDiagnostics, build_block_matrices,
                   build_extended_input, default_block_rows, estimate_ac,
                   estimate_bd, estimate_observability, fnsi_identify,
                   orthogonal_project)
from .optimize import (CostSetup, LmOptions, LmState, ValidationResult,
                       cost, jacobian, lm_optimize, residual_spectrum,
                       save_trace, validate)
from .physical import (ContinuousModel, ModalParameters, Mode,
                       NonlinearCoefficientEstimate, PhysicalReport,
                       modal_parameters, nonlinear_coefficients,
                       rediscretize, restoring_force_curve, to_continuous)
from .stats import (EnsembleResult, correlation_matrix, ensemble_stats,
                    monte_carlo, parameter_names)
from .experiment import (ExperimentConfig, IdentificationResult,
                         build_truth_system, generate_record,
                         identify_from_config, load_config,
                         run_identification)

__version__ = "0.1.0"
