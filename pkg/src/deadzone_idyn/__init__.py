"""Inverse-dynamics identification for a 3-DOF arm with dead-zone aware training."""
from .deadzone import DeadZoneMask, MaskConfig, joint_sigma, mask, moving_stats
from .dynamics import (ArmState, BaseParameters, ExcitationSpec, Geometry, LinkParams, SimConfig,
                       TrajectoryLog, base_parameters, forward_dynamics, full_regressor,
                       ideal_inverse_dynamics, load_config, mass_matrix, read_trajectory_csv,
                       regressor_row, simulate_trajectory, write_trajectory_csv)
from .errors import (InsufficientDataError, InvalidInputError, NumericalError,
                     SimulationDivergedError)
from .experiment import (PreparedData, SweepConfig, SweepReport, TraceReport, ci95, prepare,
                         run_sweep, run_trace, summary_stats, train_all, write_reports)
from .mlp import MlpModel, TrainConfig, load_model, masked_loss, predict, save_model, train
from .ne import NeParams, load_ne, ne_fit, ne_predict, rls_init, rls_update, save_ne
from .signals import (Dataset, FilterConfig, Sample, Scaler, build_dataset, lowpass, pseudo_diff,
                      split_dataset, standardize)

__version__ = "0.1.0"
