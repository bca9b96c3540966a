"""DC microgrid primary voltage control: baseline + distributed adaptive
augmentation, plug-and-play stability certification, and averaged-model
simulation."""

from .adaptive import (ControllerState, L1Config, adaptive_step,
                       composite_control, design_matrix, l1_control, lpf_step,
                       predictor_step, smooth_projection)
from .baseline import (BaselineGains, NominalParams, baseline_control,
                       nominal_design_model, synth_lqi, synth_pole_place)
from .certify import (CertReport, DguCertRecord, HyperbolicityError, L1Design,
                      are_residual, certify, coupling_bound, l1_norm_condition,
                      min_distance, recertify_plugin, solve_local_are,
                      theta_bound)
from .config import ConfigError, RunConfig, load_config, parse_config
from .metrics import TransientMetrics, analyze_window
from .network import (Branch, BusNetwork, BusNode, DguParams, LineParams,
                      MicrogridTopology, NetworkError, OperatingPoint,
                      SmallSignalModel, assemble_global,
                      compute_operating_point, kron_reduce, linearize,
                      linearize_all)
from .sim import (ControllerSetup, Scenario, SimDivergenceError, SimEngine,
                  SimEvent, SimResult, SimState, TraceRecord, run)

__version__ = "0.1.0"
