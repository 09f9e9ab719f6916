"""Event-triggered control of interconnected systems certified by small-gain conditions."""
from .gainalg import (
    CheckReport,
    CouplingGraph,
    GainExpr,
    GainMatrix,
    MAFKind,
    PowerGain,
    compose,
    invert,
    is_irreducible,
    perron_vector,
    small_gain_check,
    spectral_radius,
    strongly_connected_components,
)
from .omega import OmegaPath, PhiMap, build_omega_path_linear, choose_sigma2_twobody, verify_omega_condition
from .plant import (
    LinearPlant,
    LyapunovData,
    NonlinearPlant,
    builtin_nonlinear_example,
    generate_random_system,
    random_initial_state,
)
from .sim import SimConfig, SimTrace, ZenoReport, metrics_summary, run_simulation, zeno_monitor
from .trigger import ClosedLoopDesign, ThresholdSet, compute_thresholds, compute_W, synthesize

__version__ = "0.1.0"
