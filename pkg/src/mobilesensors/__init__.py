__version__ = "0.1.0"

from .geometry import Geometry, MotionConstraint
from .kalman import (
    DareBounds,
    KfRun,
    KfState,
    dare_iterate,
    dare_trace_bounds,
    kf_step,
    lift_system,
    lifted_process_noise,
    limiting_trace,
    run_filter,
)
from .model import (
    FullModel,
    NoiseSpec,
    RealBlockModel,
    ReducedModel,
    SnapshotMatrix,
    fit_dmd,
    simulate,
    spectral_truncate,
    to_real_blocks,
)
from .observability import Trajectory, assemble, condition_number, is_observable, projected_block
from .planner import PlanConfig, candidate_set, multiscale_refine, plan, selection_score
from .scenarios import KsSpec, TorusSpec, load_gridded, make_torus, mask_geometry, solve_ks
