"""Sliding-window visual-inertial Kalman filter with delayed and immediate
update strategies, plus a synthetic Monte-Carlo benchmark harness."""

from .propagation import (
    DEFAULT_GRAVITY,
    IMU_ERR_DIM,
    ImuSample,
    ImuState,
    NoiseSpec,
    bias_compensate,
    continuous_jacobians,
    discretize,
    propagate_cov,
    rk4_propagate,
)
from .state import (
    AugmentedState,
    CameraPoseState,
    WindowFullError,
    apply_correction,
    augment,
    camera_pose_from_imu,
    marginalize,
)
from .vision import (
    BehindCameraError,
    FeaturePosition,
    FeatureTrack,
    MeasurementBlock,
    TriangulationConfig,
    chi2_gate,
    nullspace_project,
    point_jacobians,
    project,
    stack_feature,
    triangulate,
)
from .strategies import (
    MsckfFilter,
    Strategy,
    UpdateReport,
    constraint_counter,
    ekf_update,
    information_update_oracle,
    kalman_correction,
    select_views_kcam,
)
from .sim import CameraFrame, SimConfig, SimWorld, gen_features, gen_trajectory, simulate
from .bench import BenchConfig, MonteCarloResult, RunResult, emit_csv, rmse, run_monte_carlo, run_once

__all__ = [name for name in dir() if not name.startswith("_")]
