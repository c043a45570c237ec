"""Adaptive error-state Kalman filtering for 3D IMU/landmark SLAM.

Library layout:

* :mod:`imuslam.rotation` -- quaternion and rotation-matrix algebra
* :mod:`imuslam.model` -- error dynamics and their exact discretization
* :mod:`imuslam.observation` -- landmark measurement model
* :mod:`imuslam.estimator` -- the adaptive filter cycle
* :mod:`imuslam.observability` -- rank-condition analysis tools
* :mod:`imuslam.simulator` -- synthetic truth and sensor streams
* :mod:`imuslam.cli` -- batch runner (``imuslam run/observability/compare``)
"""

from .estimator import SlamFilter, initialize
from .model import (
    DiscreteModel,
    FilterState,
    ImuSample,
    ModelConstants,
    NoiseSpec,
)
from .observation import LandmarkObservation
from .simulator import LandmarkSpec, ScenarioConfig, build_scenario

__version__ = "0.1.0"

__all__ = [
    "SlamFilter",
    "initialize",
    "DiscreteModel",
    "FilterState",
    "ImuSample",
    "ModelConstants",
    "NoiseSpec",
    "LandmarkObservation",
    "LandmarkSpec",
    "ScenarioConfig",
    "build_scenario",
    "__version__",
]
