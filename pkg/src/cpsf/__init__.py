"""Conformal predictive safety filters for navigation among reactive agents.

Modules: ``world`` (scenario and vehicle), ``agents`` (ambient crowd and
datasets), ``learncore`` (autodiff and training), ``predictor``,
``conformal``, ``gaussian``, ``filter`` and ``harness`` (CLI and reports).
"""
from .conformal import ConformalRadii, calibrate
from .filter import FilteredController, SafetyFilter
from .gaussian import fit_gaussian
from .predictor import ConstantVelocityPredictor, TrajectoryPredictor
from .world import ScenarioConfig, SystemState, VehicleParams

__version__ = "0.1.0"

__all__ = [
    "ConformalRadii",
    "ConstantVelocityPredictor",
    "FilteredController",
    "SafetyFilter",
    "ScenarioConfig",
    "SystemState",
    "TrajectoryPredictor",
    "VehicleParams",
    "calibrate",
    "fit_gaussian",
]
