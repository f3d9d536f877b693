"""Optimal periodic gaits for sweeping-process crawler models."""
from .crawler import CrawlerModel, build_model, model_from_dict, \
    recover_position, spring_lengths
from .estimators import CatchingUpSimulator, GaitOptimizer
from .exceptions import *  # noqa: F401,F403
from .optimizer import SolverConfig, bv_regularize, estimate_gradient, \
    optimize
from .polytope import Polyhedron
from .stationarity import StationarityCertificate, \
    check_continuous_conditions, classify_degenerate, extract_multipliers, \
    one_link_reference
from .sweeping import ControlGrid, DiscreteTrajectory, affine_dynamics, \
    control_dynamics, periodic_orbit, simulate, step
from .transcription import AnchoredProblem, CostSpec, GaitProblem, \
    anchored_objective, build_anchored, objective, project_controls, \
    solve_anchored

__version__ = "0.1.0"
