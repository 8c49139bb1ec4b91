"""Unfitted finite elements for shape gradient flows with spline boundaries."""

from __future__ import annotations

from .errors import (CutFlowError, DomainEscape, InvalidBoundary, NonConvergence, OutOfDomain,
                     StepFailure)
from .flow import Discretization, FlowState, FlowTrace, ShapeProblem, run
from .mesh import CutMesh, UniformGrid, classify
from .problems import EXAMPLES, LevelPlan, convergence_study, get_example, run_level
from .spline import ClosedSpline, ControlPolygon, fit_closed_spline

__version__ = "0.1.0"

__all__ = [
    "ClosedSpline", "ControlPolygon", "CutFlowError", "CutMesh", "Discretization", "DomainEscape",
    "EXAMPLES", "FlowState", "FlowTrace", "InvalidBoundary", "LevelPlan", "NonConvergence",
    "OutOfDomain", "ShapeProblem", "StepFailure", "UniformGrid", "classify", "convergence_study",
    "fit_closed_spline", "get_example", "run", "run_level",
]
