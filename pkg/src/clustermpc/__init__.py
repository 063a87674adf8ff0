"""Cluster-scenario stochastic NMPC for combined-therapy drug dosing.

Pipeline per control period: sample parameter scenarios, solve the
deterministic problem for each in parallel, accumulate the solutions in a
FIFO buffer, cluster the buffered scenarios using their optimal solutions
as supervision labels, and solve one low-cardinality cluster-scenario
stochastic problem whose first moves are applied to the plant.
"""

from .buffer import FifoBuffer
from .clustering import ClusteringConfig, ClusterSummary, kmeans, summarize
from .harness import CampaignConfig, CampaignReport, emit_report, run_campaign
from .model import ModelConstants, nominal_parameters
from .ocp import OcpConfig, OcpEvaluation, evaluate, gradient
from .sampling import SamplerConfig, draw
from .simloop import ClosedLoopTrace, SimConfig, run_nominal, run_stochastic
from .snmpc import SnmpcConfig, SnmpcProblem, solve_snmpc
from .solver import NlpProblem, SolveRecord, SolveResult, SolverConfig, solve, solve_nominal

__version__ = "0.1.0"

__all__ = [
    "CampaignConfig", "CampaignReport", "ClosedLoopTrace", "ClusterSummary",
    "ClusteringConfig", "FifoBuffer", "ModelConstants", "NlpProblem",
    "OcpConfig", "OcpEvaluation", "SamplerConfig", "SimConfig", "SnmpcConfig",
    "SnmpcProblem", "SolveRecord", "SolveResult", "SolverConfig", "draw",
    "emit_report", "evaluate", "gradient", "kmeans", "nominal_parameters",
    "run_campaign", "run_nominal", "run_stochastic", "solve", "solve_nominal",
    "solve_snmpc", "summarize",
]
