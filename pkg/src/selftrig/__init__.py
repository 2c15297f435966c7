"""Optimal self-triggered sampling for linear sampled-data control systems."""
from .certificates import (
    PerturbedCertificate,
    StabilityCertificate,
    certify_unperturbed,
    find_perturbed_certificate,
)
from .errors import (
    DimensionError,
    DivergenceError,
    DomainError,
    InfeasibleError,
    NumericError,
    ScenarioError,
    SelfTrigError,
)
from .horizons import HorizonSpace, build_table
from .partition import build_partition
from .plant import DiscretizationCache, PlantModel, discretize
from .scenario import load_scenario, prepare
from .sim import motivational_report, run, simulate, verify_trace
from .trigger import TriggerDecision

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "DiscretizationCache", "DivergenceError", "DomainError",
    "HorizonSpace", "InfeasibleError", "NumericError", "PerturbedCertificate", "PlantModel",
    "ScenarioError", "SelfTrigError", "StabilityCertificate", "TriggerDecision",
    "build_partition", "build_table", "certify_unperturbed", "discretize",
    "find_perturbed_certificate", "load_scenario", "motivational_report", "prepare", "run",
    "simulate", "verify_trace",
]
