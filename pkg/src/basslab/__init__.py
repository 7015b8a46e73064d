"""Discrete Bass model on networks: master equations, compartmental limits,
Monte Carlo simulation and convergence-rate experiments."""

from .model import (
    BassParams,
    GroupSizes,
    HeteroSpec,
    NetworkInstance,
    Trajectory,
    ValidationError,
    homogenize,
    make_circle,
    make_complete,
    make_kgroup,
    network_from_edges,
)
from .odeint import IntegrationError, IntegratorConfig, fit_line, integrate

__all__ = [
    "BassParams",
    "GroupSizes",
    "HeteroSpec",
    "IntegrationError",
    "IntegratorConfig",
    "NetworkInstance",
    "Trajectory",
    "ValidationError",
    "fit_line",
    "homogenize",
    "integrate",
    "make_circle",
    "make_complete",
    "make_kgroup",
    "network_from_edges",
]
