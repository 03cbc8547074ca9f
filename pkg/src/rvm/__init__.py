"""Particle solver and verification harness for the relativistic Vlasov-Maxwell
system: characteristics-based transport, retarded-light-cone field evaluation,
dyadic density decomposition, and the fixed-point field iteration, together
with the independent oracles that check them.
"""

from .core import (
    FieldSample,
    InitialData,
    PhaseState,
    RunConfig,
    SpacetimePoint,
    Vec3,
    decay_weight,
    hat_velocity,
    make_empty_scenario,
    make_gaussian_scenario,
    vec3,
)

__version__ = "0.1.0"
