from .geometry import (
    C0,
    EPS0,
    AntennaArray,
    FrequencyPlan,
    MaterialGrid,
    VoxelGrid,
    contrast_from_materials,
    mills_cross,
)
from .green import SingularityError, dyadic_green, scalar_green, self_term
from .scatter import incident_field, scattered_field_at, synthesize_channel
from .solver import (
    SolverNotConverged,
    apply_ls_operator,
    assemble_dense,
    bicgstab,
    solve_total_field,
    solve_total_field_dense,
)

__all__ = [
    "C0",
    "EPS0",
    "AntennaArray",
    "FrequencyPlan",
    "MaterialGrid",
    "VoxelGrid",
    "SingularityError",
    "SolverNotConverged",
    "apply_ls_operator",
    "assemble_dense",
    "bicgstab",
    "contrast_from_materials",
    "dyadic_green",
    "incident_field",
    "mills_cross",
    "scalar_green",
    "scattered_field_at",
    "self_term",
    "solve_total_field",
    "solve_total_field_dense",
    "synthesize_channel",
]
