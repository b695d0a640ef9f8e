"""Two-compartment FDG kinetics with anatomically weighted multi-IDIF input."""

__version__ = "0.1.0"

from .core import (
    FineGrid,
    FrameGrid,
    KineticParams,
    Tac,
    eval_tissue_model,
    frame_average,
    frame_grid_from_spec,
    protocol_grid,
    solve_ode_reference,
)
from .fitting import (
    PRESETS,
    FitMode,
    OrganPreset,
    canonicalize,
    fit_tac,
    fit_voxelwise,
    warm_start_chain,
)
from .input_functions import InputFunctionSet, extract_idif, interp_to_fine, mix_input
from .optimizer import FitProblem, FitResult, ParamBounds, jacobian, solve
from .volume import LabelVolume, ScalarVolume
