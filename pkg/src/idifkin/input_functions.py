"""Image-derived input functions and the weighted input mix."""

import math
from dataclasses import dataclass

import numpy as np

from .core import Tac

IDIF_NAMES = ("aorta", "pv", "pa", "ureter")


@dataclass(frozen=True)
class InputFunctionSet:
    """The four IDIFs (aorta, portal vein, pulmonary artery, ureter) on one grid."""

    aorta: Tac
    pv: Tac
    pa: Tac
    ureter: Tac

    def __post_init__(self):
        grid = self.aorta.grid
        for name in IDIF_NAMES[1:]:
            if getattr(self, name).grid != grid:
                raise ValueError(f"IDIF '{name}' is on a different frame grid than the aorta")

    @property
    def grid(self):
        return self.aorta.grid

    def curves(self):
        """Array of shape (4, n_frames) in the order aorta, pv, pa, ureter."""
        return np.stack([getattr(self, name).values for name in IDIF_NAMES])


def extract_idif(dynamic, mask, grid, label=None):
    """Mean activity inside ``mask`` for every frame.

    Parameters
    ----------
    dynamic : sequence of ScalarVolume
        One volume per frame.
    mask : LabelVolume
        Voxels with a nonzero label (or exactly ``label`` if given) are used.
    grid : FrameGrid

    Returns
    -------
    Tac
    """
    if len(dynamic) != len(grid):
        raise ValueError(f"{len(dynamic)} volumes for a grid of {len(grid)} frames")
    selected = mask.select(label)
    n_voxels = int(np.count_nonzero(selected))
    if n_voxels == 0:
        raise ValueError("mask is empty" if label is None else f"label {label} not present in mask")
    values = np.empty(len(grid))
    for f, volume in enumerate(dynamic):
        if volume.dims != mask.dims:
            raise ValueError(f"frame {f} has dims {volume.dims}, mask has {mask.dims}")
        # fsum: correctly rounded, so independent of voxel order
        values[f] = math.fsum(volume.data[selected].astype(np.float64)) / n_voxels
    return Tac(grid, values, raw=bool(np.any(values < 0)))


def mix_input(idifs, alpha, beta, gamma, delta):
    """Per-frame weighted sum of the four IDIFs."""
    weights = np.array([alpha, beta, gamma, delta], dtype=np.float64)
    if not np.all(np.isfinite(weights)):
        raise ValueError("mixing weights must be finite")
    values = weights @ idifs.curves()
    return Tac(idifs.grid, values, raw=bool(np.any(values < 0)))


def interp_to_fine(tac, fine):
    """Piecewise-linear interpolation through (frame midpoint, value).

    Constant extrapolation before the first and after the last midpoint.
    """
    values = tac.values if isinstance(tac, Tac) else None
    if values is None or values.size == 0:
        raise ValueError("cannot interpolate an empty TAC")
    return np.interp(fine.times, tac.grid.midpoints, values)


def interp_curves_to_fine(grid, curves, fine):
    """Interpolate each row of ``curves`` (frames along the last axis)."""
    mids = grid.midpoints
    return np.stack([np.interp(fine.times, mids, row) for row in np.atleast_2d(curves)])
