"""Organ- and voxel-level fits of the multi-input two-compartment model."""

import enum
import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from .core import FineGrid, FrameAverager, KineticParams, Tac, eval_tissue_model
from .input_functions import IDIF_NAMES, interp_curves_to_fine
from .optimizer import FitError, FitProblem, FitResult, ParamBounds, solve
from .volume import ScalarVolume

logger = logging.getLogger(__name__)

KINETIC_NAMES = ("k1", "k2", "k3", "v_b")
WEIGHT_NAMES = ("alpha", "beta", "gamma", "delta")
INITIAL_KINETICS = {"k1": 0.1, "k2": 0.1, "k3": 0.01, "v_b": 0.05}
NO_DATA = np.nan


class FitMode(str, enum.Enum):
    BASELINE = "baseline"
    MULTI = "multi"


@dataclass(frozen=True)
class OrganPreset:
    """Free weights and box bounds for one organ.

    ``free_weights`` are the weights optimised in multi mode; every other
    weight is held at exactly 0. Baseline mode frees ``alpha`` only.
    """

    organ: str
    free_weights: tuple
    weight_bounds: dict
    vb_upper: float
    k1_bounds: tuple = (0.01, 10.0)
    k2_bounds: tuple = (0.01, 10.0)
    k3_bounds: tuple = (0.001, 1.0)
    vb_lower: float = 0.001

    def free_names(self, mode):
        weights = ("alpha",) if FitMode(mode) is FitMode.BASELINE else self.free_weights
        return KINETIC_NAMES + tuple(weights)

    def bounds(self, mode):
        ranges = {
            "k1": self.k1_bounds,
            "k2": self.k2_bounds,
            "k3": self.k3_bounds,
            "v_b": (self.vb_lower, self.vb_upper),
            **self.weight_bounds,
        }
        names = self.free_names(mode)
        lower = [ranges[n][0] for n in names]
        upper = [ranges[n][1] for n in names]
        return ParamBounds(lower, upper)


PRESETS = {
    "liver": OrganPreset("liver", ("alpha", "beta"), {"alpha": (0.0, 1.0), "beta": (0.0, 1.0)}, 0.25),
    "lung": OrganPreset("lung", ("alpha", "gamma"), {"alpha": (0.0, 1.0), "gamma": (0.0, 1.0)}, 0.15),
    "kidney": OrganPreset("kidney", ("alpha", "delta"), {"alpha": (0.0, 1.0), "delta": (-1.0, 1.0)}, 0.25),
    "generic": OrganPreset(
        "generic",
        WEIGHT_NAMES,
        {name: (0.0, 1.0) for name in WEIGHT_NAMES},
        1.0,
    ),
}


def get_preset(preset):
    if isinstance(preset, OrganPreset):
        return preset
    try:
        return PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None


class TacModel:
    """Frame-averaged model TAC as a function of the free parameters.

    The four IDIFs are interpolated onto the fine grid once; mixing is
    linear, so mixing on the fine grid equals interpolating the mixed curve.
    """

    def __init__(self, idifs, preset, mode, fine=None):
        self.preset = get_preset(preset)
        self.mode = FitMode(mode)
        self.grid = idifs.grid
        self.fine = fine if fine is not None else FineGrid.covering(self.grid)
        self.names = self.preset.free_names(self.mode)
        self._average = FrameAverager(self.fine, self.grid)
        weight_names = self.names[len(KINETIC_NAMES):]
        self._weight_rows = [IDIF_NAMES.index(_IDIF_FOR_WEIGHT[w]) for w in weight_names]
        curves = idifs.curves()[self._weight_rows]
        if not np.any(curves):
            raise FitError("degenerate input: every IDIF used by this fit is identically zero")
        self._fine_inputs = interp_curves_to_fine(self.grid, curves, self.fine)

    def params(self, theta):
        """Full :class:`KineticParams` for a free-parameter vector (fixed weights 0)."""
        values = dict.fromkeys(WEIGHT_NAMES, 0.0)
        values.update(zip(self.names, (float(v) for v in theta)))
        return KineticParams(**values)

    def fine_input(self, theta):
        return np.asarray(theta[len(KINETIC_NAMES):], dtype=np.float64) @ self._fine_inputs

    def predict_fine(self, theta):
        return eval_tissue_model(self.params(theta), self.fine_input(theta), self.fine)

    def predict(self, theta):
        return self._average(self.predict_fine(theta))

    def initial(self):
        start = dict(INITIAL_KINETICS)
        start.update(dict.fromkeys(WEIGHT_NAMES, 0.0))
        return np.array([start[n] for n in self.names])


_IDIF_FOR_WEIGHT = dict(zip(WEIGHT_NAMES, IDIF_NAMES))


def _check_same_grid(tac, idifs):
    if tac.grid != idifs.grid:
        raise ValueError("TAC and IDIFs are on different frame grids")


def fit_tac(tac, idifs, preset, mode=FitMode.MULTI, fine=None, x0=None, multistart=0, seed=0):
    """Fit one TAC.

    Parameters
    ----------
    tac : Tac
    idifs : InputFunctionSet
    preset : OrganPreset or str
    mode : FitMode or str
    fine : FineGrid, optional
        Defaults to a 0.5 s grid covering the frames.
    x0 : array_like, optional
        Start for the free parameters (order ``preset.free_names(mode)``).

    Returns
    -------
    FitResult
        ``names`` lists the free parameters; fixed weights are 0.
    """
    _check_same_grid(tac, idifs)
    model = TacModel(idifs, preset, mode, fine)
    measured = tac.values

    def residual(theta):
        return model.predict(theta) - measured

    problem = FitProblem(
        residual,
        model.initial() if x0 is None else x0,
        model.preset.bounds(model.mode),
        names=model.names,
    )
    return solve(problem, multistart=multistart, seed=seed)


def result_params(result):
    """KineticParams of a fit result, with non-free weights set to 0."""
    values = dict.fromkeys(WEIGHT_NAMES, 0.0)
    values.update(result.params())
    return KineticParams(**values)


def warm_start_chain(tac, idifs, preset, fine=None):
    """Baseline fit, then the multi fit started from the baseline optimum.

    The extra weights start at 0 (nudged inside their bounds). If the nudge
    leaves the multi fit above the baseline cost, the baseline optimum itself
    (extra weights exactly 0, a feasible point) is returned as the multi fit,
    so ``multi.mse <= baseline.mse`` always holds.
    """
    preset = get_preset(preset)
    _check_same_grid(tac, idifs)
    fine = fine if fine is not None else FineGrid.covering(tac.grid)
    baseline = fit_tac(tac, idifs, preset, FitMode.BASELINE, fine)

    names = preset.free_names(FitMode.MULTI)
    start = dict.fromkeys(names, 0.0)
    start.update(baseline.params())
    x0 = np.array([start[n] for n in names])
    multi = fit_tac(tac, idifs, preset, FitMode.MULTI, fine, x0=x0)

    if multi.mse > baseline.mse:
        model = TacModel(idifs, preset, FitMode.MULTI, fine)
        r = model.predict(x0) - tac.values
        embedded_mse = float(np.mean(r * r))
        if embedded_mse <= multi.mse:
            multi = FitResult(
                x=x0,
                mse=embedded_mse,
                cost=0.5 * float(r @ r),
                iterations=multi.iterations,
                n_evals=multi.n_evals + 1,
                converged=multi.converged,
                reason="baseline optimum retained",
                names=tuple(names),
                residuals=r,
            )
    return baseline, multi


def relative_mse_change(baseline, multi):
    return 100.0 * (multi.mse - baseline.mse) / baseline.mse


def canonicalize(params):
    """Representative of ``params`` with ``sum(|weights|) == 1``.

    Scaling every weight by ``s`` while mapping ``v_b -> v_b / s`` and
    ``k1 -> k1 * (1 - v_b) / (s - v_b)`` leaves the model curve unchanged,
    so only this normalised form is identifiable from data.
    """
    scale = float(np.sum(np.abs(params.weights)))
    if scale == 0.0:
        raise ValueError("cannot normalise: all weights are zero")
    v_b = params.v_b * scale
    if v_b >= 1.0:
        raise ValueError("normalised blood fraction would reach 1")
    k1 = params.k1 * (1.0 - params.v_b) * scale / (1.0 - v_b)
    return params.replace(
        k1=k1,
        v_b=v_b,
        **{name: w / scale for name, w in zip(WEIGHT_NAMES, params.weights)},
    )


def fit_report(result, preset, mode, digests=None):
    """JSON-ready summary of a fit."""
    preset = get_preset(preset)
    bounds = preset.bounds(mode)
    return {
        "preset": preset.organ,
        "mode": FitMode(mode).value,
        "params": result_params(result).as_dict(),
        "free_params": list(result.names),
        "bounds": {
            name: [float(lo), float(hi)]
            for name, lo, hi in zip(result.names, bounds.lower, bounds.upper)
        },
        "mse": result.mse,
        "iterations": result.iterations,
        "n_evals": result.n_evals,
        "converged": bool(result.converged),
        "termination": result.reason,
        "input_digests": dict(digests or {}),
    }


@dataclass
class ParametricMaps:
    """Fitted parameter volumes per mode, plus voxels that failed."""

    maps: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    n_voxels: int = 0

    def difference(self, name):
        base = self.maps["baseline"][name]
        multi = self.maps["multi"][name]
        return base.with_data(multi.data - base.data, kind="map")


def _voxel_series(dynamic, mask, label):
    dims = mask.dims
    for f, volume in enumerate(dynamic):
        if volume.dims != dims:
            raise ValueError(f"frame {f} has dims {volume.dims}, mask has {dims}")
    selected = mask.select(label)
    index = np.argwhere(selected)  # C order: deterministic voxel order
    if index.size == 0:
        raise ValueError("organ mask is empty")
    series = np.stack([v.data[selected] for v in dynamic], axis=1)
    return index, series


def fit_voxelwise(
    dynamic,
    mask,
    idifs,
    preset,
    mode="both",
    fine=None,
    threads=1,
    label=None,
    progress=None,
):
    """Fit every masked voxel independently.

    Parameters
    ----------
    dynamic : sequence of ScalarVolume
        One PET volume per frame of ``idifs.grid``.
    mask : LabelVolume
    mode : {"baseline", "multi", "both"}
        ``"both"`` runs :func:`warm_start_chain` per voxel.
    threads : int
        Worker threads; output does not depend on it.
    progress : callable, optional
        Called as ``progress(done, total)`` in completion order.

    Returns
    -------
    ParametricMaps
        ``maps[mode][name]`` volumes; unfitted voxels hold NaN.
    """
    preset = get_preset(preset)
    grid = idifs.grid
    if len(dynamic) != len(grid):
        raise ValueError(f"{len(dynamic)} volumes for a grid of {len(grid)} frames")
    fine = fine if fine is not None else FineGrid.covering(grid)
    modes = ("baseline", "multi") if mode == "both" else (FitMode(mode).value,)
    index, series = _voxel_series(dynamic, mask, label)

    def run(i):
        tac = Tac(grid, series[i], raw=True)
        if mode == "both":
            return warm_start_chain(tac, idifs, preset, fine)
        return (fit_tac(tac, idifs, preset, mode, fine),)

    results = [None] * len(index)
    failures = []

    def record(i, future_result=None, error=None):
        if error is not None:
            voxel = tuple(int(v) for v in index[i])
            logger.warning("voxel %s not fitted: %s", voxel, error)
            failures.append((voxel, str(error)))
        else:
            results[i] = future_result

    total = len(index)
    if threads <= 1:
        for i in range(total):
            try:
                record(i, run(i))
            except (FitError, ValueError, FloatingPointError) as exc:
                record(i, error=exc)
            if progress is not None:
                progress(i + 1, total)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(run, i): i for i in range(total)}
            done = 0
            for future in as_completed(futures):
                i = futures[future]
                try:
                    record(i, future.result())
                except (FitError, ValueError, FloatingPointError) as exc:
                    record(i, error=exc)
                done += 1
                if progress is not None:
                    progress(done, total)
    failures.sort()

    template = dynamic[0]
    out = ParametricMaps(failures=failures, n_voxels=total)
    for m, mode_name in enumerate(modes):
        names = preset.free_names(mode_name) + ("mse",)
        arrays = {n: np.full(mask.dims, NO_DATA) for n in names}
        for i, fits in enumerate(results):
            if fits is None:
                continue
            fit = fits[m]
            voxel = tuple(index[i])
            for n, v in zip(fit.names, fit.x):
                arrays[n][voxel] = v
            arrays["mse"][voxel] = fit.mse
        out.maps[mode_name] = {
            n: ScalarVolume(a, template.spacing, template.origin, kind="map")
            for n, a in arrays.items()
        }
    return out

