"""Frame grids, curves and the irreversible two-compartment FDG model.

Time is carried in seconds everywhere; rate constants are carried in 1/min
and converted exactly once, inside :func:`eval_tissue_model` and
:func:`solve_ode_reference`.

Fine-grid curves are convolved causally, sample by sample: output sample
``n`` includes input samples ``0..n``, with every kernel cell
``[j*step, (j+1)*step)`` integrated exactly. Equivalently the input is held
at ``a[n]`` for one step and the output is the tissue state at the end of
that step. A unit impulse is ``1/step`` at sample 0.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

SECONDS_PER_MINUTE = 60.0
MIN_RATE_SUM = 1e-9

#: Acquisition sequence of the clinical protocol as (count, duration_s).
PROTOCOL_SPEC = ((2, 10.0), (30, 2.0), (4, 10.0), (8, 30.0), (4, 60.0), (5, 120.0), (9, 300.0))


def _frozen_array(values, dtype=np.float64):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FrameGrid:
    """Contiguous acquisition frames.

    Parameters
    ----------
    starts, durations : array_like
        Frame start times and durations in seconds.
    """

    starts: np.ndarray
    durations: np.ndarray

    def __post_init__(self):
        starts = _frozen_array(self.starts)
        durations = _frozen_array(self.durations)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "durations", durations)
        if starts.ndim != 1 or starts.shape != durations.shape:
            raise ValueError("starts and durations must be 1-D arrays of equal length")
        if starts.size == 0:
            raise ValueError("a frame grid needs at least one frame")
        if not np.all(np.isfinite(starts)) or not np.all(np.isfinite(durations)):
            raise ValueError("frame times must be finite")
        if np.any(durations <= 0):
            raise ValueError("frame durations must be positive")
        if starts[0] < 0:
            raise ValueError("first frame must start at t >= 0")
        gaps = starts[1:] - (starts[:-1] + durations[:-1])
        if np.any(np.abs(gaps) > 1e-6 * max(1.0, float(starts[-1]))):
            raise ValueError("frames must be contiguous and non-overlapping")

    @classmethod
    def from_frames(cls, frames):
        """Build from an iterable of ``(start_s, duration_s)`` pairs."""
        frames = list(frames)
        if not frames:
            raise ValueError("a frame grid needs at least one frame")
        starts, durations = zip(*frames)
        return cls(np.asarray(starts, float), np.asarray(durations, float))

    def __len__(self):
        return self.starts.size

    def __eq__(self, other):
        if not isinstance(other, FrameGrid):
            return NotImplemented
        return np.array_equal(self.starts, other.starts) and np.array_equal(
            self.durations, other.durations
        )

    def __hash__(self):
        return hash((self.starts.tobytes(), self.durations.tobytes()))

    @property
    def ends(self):
        return self.starts + self.durations

    @property
    def midpoints(self):
        return self.starts + 0.5 * self.durations

    @property
    def end(self):
        return float(self.starts[-1] + self.durations[-1])

    @property
    def total_duration(self):
        return float(np.sum(self.durations))

    @property
    def frames(self):
        return list(zip(self.starts.tolist(), self.durations.tolist()))


@dataclass(frozen=True, eq=False)
class Tac:
    """Activity concentration (kBq/ml) per frame of a :class:`FrameGrid`.

    Negative values are only accepted with ``raw=True`` (uncorrected
    measurements, noisy synthetic data); fitting uses them as they are.
    """

    grid: FrameGrid
    values: np.ndarray
    raw: bool = False

    def __post_init__(self):
        values = _frozen_array(self.values)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size != len(self.grid):
            raise ValueError(
                f"TAC has {values.size} values but the grid has {len(self.grid)} frames"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("TAC values must be finite")
        if not self.raw and np.any(values < 0):
            raise ValueError("negative TAC values require raw=True")

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class KineticParams:
    """Two-compartment rate constants (1/min), blood fraction and IDIF weights."""

    k1: float
    k2: float
    k3: float
    v_b: float
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0
    delta: float = 0.0

    NAMES = ("k1", "k2", "k3", "v_b", "alpha", "beta", "gamma", "delta")

    def as_dict(self):
        return {name: float(getattr(self, name)) for name in self.NAMES}

    @property
    def weights(self):
        return (self.alpha, self.beta, self.gamma, self.delta)

    def replace(self, **changes):
        values = self.as_dict()
        values.update(changes)
        return KineticParams(**values)


@dataclass(frozen=True)
class FineGrid:
    """Uniform sampling ``0, step, 2*step, ...`` up to and including ``end_s``."""

    step_s: float
    end_s: float
    times: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (self.step_s > 0 and np.isfinite(self.step_s)):
            raise ValueError("fine-grid step must be positive")
        if not (self.end_s >= 0 and np.isfinite(self.end_s)):
            raise ValueError("fine-grid end must be finite and >= 0")
        n = int(np.floor(self.end_s / self.step_s + 1e-9)) + 1
        object.__setattr__(self, "times", _frozen_array(np.arange(n) * self.step_s))

    @classmethod
    def covering(cls, grid, step_s=0.5):
        """Smallest fine grid with the given step that covers ``grid``."""
        n_steps = int(np.ceil(grid.end / step_s - 1e-9))
        return cls(step_s, n_steps * step_s)

    def __len__(self):
        return self.times.size


def frame_grid_from_spec(spec):
    """Build a contiguous grid starting at 0 from ``(count, duration_s)`` pairs.

    >>> len(frame_grid_from_spec(PROTOCOL_SPEC))
    62
    """
    spec = list(spec)
    if not spec:
        raise ValueError("frame specification is empty")
    durations = []
    for count, duration in spec:
        if int(count) != count or count < 1:
            raise ValueError(f"frame count must be a positive integer, got {count!r}")
        if not duration > 0:
            raise ValueError(f"frame duration must be positive, got {duration!r}")
        durations.extend([float(duration)] * int(count))
    durations = np.asarray(durations)
    starts = np.concatenate(([0.0], np.cumsum(durations)[:-1]))
    return FrameGrid(starts, durations)


def protocol_grid():
    """The 62-frame, 3900 s clinical acquisition grid."""
    return frame_grid_from_spec(PROTOCOL_SPEC)


def _check_model_inputs(params, input_values, fine):
    a = np.ascontiguousarray(input_values, dtype=np.float64)
    if a.ndim != 1 or a.size != len(fine):
        raise ValueError(
            f"input has {a.size} samples but the fine grid has {len(fine)}"
        )
    if not np.all(np.isfinite(a)):
        raise ValueError("input samples must be finite")
    if params.k2 + params.k3 < MIN_RATE_SUM:
        raise ValueError("k2 + k3 must be > 0 (kernel normalisation is singular)")
    return a


def eval_tissue_model(params, input_values, fine):
    """Closed-form model output ``V_B*A + (1-V_B)*(kernel * A)`` on the fine grid.

    The kernel ``K1/(k2+k3) * (k3 + k2*exp(-(k2+k3)t))`` is integrated exactly
    over each held input cell.

    Parameters
    ----------
    params : KineticParams
        Only ``k1, k2, k3, v_b`` are used; the weights act through the input.
    input_values : array_like
        Mixed input ``A`` sampled on ``fine``.
    fine : FineGrid

    Returns
    -------
    numpy.ndarray
    """
    a = _check_model_inputs(params, input_values, fine)
    to_s = 1.0 / SECONDS_PER_MINUTE
    tissue = _kernels.tissue_response(
        a, params.k1 * to_s, params.k2 * to_s, params.k3 * to_s, float(fine.step_s)
    )
    return params.v_b * a + (1.0 - params.v_b) * tissue


def solve_ode_reference(params, input_values, fine):
    """Fourth-order Runge-Kutta integration of the compartment ODEs.

    Independent check on :func:`eval_tissue_model`: same held input, no use of
    the closed-form solution.
    """
    a = _check_model_inputs(params, input_values, fine)
    to_s = 1.0 / SECONDS_PER_MINUTE
    tissue = _kernels.rk4_two_compartment(
        a, params.k1 * to_s, params.k2 * to_s, params.k3 * to_s, float(fine.step_s)
    )
    return params.v_b * a + (1.0 - params.v_b) * tissue


class FrameAverager:
    """Precomputed sample bins mapping fine-grid curves onto frames."""

    def __init__(self, fine, grid):
        if fine.times[-1] < grid.end - 1e-9 * max(1.0, grid.end):
            raise ValueError(
                f"fine grid ends at {fine.times[-1]} s, before the last frame end {grid.end} s"
            )
        step = fine.step_s
        first = np.ceil(grid.starts / step - 1e-9).astype(np.int64)
        stop = np.ceil(grid.ends / step - 1e-9).astype(np.int64)
        counts = stop - first
        if np.any(counts < 1):
            raise ValueError("fine step is too coarse: some frame contains no fine samples")
        self.grid = grid
        self.n_fine = len(fine)
        self._first = first
        self._stop = stop
        self._counts = counts.astype(np.float64)
        # frames are contiguous so the bins tile [first[0], stop[-1])
        self._edges = first

    def __call__(self, fine_values):
        fine_values = np.asarray(fine_values, dtype=np.float64)
        if fine_values.shape[-1] != self.n_fine:
            raise ValueError("curve length does not match the fine grid")
        segment = fine_values[..., self._first[0] : self._stop[-1]]
        sums = np.add.reduceat(segment, self._edges - self._first[0], axis=-1)
        return sums / self._counts


def frame_average(fine_values, fine, grid, raw=False):
    """Mean of the fine samples falling in each frame ``[start, start+duration)``."""
    values = FrameAverager(fine, grid)(fine_values)
    return Tac(grid, values, raw=raw or bool(np.any(values < 0)))
