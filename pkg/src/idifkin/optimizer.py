"""Bound-constrained nonlinear least squares (trust-region reflective).

Iterates stay strictly inside the box. Each iteration rescales the variables
with the Coleman-Li vector (distance to the bound the anti-gradient points
at) times the box width, solves a trust-region subproblem by SVD, and then
chooses between that step truncated at the boundary, its reflection off the
boundary, and a scaled anti-gradient step. Steps are only accepted when they
lower the cost, so the result is never worse than the (nudged) start.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

EPS = np.finfo(np.float64).eps
CBRT_EPS = np.cbrt(EPS)
START_MARGIN = 1e-10


class FitError(RuntimeError):
    """Raised when a problem cannot be solved at all (e.g. non-finite residuals at the start)."""


@dataclass(frozen=True, eq=False)
class ParamBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.array(self.lower, dtype=np.float64)
        upper = np.array(self.upper, dtype=np.float64)
        if lower.ndim != 1 or lower.shape != upper.shape:
            raise ValueError("lower and upper bounds must be 1-D and of equal length")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("bounds must be finite")
        if np.any(lower >= upper):
            raise ValueError("every lower bound must be strictly below its upper bound")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    def __len__(self):
        return self.lower.size

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, x):
        x = np.asarray(x)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def nudge_inside(self, x, margin=START_MARGIN):
        """Clip ``x`` into the box, then move points sitting on a bound inward."""
        x = np.clip(np.asarray(x, dtype=np.float64), self.lower, self.upper)
        step = margin * self.width
        x = np.where(x <= self.lower, self.lower + step, x)
        x = np.where(x >= self.upper, self.upper - step, x)
        return x


@dataclass
class FitProblem:
    """Residual function, start point, bounds and stopping rules."""

    residual: Callable[[np.ndarray], np.ndarray]
    x0: Sequence[float]
    bounds: ParamBounds
    ftol: float = 1e-8
    xtol: float = 1e-8
    gtol: float = 1e-8
    max_iter: int = 400
    names: Optional[Sequence[str]] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        if self.x0.shape != self.bounds.lower.shape:
            raise ValueError("x0 and bounds have different lengths")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True, eq=False)
class FitResult:
    x: np.ndarray
    mse: float
    cost: float
    iterations: int
    n_evals: int
    converged: bool
    reason: str
    names: tuple = field(default=())
    residuals: Optional[np.ndarray] = field(default=None, repr=False)

    def params(self):
        """Mapping name -> fitted value (requires ``names``)."""
        return dict(zip(self.names, (float(v) for v in self.x)))


def _evaluate(problem, x):
    r = np.asarray(problem.residual(x), dtype=np.float64)
    if r.ndim != 1:
        raise FitError("residual function must return a 1-D array")
    return r


def jacobian(problem, x, r0=None):
    """Central-difference Jacobian; one-sided second-order stencils at the bounds.

    Step ``h_i = eps**(1/3) * max(|x_i|, 1)``. Every evaluation point lies
    inside the box. Costs ``2 * len(x)`` residual evaluations.
    """
    x = np.asarray(x, dtype=np.float64)
    if r0 is None:
        r0 = _evaluate(problem, x)
    lower, upper = problem.bounds.lower, problem.bounds.upper
    jac = np.empty((r0.size, x.size))
    for i in range(x.size):
        h = CBRT_EPS * max(abs(x[i]), 1.0)
        if x[i] - h >= lower[i] and x[i] + h <= upper[i]:
            offsets = (-h, h)
        elif x[i] + 2 * h <= upper[i]:
            offsets = (h, 2 * h)
        else:
            offsets = (-h, -2 * h)
        points = []
        for offset in offsets:
            xp = x.copy()
            xp[i] = x[i] + offset
            rp = _evaluate(problem, xp)
            if not np.all(np.isfinite(rp)):
                raise FitError(f"non-finite residuals when perturbing parameter {i}")
            points.append((xp[i] - x[i], rp))
        # slope at 0 of the parabola through (0, r0), (h1, r1), (h2, r2);
        # reduces to the central difference when h2 == -h1
        (h1, r1), (h2, r2) = points
        jac[:, i] = (h2 * h2 * (r1 - r0) - h1 * h1 * (r2 - r0)) / (h1 * h2 * (h2 - h1))
    return jac


def _scaling_vector(x, g, lower, upper):
    """Coleman-Li scaling: distance to the bound the anti-gradient points at.

    Returns ``v`` and its derivative sign ``dv`` (all bounds are finite).
    """
    v = np.ones_like(x)
    dv = np.zeros_like(x)
    down = g > 0
    up = g < 0
    v[up] = upper[up] - x[up]
    dv[up] = -1.0
    v[down] = x[down] - lower[down]
    dv[down] = 1.0
    return v, dv


def _strictly_inside(x, lower, upper):
    """Move components sitting on (or beyond) a bound one ulp inside."""
    x = np.clip(x, lower, upper)
    on_lower = x <= lower
    on_upper = x >= upper
    x[on_lower] = np.nextafter(lower[on_lower], upper[on_lower])
    x[on_upper] = np.nextafter(upper[on_upper], lower[on_upper])
    return x


def _trust_region_step(u, s, vt, uf, delta):
    """Minimise ``||J p + f||`` subject to ``||p|| <= delta`` given ``J = U S V^T``.

    ``uf`` is ``U^T f``. Returns the step and the Levenberg-Marquardt
    parameter that realises it (0 for the Gauss-Newton step).
    """
    def phi_and_derivative(lm):
        denom = s**2 + lm
        p_norm = np.linalg.norm(s * uf / denom)
        value = p_norm - delta
        derivative = -np.sum((s * uf) ** 2 / denom**3) / p_norm
        return value, derivative

    full_rank = s.size > 0 and s[-1] > EPS * s[0] * max(len(s), 1)
    if full_rank:
        p = -vt.T @ (uf / s)
        if np.linalg.norm(p) <= delta:
            return p, 0.0

    grad_norm = np.linalg.norm(s * uf)
    lm_upper = grad_norm / delta
    if full_rank:
        value, derivative = phi_and_derivative(0.0)
        lm_lower = -value / derivative
    else:
        lm_lower = 0.0
    lm = max(0.001 * lm_upper, np.sqrt(lm_lower * lm_upper))
    for _ in range(10):
        if lm < lm_lower or lm > lm_upper:
            lm = max(0.001 * lm_upper, np.sqrt(lm_lower * lm_upper))
        value, derivative = phi_and_derivative(lm)
        if value < 0:
            lm_upper = lm
        ratio = value / derivative
        lm_lower = max(lm_lower, lm - ratio)
        lm -= (value + delta) / delta * ratio
        if abs(value) < 0.01 * delta:
            break
    p = -vt.T @ (s * uf / (s**2 + lm))
    # keep the step inside the region despite the loose root tolerance
    norm = np.linalg.norm(p)
    if norm > delta:
        p *= delta / norm
    return p, lm


def _quadratic_value(jh, gh, ph, diag):
    jp = jh @ ph
    return 0.5 * (float(jp @ jp) + float(ph @ (diag * ph))) + float(gh @ ph)


def _minimise_along(jh, gh, direction, diag, lo, hi, origin=None):
    """Minimise the quadratic model on ``origin + t * direction`` for t in [lo, hi]."""
    jd = jh @ direction
    a = 0.5 * (float(jd @ jd) + float(direction @ (diag * direction)))
    b = float(gh @ direction)
    c = 0.0
    if origin is not None:
        jo = jh @ origin
        b += float(jd @ jo) + float(direction @ (diag * origin))
        c = _quadratic_value(jh, gh, origin, diag)
    candidates = [lo, hi]
    if a > 0:
        t = -b / (2.0 * a)
        if lo < t < hi:
            candidates.append(t)
    values = [a * t * t + b * t + c for t in candidates]
    best = int(np.argmin(values))
    return candidates[best], values[best]


def _distance_to_bound(x, step, lower, upper):
    """Largest t with ``x + t*step`` feasible, and which components stop it."""
    with np.errstate(divide="ignore", invalid="ignore"):
        room = np.where(step > 0, (upper - x) / step, np.where(step < 0, (lower - x) / step, np.inf))
    t = float(np.min(room))
    return t, np.isclose(room, t, rtol=0.0, atol=0.0) | (room == t)


def _select_step(x, jh, diag_h, gh, ph, d, delta, lower, upper, theta):
    """Pick among the trust-region step, its reflection at the boundary and a
    scaled anti-gradient step; all candidates stay strictly inside the box."""
    p = d * ph
    if np.all(x + p > lower) and np.all(x + p < upper):
        return p, ph, -_quadratic_value(jh, gh, ph, diag_h)

    stride, hits = _distance_to_bound(x, p, lower, upper)
    rh = ph.copy()
    rh[hits] *= -1.0
    r = d * rh
    ph = ph * stride
    p = p * stride
    x_on_bound = x + p

    # reflected direction, limited by the trust region and the box
    pr = float(ph @ rh)
    rr = float(rh @ rh)
    pp = float(ph @ ph)
    disc = pr * pr - rr * (pp - delta * delta)
    to_region = (-pr + np.sqrt(max(disc, 0.0))) / rr if rr > 0 else 0.0
    to_box, _ = _distance_to_bound(x_on_bound, r, lower, upper)
    r_max = min(to_box, to_region)
    if r_max > 0:
        r_lo = (1.0 - theta) * stride / r_max
        r_hi = theta * to_box if r_max == to_box else to_region
    else:
        r_lo, r_hi = 0.0, -1.0
    if r_lo <= r_hi:
        t, r_value = _minimise_along(jh, gh, rh, diag_h, r_lo, r_hi, origin=ph)
        rh = ph + t * rh
        r = d * rh
    else:
        r_value = np.inf

    ph = ph * theta
    p = p * theta
    p_value = _quadratic_value(jh, gh, ph, diag_h)

    agh = -gh
    ag = d * agh
    to_region = delta / np.linalg.norm(agh)
    to_box, _ = _distance_to_bound(x, ag, lower, upper)
    ag_max = theta * to_box if to_box < to_region else to_region
    t, ag_value = _minimise_along(jh, gh, agh, diag_h, 0.0, ag_max)
    agh = agh * t
    ag = ag * t

    values = (p_value, r_value, ag_value)
    best = int(np.argmin(values))
    if best == 0:
        return p, ph, -p_value
    if best == 1:
        return r, rh, -r_value
    return ag, agh, -ag_value


def _solve_once(problem, x_start):
    bounds = problem.bounds
    lower, upper = bounds.lower, bounds.upper
    scale = bounds.width
    x = _strictly_inside(bounds.nudge_inside(x_start), lower, upper)
    f = _evaluate(problem, x)
    if not np.all(np.isfinite(f)):
        raise FitError("residual function is not finite at the starting point")
    n_evals = 1
    m = f.size
    cost = 0.5 * float(f @ f)
    jac = jacobian(problem, x, f)
    n_evals += 2 * x.size
    g = jac.T @ f

    v, dv = _scaling_vector(x, g, lower, upper)
    v[dv != 0] /= scale[dv != 0]
    delta = float(np.linalg.norm(x / scale / np.sqrt(v)))
    if delta == 0.0:
        delta = 1.0

    reason = "max_iter"
    converged = False
    iterations = 0
    while True:
        v, dv = _scaling_vector(x, g, lower, upper)
        g_norm = float(np.max(np.abs(g * v)))
        if g_norm < problem.gtol:
            reason, converged = "gtol", True
            break
        if iterations >= problem.max_iter:
            break
        iterations += 1

        v[dv != 0] /= scale[dv != 0]
        d = np.sqrt(v) * scale
        diag_h = g * dv * scale
        gh = d * g
        jh = jac * d
        aug = np.vstack([jh, np.diag(np.sqrt(diag_h))])
        f_aug = np.concatenate([f, np.zeros(x.size)])
        u_svd, s_svd, vt_svd = np.linalg.svd(aug, full_matrices=False)
        uf = u_svd.T @ f_aug
        theta = max(0.995, 1.0 - g_norm)

        actual = -1.0
        while actual <= 0 and iterations <= problem.max_iter:
            ph, _ = _trust_region_step(u_svd, s_svd, vt_svd, uf, delta)
            step, step_h, predicted = _select_step(
                x, jh, diag_h, gh, ph, d, delta, lower, upper, theta
            )
            x_new = _strictly_inside(x + step, lower, upper)
            f_new = _evaluate(problem, x_new)
            n_evals += 1
            step_h_norm = float(np.linalg.norm(step_h))
            if not np.all(np.isfinite(f_new)):
                delta = 0.25 * step_h_norm
                continue
            cost_new = 0.5 * float(f_new @ f_new)
            actual = cost - cost_new
            ratio = actual / predicted if predicted > 0 else (1.0 if actual == 0 else 0.0)
            if ratio < 0.25:
                delta = 0.25 * step_h_norm
            elif ratio > 0.75 and step_h_norm > 0.95 * delta:
                delta *= 2.0
            step_norm = float(np.linalg.norm(step / scale))
            x_norm = float(np.linalg.norm(x / scale))
            if actual < problem.ftol * cost and ratio > 0.25 and actual >= 0:
                reason, converged = "ftol", True
            elif step_norm < problem.xtol * (problem.xtol + x_norm):
                reason, converged = "xtol", True
            else:
                reason = None
            if reason is not None:
                break
            if actual <= 0:
                # rejected step: shrink and retry on the same linearisation
                continue

        if actual > 0:
            assert bounds.contains(x_new), "iterate left the feasible box"
            x, f, cost = x_new, f_new, cost_new
            jac = jacobian(problem, x, f)
            n_evals += 2 * x.size
            g = jac.T @ f
        if reason is not None:
            break
        reason = "max_iter"

    return FitResult(
        x=x,
        mse=float(np.mean(f * f)),
        cost=cost,
        iterations=iterations,
        n_evals=n_evals,
        converged=converged,
        reason=reason,
        names=tuple(problem.names) if problem.names is not None else (),
        residuals=f,
    )


def solve(problem, multistart=0, seed=0):
    """Minimise ``0.5 * ||r(x)||^2`` inside the bounds.

    Parameters
    ----------
    problem : FitProblem
    multistart : int
        Extra runs from uniform random points inside the bounds; the run
        from ``problem.x0`` always happens and the lowest cost wins.
    seed : int
        Seed for the multistart draws.

    Returns
    -------
    FitResult
    """
    best = _solve_once(problem, problem.x0)
    if multistart > 0:
        rng = np.random.default_rng(seed)
        bounds = problem.bounds
        for _ in range(multistart):
            start = bounds.lower + rng.uniform(size=len(bounds)) * bounds.width
            try:
                candidate = _solve_once(problem, start)
            except FitError as exc:
                logger.debug("multistart run failed: %s", exc)
                continue
            if candidate.cost < best.cost:
                best = candidate
    return best
