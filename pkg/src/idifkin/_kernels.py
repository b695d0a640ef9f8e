"""Hot numeric loops, compiled with numba when available.

Every kernel exists twice: a ``*_numba`` version decorated with ``njit`` and a
``*_numpy`` version written against plain numpy. The public names
(``tissue_response``, ``rk4_two_compartment``, ``signed_rank_null_count``)
point at one of the two, chosen once at import time:

* ``IDIFKIN_BACKEND=numpy`` forces the numpy path,
* ``IDIFKIN_BACKEND=numba`` (default) uses numba if it imports, else numpy.

Both paths compute the same quantity; they agree to rounding (~1e-12
relative), not bit-for-bit.
"""

import math
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_requested = os.environ.get("IDIFKIN_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"IDIFKIN_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --------------------------------------------------------------------------
# Tissue response: causal discrete convolution of the input samples with
# the irreversible two-compartment kernel, each kernel cell integrated
# exactly (rather than sampled at its left endpoint).
#
# With rates in 1/s and lam = k2 + k3,
#
#   C_n = sum_{m<=n} a[m] * int_{(n-m)dt}^{(n-m+1)dt} h(u) du
#       = K1/lam * ( k3*dt*P_n + k2*(1 - exp(-lam*dt))/lam * E_n )
#   P_n = sum_{m<=n} a[m]
#   E_n = sum_{m<=n} a[m] * exp(-lam*(n-m)*dt)
#
# which is also the exact tissue concentration after the input has been
# held at a[0], ..., a[n] for one step each.
# --------------------------------------------------------------------------


def _tissue_coefficients(k1, k2, k3, dt):
    lam = k2 + k3
    decay = math.exp(-lam * dt)
    c_const = k1 / lam * k3 * dt
    c_exp = k1 / lam * k2 * (-math.expm1(-lam * dt)) / lam
    return decay, c_const, c_exp


@_njit
def tissue_response_numba(a, k1, k2, k3, dt):
    n = a.shape[0]
    out = np.empty(n)
    lam = k2 + k3
    decay = math.exp(-lam * dt)
    c_const = k1 / lam * k3 * dt
    c_exp = k1 / lam * k2 * (-math.expm1(-lam * dt)) / lam
    p = 0.0
    e = 0.0
    for i in range(n):
        p += a[i]
        e = decay * e + a[i]
        out[i] = c_const * p + c_exp * e
    return out


def tissue_response_numpy(a, k1, k2, k3, dt):
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    decay, c_const, c_exp = _tissue_coefficients(k1, k2, k3, dt)
    if n == 0:
        return np.zeros(0)
    p = np.cumsum(a)
    # E_n = sum_{m<=n} a[m] decay^(n-m): causal convolution with decay^j
    kernel = decay ** np.arange(n, dtype=np.float64)
    size = 1 << int(2 * n - 1).bit_length()
    e = np.fft.irfft(np.fft.rfft(a, size) * np.fft.rfft(kernel, size), size)[:n]
    return c_const * p + c_exp * e


# --------------------------------------------------------------------------
# Classical RK4 on dF/dt = K1*A - (k2+k3)*F, dB/dt = k3*F, F(0)=B(0)=0,
# with A held at a[n] during step n; out[n] is F+B at the end of that step.
# --------------------------------------------------------------------------


@_njit
def rk4_two_compartment_numba(a, k1, k2, k3, dt):
    n = a.shape[0]
    out = np.empty(n)
    lam = k2 + k3
    f = 0.0
    b = 0.0
    for i in range(n):
        ai = a[i]
        f1 = k1 * ai - lam * f
        b1 = k3 * f
        fm = f + 0.5 * dt * f1
        f2 = k1 * ai - lam * fm
        b2 = k3 * fm
        fm = f + 0.5 * dt * f2
        f3 = k1 * ai - lam * fm
        b3 = k3 * fm
        fe = f + dt * f3
        f4 = k1 * ai - lam * fe
        b4 = k3 * fe
        f = f + dt / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
        b = b + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        out[i] = f + b
    return out


def rk4_two_compartment_numpy(a, k1, k2, k3, dt):
    # The recurrence is sequential; the fallback is a plain loop.
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    out = np.zeros(n)
    lam = k2 + k3
    f = 0.0
    b = 0.0
    for i in range(n):
        ai = float(a[i])
        f1 = k1 * ai - lam * f
        b1 = k3 * f
        fm = f + 0.5 * dt * f1
        f2 = k1 * ai - lam * fm
        b2 = k3 * fm
        fm = f + 0.5 * dt * f2
        f3 = k1 * ai - lam * fm
        b3 = k3 * fm
        fe = f + dt * f3
        f4 = k1 * ai - lam * fe
        b4 = k3 * fe
        f = f + dt / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
        b = b + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
        out[i] = f + b
    return out


# --------------------------------------------------------------------------
# Signed-rank null distribution by full enumeration of the 2^n sign patterns.
# Ranks arrive doubled (integers) so ties at .5 compare exactly.
# Returns the number of patterns with min(W+, W-) <= w_obs (doubled units).
# --------------------------------------------------------------------------


@_njit
def signed_rank_null_count_numba(ranks2, w2_obs):
    n = ranks2.shape[0]
    total = 0
    for i in range(n):
        total += ranks2[i]
    count = 0
    # Gray-code walk: one sign flips per step.
    w_plus = 0
    signs = np.zeros(n, dtype=np.uint8)
    n_patterns = 1 << n
    for k in range(n_patterns):
        if k > 0:
            # index of the lowest set bit of k
            j = 0
            kk = k
            while (kk & 1) == 0:
                kk >>= 1
                j += 1
            if signs[j] == 0:
                signs[j] = 1
                w_plus += ranks2[j]
            else:
                signs[j] = 0
                w_plus -= ranks2[j]
        w_minus = total - w_plus
        w = w_plus if w_plus < w_minus else w_minus
        if w <= w2_obs:
            count += 1
    return count


def signed_rank_null_count_numpy(ranks2, w2_obs):
    ranks2 = np.asarray(ranks2, dtype=np.int64)
    n = ranks2.shape[0]
    total = int(ranks2.sum())
    n_patterns = 1 << n
    chunk = min(n_patterns, 1 << 16)
    bit_index = np.arange(n, dtype=np.int64)
    count = 0
    for start in range(0, n_patterns, chunk):
        codes = np.arange(start, min(start + chunk, n_patterns), dtype=np.int64)
        bits = (codes[:, None] >> bit_index) & 1
        w_plus = bits @ ranks2
        w = np.minimum(w_plus, total - w_plus)
        count += int(np.count_nonzero(w <= w2_obs))
    return count


if BACKEND == "numba":
    tissue_response = tissue_response_numba
    rk4_two_compartment = rk4_two_compartment_numba
    signed_rank_null_count = signed_rank_null_count_numba
else:
    tissue_response = tissue_response_numpy
    rk4_two_compartment = rk4_two_compartment_numpy
    signed_rank_null_count = signed_rank_null_count_numpy
