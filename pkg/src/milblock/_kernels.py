"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a numba ``@njit`` version and a pure numpy/Python
version. Both accumulate in the same order, so they agree bit for bit; the
test suite checks this directly.

Set ``MILBLOCK_NUMBA=0`` to force the numpy path (it is also used when numba
is not installed).
"""

import math
import os

import numpy as np

MASK64 = (1 << 64) - 1
TWO_NEG_53 = 1.0 / 9007199254740992.0

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional extra
    numba = None
    HAVE_NUMBA = False

_flag = os.environ.get("MILBLOCK_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "no", "off")
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy / pure Python reference path
# --------------------------------------------------------------------------


def np_matmul_acc(a, b):
    """a @ b with the inner sum taken strictly left to right."""
    m, n = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(n):
        out += a[:, i : i + 1] * b[i : i + 1, :]
    return out


def np_topk_select(x, k):
    m = x.shape[0]
    if k == m:
        sel = np.repeat(np.arange(m, dtype=np.int64)[:, None], x.shape[1], axis=1)
    else:
        sel = np.argsort(-x, axis=0, kind="stable")[:k].astype(np.int64)
    vals = np.take_along_axis(x, sel, axis=0)
    # cumsum is sequential, unlike sum (pairwise)
    total = np.cumsum(vals, axis=0)[-1]
    return total / k, sel


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


def _next_py(s):
    result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
    t = (s[1] << 17) & MASK64
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


def np_uniform_fill(state, n):
    s = [int(v) for v in state]
    out = np.empty(n)
    for i in range(n):
        out[i] = (_next_py(s) >> 11) * TWO_NEG_53
    state[:] = np.array(s, dtype=np.uint64)
    return out


def np_raw_fill(state, n):
    s = [int(v) for v in state]
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        out[i] = _next_py(s)
    state[:] = np.array(s, dtype=np.uint64)
    return out


def np_normal_fill(state, n):
    pairs = (n + 1) // 2
    u = np_uniform_fill(state, 2 * pairs)
    out = np.empty(2 * pairs)
    for i in range(pairs):
        r = math.sqrt(-2.0 * math.log(1.0 - u[2 * i]))
        theta = 2.0 * math.pi * u[2 * i + 1]
        out[2 * i] = r * math.cos(theta)
        out[2 * i + 1] = r * math.sin(theta)
    return out[:n]


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:
    _U5 = np.uint64(5)
    _U9 = np.uint64(9)
    _U11 = np.uint64(11)
    _U17 = np.uint64(17)

    @njit(cache=True)
    def _rotl_nb(x, k):
        return (x << np.uint64(k)) | (x >> np.uint64(64 - k))

    @njit(cache=True)
    def _next_nb(s):
        result = _rotl_nb(s[1] * _U5, 7) * _U9
        t = s[1] << _U17
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl_nb(s[3], 45)
        return result

    @njit(cache=True)
    def nb_raw_fill(state, n):
        out = np.empty(n, dtype=np.uint64)
        for i in range(n):
            out[i] = _next_nb(state)
        return out

    @njit(cache=True)
    def nb_uniform_fill(state, n):
        out = np.empty(n)
        for i in range(n):
            out[i] = np.float64(_next_nb(state) >> _U11) * TWO_NEG_53
        return out

    @njit(cache=True)
    def nb_normal_fill(state, n):
        pairs = (n + 1) // 2
        u = nb_uniform_fill(state, 2 * pairs)
        out = np.empty(2 * pairs)
        for i in range(pairs):
            r = math.sqrt(-2.0 * math.log(1.0 - u[2 * i]))
            theta = 2.0 * math.pi * u[2 * i + 1]
            out[2 * i] = r * math.cos(theta)
            out[2 * i + 1] = r * math.sin(theta)
        return out[:n]

    @njit(cache=True)
    def nb_matmul_acc(a, b):
        m, n = a.shape
        p = b.shape[1]
        out = np.zeros((m, p))
        for r in range(m):
            for c in range(p):
                acc = 0.0
                for i in range(n):
                    acc += a[r, i] * b[i, c]
                out[r, c] = acc
        return out

    @njit(cache=True)
    def nb_topk_select(x, k):
        m, cols = x.shape
        sel = np.empty((k, cols), dtype=np.int64)
        out = np.empty(cols)
        for c in range(cols):
            if k == m:
                for i in range(m):
                    sel[i, c] = i
            else:
                order = np.argsort(-x[:, c], kind="mergesort")
                for i in range(k):
                    sel[i, c] = order[i]
            acc = 0.0
            for i in range(k):
                acc += x[sel[i, c], c]
            out[c] = acc / k
        return out, sel


def _pick(name):
    if USE_NUMBA:
        return globals()["nb_" + name]
    return globals()["np_" + name]


def matmul_acc(a, b):
    return _pick("matmul_acc")(np.ascontiguousarray(a, dtype=np.float64),
                               np.ascontiguousarray(b, dtype=np.float64))


def topk_select(x, k):
    return _pick("topk_select")(np.ascontiguousarray(x, dtype=np.float64), int(k))


def raw_fill(state, n):
    return _pick("raw_fill")(state, int(n))


def uniform_fill(state, n):
    return _pick("uniform_fill")(state, int(n))


def normal_fill(state, n):
    return _pick("normal_fill")(state, int(n))
