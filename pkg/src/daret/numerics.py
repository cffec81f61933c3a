"""Deterministic numeric primitives shared by every other module.

All training arithmetic is 64-bit; vectors and matrices are plain
``numpy.ndarray`` objects with ``dtype=float64``. Randomness comes from the
Philox counter-based generator (chosen for platform-stable streams) behind
named streams, so that two runs differing only in one component consume
identical draws everywhere else.
"""

import zlib

import numpy as np

PROB_EPS = 1e-12  # probability clamp applied before every log


def stream_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return the named Philox stream for a seed.

    Streams are identified by (seed, crc32(name), *extra); the same triple
    always yields the same generator state, independent of call order. The
    generator algorithm is Philox (counter-based), fixed by contract: equal
    seeds give equal draw sequences on every platform.
    """
    key = (zlib.crc32(name.encode("ascii")),) + tuple(int(e) for e in extra)
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def rng_state(gen: np.random.Generator) -> dict:
    """Snapshot a generator's state as a JSON-safe dict."""
    return _jsonable(gen.bit_generator.state)


def rng_from_state(state: dict) -> np.random.Generator:
    """Rebuild a Philox generator from a state snapshot."""
    bg = np.random.Philox()
    bg.state = state
    return np.random.Generator(bg)


def clone_rng(gen: np.random.Generator) -> np.random.Generator:
    """Independent copy: advancing the clone never moves the original."""
    return rng_from_state(gen.bit_generator.state)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def as_vec(values) -> np.ndarray:
    """Coerce to a finite float64 1-d vector."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite entries in vector")
    return v


def dot(a, b) -> float:
    """Plain dot product; dimension mismatch is a usage error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    return float(a @ b)


def softmax2(logits) -> np.ndarray:
    """Two-way softmax, max-shifted so |logit| up to 1e4 cannot overflow."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != (2,):
        raise ValueError(f"softmax2 expects 2 logits, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax2: non-finite logits")
    e = np.exp(z - z.max())
    return e / e.sum()


def log_sum_exp(xs) -> float:
    """log(sum(exp(xs))) with max-shift; exact for singletons."""
    x = np.asarray(xs, dtype=np.float64)
    if x.size == 0:
        raise ValueError("log_sum_exp of empty sequence")
    if not np.all(np.isfinite(x)):
        raise ValueError("log_sum_exp: non-finite input")
    m = float(x.max())
    return m + float(np.log(np.sum(np.exp(x - m))))


def clamp_prob(p: float) -> float:
    """Clamp into [PROB_EPS, 1 - PROB_EPS] before taking logs."""
    return min(max(float(p), PROB_EPS), 1.0 - PROB_EPS)


def check_gradient(fn, analytic_grad, point, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn is a scalar function of a 1-d parameter vector. Per coordinate i the
    finite difference (fn(x + eps e_i) - fn(x - eps e_i)) / (2 eps) is
    compared to analytic_grad[i] with the relative error
    |fd - g| / max(1, |fd|, |g|). A non-finite fn value is reported as a
    failure naming the coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_vec(point).copy()
    g = as_vec(analytic_grad)
    if x.shape != g.shape:
        raise ValueError("point and analytic_grad shapes differ")
    worst = 0.0
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + eps
        hi = float(fn(x))
        x[i] = orig - eps
        lo = float(fn(x))
        x[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise FloatingPointError(f"non-finite fn value at coordinate {i}")
        fd = (hi - lo) / (2.0 * eps)
        err = abs(fd - g[i]) / max(1.0, abs(fd), abs(g[i]))
        worst = max(worst, err)
    return worst
