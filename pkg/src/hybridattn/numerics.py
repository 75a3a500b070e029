"""Dense float64 numerics shared by every other module.

Everything in this package runs on plain numpy arrays, 64-bit by default.
This module provides the common pieces: checked tensor construction (NaN/Inf
rejection), the stabilized row softmax, a deterministic counter-based random
generator with a bit-level definition so streams reproduce across platforms
and languages, and the central-difference gradient oracle used to verify
every hand-derived backward pass in the package.

All functions are pure. The only stateful object is :class:`SeededRng`,
which advances an explicit counter and must not be shared across threads.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "EvaluationError",
    "checked",
    "checked_mode",
    "as_tensor",
    "matmul",
    "row_softmax_stabilized",
    "SeededRng",
    "gaussian",
    "finite_diff_grad",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ValueError):
    """A tensor contains NaN or Inf in checked mode."""


class EvaluationError(RuntimeError):
    """A probed function returned a non-finite value."""


# Checked mode rejects NaN/Inf at construction. Tests keep it on; profiling
# runs can switch it off to avoid the isfinite scan.
_CHECKED = [True]


def checked() -> bool:
    return _CHECKED[-1]


@contextlib.contextmanager
def checked_mode(enabled: bool):
    """Temporarily toggle NaN/Inf rejection."""
    _CHECKED.append(bool(enabled))
    try:
        yield
    finally:
        _CHECKED.pop()


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    """Coerce to a float array, rejecting NaN/Inf while checked mode is on."""
    arr = np.asarray(data, dtype=dtype)
    if _CHECKED[-1] and arr.size and not np.isfinite(arr).all():
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with explicit inner-dimension checking."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def row_softmax_stabilized(logits) -> np.ndarray:
    """Row-wise softmax computed as exp(l - rowmax) / sum(exp(l - rowmax)).

    The row-max subtraction keeps every exponent non-positive, so the output
    is finite for logits up to the float64 exp range (roughly +-700), and
    each output row sums to 1 within 1e-12.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"expected a matrix of logits, got shape {logits.shape}")
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Deterministic random generator
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO53_INV = 2.0 ** -53


def _mix(x: np.ndarray) -> np.ndarray:
    # SplitMix64 output function; uint64 arithmetic wraps modulo 2**64.
    with np.errstate(over="ignore"):
        x = (x ^ (x >> _S30)) * _MIX_A
        x = (x ^ (x >> _S27)) * _MIX_B
        return x ^ (x >> _S31)


@dataclass
class SeededRng:
    """Counter-based deterministic generator (SplitMix64 stream).

    Bit-level definition, all arithmetic modulo 2**64:

        raw[i] = mix(seed + (i + 1) * 0x9E3779B97F4A7C15)
        mix(z) = h ^ (h >> 31)   where g = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
                                       h = (g ^ (g >> 27)) * 0x94D049BB133111EB

    ``i`` counts raw words drawn so far, starting at 0. Uniform doubles take
    the top 53 bits of a raw word: u = (raw >> 11) * 2**-53, in [0, 1).
    Because the stream is a pure function of (seed, i), identical seeds give
    bit-identical sequences on every platform, and drawing n words then m
    words equals drawing n + m words at once.
    """

    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) % 2**64

    def raw_words(self, count: int) -> np.ndarray:
        """The next ``count`` raw 64-bit words of the stream."""
        if count < 0:
            raise ValueError("count must be non-negative")
        idx = np.arange(self.counter + 1, self.counter + count + 1, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * _GAMMA)

    def uniform(self, shape=()) -> np.ndarray | float:
        """Uniform [0, 1) doubles from the top 53 bits of the raw stream."""
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        u = (self.raw_words(n) >> _S11).astype(np.float64) * _TWO53_INV
        return u.reshape(shape) if shape != () else float(u[0])

    def gaussian(self, shape=()) -> np.ndarray | float:
        """Standard normals via Box-Muller on consecutive uniform pairs.

        Pair (u1, u2) yields sqrt(-2 ln u1') * (cos, sin)(2 pi u2), where
        u1' = ((raw >> 11) + 1) * 2**-53 lies in (0, 1] to keep the log
        finite. The cos outputs of all pairs come first, then the sins.
        """
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        pairs = (n + 1) // 2
        raw = self.raw_words(2 * pairs)
        u1 = ((raw[:pairs] >> _S11).astype(np.float64) + 1.0) * _TWO53_INV
        u2 = (raw[pairs:] >> _S11).astype(np.float64) * _TWO53_INV
        r = np.sqrt(-2.0 * np.log(u1))
        g = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return g.reshape(shape) if shape != () else float(g[0])

    def integers(self, upper: int, count: int) -> np.ndarray:
        """``count`` draws from {0, ..., upper-1}, as floor(u * upper)."""
        if upper <= 0:
            raise ValueError("upper must be positive")
        u = (self.raw_words(count) >> _S11).astype(np.float64) * _TWO53_INV
        return np.minimum((u * upper).astype(np.int64), upper - 1)

    def derive(self, tag: int) -> "SeededRng":
        """Independent child stream; a pure function of (seed, tag).

        child_seed = mix(seed ^ mix(tag + 0x9E3779B97F4A7C15)), so jobs keyed
        by distinct tags get decorrelated streams regardless of draw order.
        """
        t = np.array([int(tag) % 2**64], dtype=np.uint64)
        s = np.array([self.seed], dtype=np.uint64)
        with np.errstate(over="ignore"):
            child = _mix(s ^ _mix(t + _GAMMA))
        return SeededRng(int(child[0]))


def gaussian(rng: SeededRng, shape) -> np.ndarray:
    """Tensor of i.i.d. standard normals drawn from ``rng`` (see SeededRng)."""
    return np.asarray(rng.gaussian(tuple(shape)))


def finite_diff_grad(f, theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.

    The independent oracle for every analytic gradient in the package; it
    never shares code with the backward passes it checks.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    theta = as_tensor(theta)
    flat = theta.ravel()
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        bump = np.zeros(flat.size)
        bump[i] = h
        fp = float(f((flat + bump).reshape(theta.shape)))
        fm = float(f((flat - bump).reshape(theta.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite value while probing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(theta.shape)
