import contextvars
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union
import numpy as np
from scipy.special import expit

#dense matrices are plain float64 ndarrays; leading axes (heads, ...) are batch axes
Matrix = np.ndarray
Rng = np.random.Generator

#largest finite IEEE half-precision value
HALF_MAX = float(np.finfo(np.float16).max)

_active_counter: contextvars.ContextVar = contextvars.ContextVar('pmodlab_op_counter', default = None)


class OpCounter():
    """
    Multiply-accumulate counter filled by the matmul kernels of this module.

    Attributes
    ----------
    macs
        Number of multiply-accumulate operations performed while the counter was active.
    calls
        Number of kernel invocations counted.
    """
    def __init__(self):
        self.macs = 0
        self.calls = 0

    def add(self, macs: int) -> None:
        self.macs += int(macs)
        self.calls += 1

    def __repr__(self):
        return f"OpCounter with {self.macs} multiply-accumulates over {self.calls} kernel calls"


@contextmanager
def count_ops() -> Iterator[OpCounter]:
    """
    Count the multiply-accumulates of every kernel call made inside the `with` block.

    Returns
    ----------
    :class:`~pmodlab.numerics.OpCounter`
        The active counter. Nested blocks install a fresh counter and restore the outer one on exit.
    """
    counter = OpCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)


def _record(macs: int) -> None:
    """For internal use. Add to the active counter, if any."""
    counter = _active_counter.get()
    if counter is not None:
        counter.add(macs)


def make_rng(seed: Union[int, Sequence[int]]) -> Rng:
    """
    Get the PCG64 generator used everywhere in the package.

    Parameters
    ----------
    seed
        A non-negative integer, or a sequence of them (hashed into one stream by :class:`~numpy.random.SeedSequence`).

    Returns
    ----------
    :class:`~numpy.random.Generator`
        A generator whose stream only depends on `seed`.
    """
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """
    Matrix product with shape checking and multiply-accumulate counting.

    Parameters
    ----------
    a
        Array of shape (..., m, k).
    b
        Array of shape (..., k, n), or a vector of length k.

    Returns
    ----------
    :class:`~numpy.ndarray`
        The product of shape (..., m, n), or (..., m) if `b` is a vector.
    """
    a = np.asarray(a, dtype = np.float64)
    b = np.asarray(b, dtype = np.float64)
    if a.ndim < 2:
        raise ValueError(f"🛑 Left operand should be at least 2-D, got shape {a.shape}")
    inner = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner:
        raise ValueError(f"🛑 Dimension mismatch in matmul: {a.shape} x {b.shape}")
    out = np.matmul(a, b)
    _record(out.size * a.shape[-1])
    return out


def masked_scores(q: Matrix, k: Matrix, visible: np.ndarray, scale: float = 1.0) -> Matrix:
    """
    Scaled attention scores `scale * q @ k.T` with invisible entries set to `-inf`.

    Only visible (query, key) pairs are counted, as a causal kernel would compute them.

    Parameters
    ----------
    q
        Queries of shape (..., m, dh).
    k
        Keys of shape (..., mk, dh).
    visible
        Boolean mask broadcastable to (..., m, mk).
    scale
        Multiplier applied to every score.

    Returns
    ----------
    :class:`~numpy.ndarray`
        Scores of shape (..., m, mk).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"🛑 Dimension mismatch in attention scores: {q.shape} x {k.shape}")
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    mask = np.broadcast_to(visible, scores.shape)
    _record(int(mask.sum()) * q.shape[-1])
    return np.where(mask, scores, -np.inf)


def masked_mix(p: Matrix, v: Matrix, visible: np.ndarray) -> Matrix:
    """
    Attention-weighted sum `p @ v` where `p` is zero outside `visible`; counts visible pairs only.

    Parameters
    ----------
    p
        Attention probabilities of shape (..., m, mk).
    v
        Values of shape (..., mk, dv).
    visible
        Boolean mask broadcastable to (..., m, mk).

    Returns
    ----------
    :class:`~numpy.ndarray`
        Mixed values of shape (..., m, dv).
    """
    if p.shape[-1] != v.shape[-2]:
        raise ValueError(f"🛑 Dimension mismatch in attention mixing: {p.shape} x {v.shape}")
    out = np.matmul(p, v)
    _record(int(np.broadcast_to(visible, p.shape).sum()) * v.shape[-1])
    return out


def softmax_rows(a: Matrix) -> Matrix:
    """
    Softmax over the last axis with max subtraction. Entries equal to `-inf` get probability 0.

    Parameters
    ----------
    a
        Array with at least one finite entry per row.

    Returns
    ----------
    :class:`~numpy.ndarray`
        Row-stochastic array of the same shape.
    """
    a = np.asarray(a, dtype = np.float64)
    shifted = a - np.max(a, axis = -1, keepdims = True)
    e = np.exp(shifted)
    return e / np.sum(e, axis = -1, keepdims = True)


def softmax_rows_backward(p: Matrix, dp: Matrix) -> Matrix:
    """Gradient through :func:`softmax_rows` given its output `p` and the upstream `dp`."""
    return p * (dp - np.sum(dp * p, axis = -1, keepdims = True))


def rmsnorm(x: Matrix, gain: np.ndarray, eps: float) -> tuple:
    """
    Root-mean-square normalization over the last axis.

    Parameters
    ----------
    x
        Input vector, or rows of vectors.
    gain
        Elementwise gain, same length as the last axis of `x`.
    eps
        Positive constant added to the mean square.

    Returns
    ----------
    tuple
        The normalized output and the per-row inverse RMS (needed by :func:`rmsnorm_backward`).
    """
    x = np.asarray(x, dtype = np.float64)
    if x.shape[-1] != np.shape(gain)[-1]:
        raise ValueError(f"🛑 Length mismatch in rmsnorm: input {x.shape[-1]} vs gain {np.shape(gain)[-1]}")
    if eps < 0:
        raise ValueError(f"🛑 `eps` should be non-negative, got {eps}")
    inv_rms = 1.0 / np.sqrt(np.mean(x * x, axis = -1, keepdims = True) + eps)
    return x * inv_rms * gain, inv_rms


def rmsnorm_backward(dy: Matrix, x: Matrix, gain: np.ndarray, inv_rms: np.ndarray) -> tuple:
    """
    Backward of :func:`rmsnorm`.

    Returns
    ----------
    tuple
        Gradient w.r.t. the input, and w.r.t. the gain (summed over all leading axes).
    """
    gx = dy * gain
    dgain = np.sum((dy * x * inv_rms).reshape(-1, x.shape[-1]), axis = 0)
    n = x.shape[-1]
    dx = inv_rms * gx - x * inv_rms ** 3 * np.sum(gx * x, axis = -1, keepdims = True) / n
    return dx, dgain


def silu(x: Union[float, Matrix]) -> Union[float, Matrix]:
    """Elementwise `x * sigmoid(x)`."""
    return x * expit(x)


def silu_grad(x: Union[float, Matrix]) -> Union[float, Matrix]:
    """Derivative of :func:`silu`: `sigmoid(x) * (1 + x * (1 - sigmoid(x)))`."""
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def fd_grad(f: Callable[[Matrix], float], at: Matrix, h: float = 1e-5, indices: Optional[Sequence[int]] = None) -> Matrix:
    """
    Central finite-difference gradient of a scalar function.

    Parameters
    ----------
    f
        Scalar-valued function of one array.
    at
        Point of evaluation. Not modified.
    h
        Positive step size.
    indices
        Flat indices to differentiate. Default to every entry; others are left as NaN when given.

    Returns
    ----------
    :class:`~numpy.ndarray`
        Array shaped like `at` with `(f(x + h e) - f(x - h e)) / (2h)` per entry.
    """
    if h <= 0:
        raise ValueError(f"🛑 Step size `h` should be positive, got {h}")
    x = np.array(at, dtype = np.float64, copy = True)
    grad = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    flat = x.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        plus = f(x)
        flat[i] = orig - h
        minus = f(x)
        flat[i] = orig
        grad.flat[i] = (plus - minus) / (2 * h)
    return grad


def first_overflow(factors: Sequence[float], x0: float = 1.0, dtype = np.float16) -> Optional[int]:
    """
    Repeatedly scale a value by per-layer factors in the given precision.

    Parameters
    ----------
    factors
        Multiplicative factor applied at each layer, in layer order.
    x0
        Starting magnitude.
    dtype
        Floating type of the simulation (`numpy.float16` mirrors half precision, max 65504).

    Returns
    ----------
    int or None
        The 1-based index of the first layer whose output is no longer finite, or `None` if all stay finite.
    """
    value = dtype(x0)
    with np.errstate(over = 'ignore'):
        for layer, factor in enumerate(factors, start = 1):
            value = dtype(value * dtype(factor))
            if not np.isfinite(value):
                return layer
    return None
