"""Dense two-dimensional linear algebra shared by every attention path."""

import math

import numpy as np

from . import settings
from ._errors import DegenerateRowError
from ._errors import DimensionError
from ._errors import EmptyContextError
from ._errors import InfeasibleBasisError

# sqrt(2 / pi) for the tanh approximation of gelu
_GELU_C = math.sqrt(2.0 / math.pi)


def make_rng(seed):
    """
    Create a seeded random generator.

    The generator is numpy's PCG64 bit generator wrapped in a
    numpy.random.Generator, so an identical seed produces an identical draw
    sequence on every platform running the same numpy major version.

    Parameters
    ----------
    seed : int
        64-bit integer seed

    Returns
    -------
    rng : numpy.random.Generator
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_tensor(data, dtype=None):
    """
    Convert data to a two-dimensional array.

    Scalars and vectors are promoted to a single row.

    Parameters
    ----------
    data : array-like
        the values to convert
    dtype : string or numpy.dtype
        if None, use settings.default_dtype

    Returns
    -------
    tensor : numpy.ndarray
        two-dimensional, row-major array
    """
    if dtype is None:
        dtype = settings.default_dtype
    tensor = np.atleast_2d(np.asarray(data, dtype=dtype))
    if tensor.ndim != 2:
        raise DimensionError(f"expected a matrix, got an array of shape {tensor.shape}")
    return tensor


def check_finite(a, what="tensor"):
    """
    Raise ValueError if an array holds NaN or infinite entries.

    Parameters
    ----------
    a : numpy.ndarray
        array to check
    what : string
        name used in the error message

    Returns
    -------
    None
    """
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def matmul(a, b):
    """
    Multiply two matrices.

    Parameters
    ----------
    a : numpy.ndarray
        left operand, shape (m, k)
    b : numpy.ndarray
        right operand, shape (k, p)

    Returns
    -------
    product : numpy.ndarray
        shape (m, p)
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a):
    """Return the transpose of a matrix."""
    return a.T


def add(a, b):
    """Add two matrices of identical shape."""
    _check_same_shape(a, b, "add")
    return a + b


def mul(a, b):
    """Multiply two matrices of identical shape elementwise."""
    _check_same_shape(a, b, "mul")
    return a * b


def scale(a, c):
    """Multiply every entry of a matrix by the scalar c."""
    return a * c


def mean_rows(a):
    """
    Average the rows of a matrix.

    Parameters
    ----------
    a : numpy.ndarray
        shape (n, d) with n >= 1

    Returns
    -------
    mean : numpy.ndarray
        shape (1, d)
    """
    if a.shape[0] == 0:
        raise EmptyContextError("cannot average the rows of an empty matrix")
    return a.mean(axis=0, keepdims=True)


def row_scale(b, h):
    """
    Scale each row of b by the matching entry of column vector h.

    This realizes the elementwise product B ⊙ H of a basis matrix and its
    per-basis projection column.

    Parameters
    ----------
    b : numpy.ndarray
        shape (r, d)
    h : numpy.ndarray
        shape (r, 1)

    Returns
    -------
    scaled : numpy.ndarray
        shape (r, d), row i equal to h[i] * b[i]
    """
    if h.ndim != 2 or h.shape != (b.shape[0], 1):
        raise DimensionError(f"row_scale: cannot scale {b.shape} rows by {h.shape}")
    return b * h


def gaussian_matrix(rng, rows, cols, dtype=None):
    """
    Draw a matrix of independent standard normal entries.

    Parameters
    ----------
    rng : numpy.random.Generator
        seeded generator, see make_rng
    rows : int
        number of rows
    cols : int
        number of columns
    dtype : string or numpy.dtype
        if None, use settings.default_dtype

    Returns
    -------
    matrix : numpy.ndarray
    """
    if dtype is None:
        dtype = settings.default_dtype
    return rng.standard_normal((rows, cols)).astype(dtype)


def orthogonal_basis(r, d, rng):
    """
    Draw r orthonormal rows in d dimensions.

    A seeded d-by-r Gaussian matrix is orthogonalized with Householder QR
    (LAPACK geqrf through numpy.linalg.qr). The columns of Q are sign-fixed
    so the diagonal of R is positive, which makes the result a deterministic
    function of the seed.

    Parameters
    ----------
    r : int
        number of basis vectors, 1 <= r <= d
    d : int
        dimension of each basis vector
    rng : numpy.random.Generator
        seeded generator, see make_rng

    Returns
    -------
    basis : numpy.ndarray
        shape (r, d) with B Bᵀ = I_r to machine precision
    """
    if r < 1 or r > d:
        raise InfeasibleBasisError(f"cannot draw {r} orthonormal rows in {d} dimensions")

    gaussian = rng.standard_normal((d, r))
    q, upper = np.linalg.qr(gaussian, mode="reduced")

    # a zero diagonal entry keeps its column as is
    signs = np.sign(np.diag(upper))
    signs[signs == 0] = 1.0
    q = q * signs

    return np.ascontiguousarray(q.T).astype(settings.default_dtype)


def softmax_rows(scores, bias=None, mask=None):
    """
    Apply a numerically stable softmax to each row.

    Parameters
    ----------
    scores : numpy.ndarray
        shape (n, m)
    bias : numpy.ndarray
        if not None, added to scores before the softmax; same shape
    mask : numpy.ndarray of bool
        if not None, True marks hidden entries, which receive zero weight;
        same shape. every row needs at least one visible entry

    Returns
    -------
    probs : numpy.ndarray
        shape (n, m), each row summing to 1
    """
    z = scores
    if bias is not None:
        _check_same_shape(scores, bias, "softmax bias")
        z = z + bias
    if mask is not None:
        _check_same_shape(scores, mask, "softmax mask")
        dead = np.flatnonzero(mask.all(axis=1))
        if len(dead) > 0:
            raise DegenerateRowError(f"softmax rows {dead.tolist()} are fully masked")
        z = np.where(mask, -np.inf, z)

    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(scores):
    """
    Apply a numerically stable log-softmax to each row.

    Parameters
    ----------
    scores : numpy.ndarray
        shape (n, m)

    Returns
    -------
    log_probs : numpy.ndarray
        shape (n, m)
    """
    z = scores - scores.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def gather_rows(table, ids):
    """
    Select rows of a table by integer id.

    Parameters
    ----------
    table : numpy.ndarray
        shape (v, d)
    ids : array-like of int
        row ids, each in [0, v)

    Returns
    -------
    rows : numpy.ndarray
        shape (len(ids), d)
    """
    ids = np.asarray(ids, dtype=np.int64).ravel()
    if len(ids) > 0 and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"row ids must lie in [0, {table.shape[0]})")
    return table[ids]


def slice_cols(a, start, stop):
    """Return columns [start, stop) of a matrix."""
    if not 0 <= start <= stop <= a.shape[1]:
        raise DimensionError(f"cannot take columns [{start}, {stop}) of {a.shape}")
    return a[:, start:stop]


def concat_cols(blocks):
    """Concatenate matrices with equal row counts side by side."""
    rows = {b.shape[0] for b in blocks}
    if len(rows) != 1:
        raise DimensionError(f"cannot concatenate blocks with row counts {sorted(rows)}")
    return np.hstack(blocks)


def band_width(w, causal):
    """
    Get the number of relative offsets a windowed attention row covers.

    Parameters
    ----------
    w : int
        window size
    causal : bool
        if True, offsets -(w-1)..0, otherwise -(w-1)..(w-1)

    Returns
    -------
    width : int
    """
    return w if causal else 2 * w - 1


def _band_rows(n, c, w):
    # rows i whose partner j = i + c - (w - 1) lies in [0, n)
    delta = c - (w - 1)
    return max(0, -delta), min(n, n - delta), delta


def band_scores(q, k, w, causal=True):
    """
    Dot each query with the keys at relative offsets -(w-1)..(w-1).

    Column c of the result pairs query i with key j = i + c - (w - 1), so
    the column index equals the relative position index j - i + w - 1.
    Entries whose key falls outside the sequence are zero.

    Parameters
    ----------
    q : numpy.ndarray
        queries, shape (n, d)
    k : numpy.ndarray
        keys, shape (n, d)
    w : int
        window size
    causal : bool
        if True, only the w offsets -(w-1)..0 are produced

    Returns
    -------
    scores : numpy.ndarray
        shape (n, w) if causal else (n, 2w-1)
    """
    _check_same_shape(q, k, "band_scores")
    n = q.shape[0]
    width = band_width(w, causal)
    scores = np.zeros((n, width), dtype=np.result_type(q, k))
    for c in range(width):
        lo, hi, delta = _band_rows(n, c, w)
        if lo < hi:
            scores[lo:hi, c] = np.einsum("ij,ij->i", q[lo:hi], k[lo + delta : hi + delta])
    return scores


def band_combine(a, v, w, causal=True):
    """
    Mix value rows with banded weights.

    Row i of the result is the sum over columns c of a[i, c] * v[j] with
    j = i + c - (w - 1), skipping partners outside the sequence.

    Parameters
    ----------
    a : numpy.ndarray
        weights, shape (n, w) if causal else (n, 2w-1)
    v : numpy.ndarray
        values, shape (n, d)
    w : int
        window size
    causal : bool
        band layout, see band_scores

    Returns
    -------
    mixed : numpy.ndarray
        shape (n, d)
    """
    n = v.shape[0]
    width = band_width(w, causal)
    if a.shape != (n, width):
        raise DimensionError(f"band_combine: weights {a.shape} do not fit values {v.shape}")
    out = np.zeros(v.shape, dtype=np.result_type(a, v))
    for c in range(width):
        lo, hi, delta = _band_rows(n, c, w)
        if lo < hi:
            out[lo:hi] += a[lo:hi, c : c + 1] * v[lo + delta : hi + delta]
    return out


def band_scatter(a, x, w, causal=True):
    """
    Apply the transpose of band_combine.

    Row j of the result is the sum of a[i, c] * x[i] over every (i, c)
    whose partner i + c - (w - 1) equals j.

    Parameters
    ----------
    a : numpy.ndarray
        weights, shape (n, w) if causal else (n, 2w-1)
    x : numpy.ndarray
        shape (n, d)
    w : int
        window size
    causal : bool
        band layout, see band_scores

    Returns
    -------
    scattered : numpy.ndarray
        shape (n, d)
    """
    n = x.shape[0]
    width = band_width(w, causal)
    if a.shape != (n, width):
        raise DimensionError(f"band_scatter: weights {a.shape} do not fit rows {x.shape}")
    out = np.zeros(x.shape, dtype=np.result_type(a, x))
    for c in range(width):
        lo, hi, delta = _band_rows(n, c, w)
        if lo < hi:
            out[lo + delta : hi + delta] += a[lo:hi, c : c + 1] * x[lo:hi]
    return out


def band_mask(n, w, causal=True, windowed=True):
    """
    Build the hidden-entry mask of a banded attention layout.

    Parameters
    ----------
    n : int
        sequence length
    w : int
        window size
    causal : bool
        band layout, see band_scores
    windowed : bool
        only used when causal is False. if True, a query may not look past
        the end of its own window of size w; otherwise it sees every
        position within w-1 in both directions

    Returns
    -------
    mask : numpy.ndarray of bool
        True marks hidden entries
    """
    width = band_width(w, causal)
    i = np.arange(n)[:, None]
    j = i + np.arange(width)[None, :] - (w - 1)
    hidden = (j < 0) | (j >= n)
    if not causal and windowed:
        hidden |= j >= (i // w + 1) * w
    return hidden


def prefix_mean(x, ends):
    """
    Average a prefix of the rows of x for every output row.

    Row i of the result is the mean of rows [0, ends[i]) of x, or a zero row
    when ends[i] is 0.

    Parameters
    ----------
    x : numpy.ndarray
        shape (n, d)
    ends : array-like of int
        one exclusive prefix end per output row, each in [0, n]

    Returns
    -------
    means : numpy.ndarray
        shape (len(ends), d)
    """
    ends = np.asarray(ends, dtype=np.int64)
    if len(ends) > 0 and (ends.min() < 0 or ends.max() > x.shape[0]):
        raise DimensionError(f"prefix ends must lie in [0, {x.shape[0]}]")
    sums = np.zeros((x.shape[0] + 1, x.shape[1]), dtype=x.dtype)
    np.cumsum(x, axis=0, out=sums[1:])
    return sums[ends] / np.maximum(ends, 1)[:, None].astype(x.dtype)


def layer_norm_rows(x, gain, bias, eps=1e-5):
    """
    Normalize each row to zero mean and unit variance, then scale and shift.

    Parameters
    ----------
    x : numpy.ndarray
        shape (n, d)
    gain : numpy.ndarray
        shape (1, d)
    bias : numpy.ndarray
        shape (1, d)
    eps : float
        variance floor

    Returns
    -------
    normed : numpy.ndarray
        shape (n, d)
    """
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def gelu(x):
    """Apply the tanh approximation of the Gaussian error linear unit."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    """Get the derivative of gelu at x."""
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
