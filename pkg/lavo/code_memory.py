"""Compress context into a fixed-size orthogonal memory and attend over it."""

import math

import numpy as np

from . import tensor_core as tc
from ._errors import ContractError
from ._errors import DimensionError
from ._errors import EmptyContextError
from .autodiff import Parameter


class _Empty:
    """Marker for a memory that has absorbed no tokens yet."""

    def __repr__(self):
        """Describe the marker."""
        return "EMPTY"

    def __bool__(self):
        """Treat the marker as falsy."""
        return False


EMPTY = _Empty()


class OrthogonalBasis(Parameter):
    """
    A row-orthonormal r-by-d matrix defining the memory's orthogonal spaces.

    Frozen bases are never updated, so their orthonormality holds for the
    lifetime of a model.

    Parameters
    ----------
    b : numpy.ndarray
        shape (r, d) with orthonormal rows
    frozen : bool
        if True, the basis is excluded from training
    name : string
        label used in checkpoints
    """

    def __init__(self, b, frozen=True, name=None):
        """Create basis."""
        super().__init__(b, trainable=not frozen, name=name)

    @property
    def b(self):
        """Get the basis matrix."""
        return self.value

    @property
    def frozen(self):
        """Get whether the basis is excluded from training."""
        return not self.trainable

    @property
    def num_bases(self):
        """Get r, the number of basis rows."""
        return self.value.shape[0]

    @property
    def dim(self):
        """Get d, the dimension of each basis row."""
        return self.value.shape[1]

    def orthonormality_error(self):
        """Get the max-abs deviation of B Bᵀ from the identity."""
        gram = self.value @ self.value.T
        return float(np.abs(gram - np.eye(self.num_bases)).max())


def make_basis(r, d, rng, frozen=True, name=None):
    """
    Draw a fresh orthogonal basis.

    Parameters
    ----------
    r : int
        number of basis rows
    d : int
        dimension of each row
    rng : numpy.random.Generator
        seeded generator
    frozen : bool
        if True, exclude the basis from training
    name : string
        label used in checkpoints

    Returns
    -------
    basis : OrthogonalBasis
    """
    return OrthogonalBasis(tc.orthogonal_basis(r, d, rng), frozen=frozen, name=name)


def _basis_array(basis):
    return basis.value if isinstance(basis, Parameter) else basis


def compress(x, basis):
    """
    Compress a context into its orthogonal memory.

    The memory is B ⊙ H where H is the mean over tokens of the projections
    B·x_t, so row i of the memory is basis row i scaled by how much of the
    context lies along it on average.

    Parameters
    ----------
    x : numpy.ndarray
        context, shape (n, d) with n >= 1
    basis : OrthogonalBasis or numpy.ndarray
        shape (r, d)

    Returns
    -------
    memory : numpy.ndarray
        shape (r, d)
    """
    b = _basis_array(basis)
    if x.shape[0] == 0:
        raise EmptyContextError("cannot compress an empty context")
    if x.shape[1] != b.shape[1]:
        raise DimensionError(f"context {x.shape} does not match basis {b.shape}")

    h = tc.transpose(tc.mean_rows(tc.matmul(x, tc.transpose(b))))
    return tc.row_scale(b, h)


class OrthoMemoryState:
    """
    Constant-footprint running state of a causally growing orthogonal memory.

    The state keeps the running sum of projections B·x_τ and the token count
    t, so the mean projection H_t is running_sum / t at every step.

    Parameters
    ----------
    basis : OrthogonalBasis or numpy.ndarray
        shape (r, d)
    dtype : string or numpy.dtype
        if None, use the basis dtype
    """

    def __init__(self, basis, dtype=None):
        """Create an empty state."""
        self.basis = _basis_array(basis)
        if dtype is None:
            dtype = self.basis.dtype
        self.running_sum = np.zeros((self.basis.shape[0], 1), dtype=dtype)
        self.count = 0

    def to_bytes(self):
        """Serialize the running sum and count."""
        return self.running_sum.tobytes() + np.array([self.count], dtype="<u8").tobytes()


def state_update(state, x_t):
    """
    Absorb one token into a memory state.

    Parameters
    ----------
    state : OrthoMemoryState
        the state to update in place
    x_t : numpy.ndarray
        token vector of length d

    Returns
    -------
    state : OrthoMemoryState
    """
    x_t = np.asarray(x_t).reshape(-1, 1)
    if x_t.shape[0] != state.basis.shape[1]:
        raise DimensionError(f"token of length {x_t.shape[0]} does not match {state.basis.shape}")
    state.running_sum += state.basis @ x_t
    state.count += 1
    return state


def state_update_block(state, x_block):
    """
    Absorb a block of tokens into a memory state, in row order.

    Parameters
    ----------
    state : OrthoMemoryState
        the state to update in place
    x_block : numpy.ndarray
        shape (k, d); k may be 0

    Returns
    -------
    state : OrthoMemoryState
    """
    if x_block.shape[0] == 0:
        return state
    if x_block.shape[1] != state.basis.shape[1]:
        raise DimensionError(f"block {x_block.shape} does not match basis {state.basis.shape}")
    state.running_sum += tc.matmul(state.basis, tc.transpose(x_block)).sum(axis=1, keepdims=True)
    state.count += x_block.shape[0]
    return state


def state_read(state):
    """
    Read the orthogonal memory of every token absorbed so far.

    Parameters
    ----------
    state : OrthoMemoryState

    Returns
    -------
    memory : numpy.ndarray or EMPTY
        shape (r, d), or EMPTY when no token has been absorbed
    """
    if state.count == 0:
        return EMPTY
    return tc.row_scale(state.basis, state.running_sum / state.count)


def attend_memory(q, mem, scale=None):
    """
    Attend from queries to an orthogonal memory.

    The memory rows serve as both keys and values.

    Parameters
    ----------
    q : numpy.ndarray
        queries, shape (k, d)
    mem : numpy.ndarray
        memory, shape (r, d); never EMPTY
    scale : float
        score multiplier. if None, use 1/sqrt(d)

    Returns
    -------
    out : numpy.ndarray
        shape (k, d)
    """
    if mem is EMPTY:
        raise ContractError("cannot attend to an empty memory")
    if scale is None:
        scale = 1.0 / math.sqrt(mem.shape[1])
    scores = tc.scale(tc.matmul(q, tc.transpose(mem)), scale)
    return tc.matmul(tc.softmax_rows(scores), mem)
