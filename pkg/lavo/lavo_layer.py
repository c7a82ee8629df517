"""Multi-head linear attention over orthogonal memory with context dissection."""

import math
from dataclasses import asdict
from dataclasses import dataclass

import numpy as np

from . import code_memory
from . import tensor_core as tc
from ._errors import ContractError
from ._errors import EmptyContextError
from .autodiff import Parameter
from .autodiff import Tape

# per-head bases draw from seed + offset + head index
BASIS_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class LavoConfig:
    """
    Hyperparameters and toggles of one attention layer.

    Parameters
    ----------
    d_model : int
        model width, divisible by heads
    heads : int
        number of attention heads
    num_bases : int
        r, orthogonal basis rows per head, at most d_model / heads
    window : int
        w, the local window size
    use_epe : bool
        add the learned relative position bias inside local windows
    use_dissection : bool
        compress windowed local outputs (True) or the raw prefix (False)
    causal : bool
        restrict every position to its past
    use_scale : bool
        multiply attention scores by 1/sqrt(d_head)
    train_bases : bool
        if True, bases are trainable and may drift from orthonormality
    seed : int
        seed for parameter initialization
    """

    d_model: int = 64
    heads: int = 2
    num_bases: int = 16
    window: int = 16
    use_epe: bool = True
    use_dissection: bool = True
    causal: bool = True
    use_scale: bool = True
    train_bases: bool = False
    seed: int = 42

    def __post_init__(self):
        """Validate the configuration."""
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if not 1 <= self.num_bases <= self.d_head:
            raise ValueError(f"num_bases={self.num_bases} must lie in [1, {self.d_head}]")
        if self.window < 1:
            raise ValueError(f"window={self.window} must be at least 1")

    @property
    def d_head(self):
        """Get the width of one head."""
        return self.d_model // self.heads

    @property
    def scale(self):
        """Get the attention score multiplier."""
        return 1.0 / math.sqrt(self.d_head) if self.use_scale else 1.0

    def to_dict(self):
        """Convert the configuration to a plain dict."""
        return asdict(self)


class LavoParams:
    """
    Learnable projections, per-head bases and per-head position tables.

    Parameters
    ----------
    w_q, w_k, w_v, w_o : Parameter
        d_model-by-d_model projections
    bases : list of OrthogonalBasis
        one r-by-d_head basis per head
    pos : list of Parameter
        one 1-by-(2w-1) relative position table per head
    """

    def __init__(self, w_q, w_k, w_v, w_o, bases, pos):
        """Create parameter set."""
        self.w_q = w_q
        self.w_k = w_k
        self.w_v = w_v
        self.w_o = w_o
        self.bases = list(bases)
        self.pos = list(pos)

    def named_parameters(self, prefix=""):
        """
        Map dotted names to parameters.

        Parameters
        ----------
        prefix : string
            prepended to every name

        Returns
        -------
        named : dict
        """
        named = {
            f"{prefix}w_q": self.w_q,
            f"{prefix}w_k": self.w_k,
            f"{prefix}w_v": self.w_v,
            f"{prefix}w_o": self.w_o,
        }
        for h, (basis, table) in enumerate(zip(self.bases, self.pos)):
            named[f"{prefix}bases.{h}"] = basis
            named[f"{prefix}pos.{h}"] = table
        return named

    def parameters(self):
        """List every parameter, trainable or not."""
        return list(self.named_parameters().values())


def init_params(config, dtype=None):
    """
    Initialize the parameters of a layer from its seed.

    Projections are Gaussian with standard deviation 1/sqrt(d_model), bases
    are orthogonal, and position tables start at zero.

    Parameters
    ----------
    config : LavoConfig
        layer configuration
    dtype : string or numpy.dtype
        if None, use settings.default_dtype

    Returns
    -------
    params : LavoParams
    """
    rng = tc.make_rng(config.seed)
    std = 1.0 / math.sqrt(config.d_model)
    d = config.d_model
    w_q, w_k, w_v, w_o = (
        Parameter(tc.gaussian_matrix(rng, d, d, dtype) * std, name=name)
        for name in ("w_q", "w_k", "w_v", "w_o")
    )

    bases = []
    pos = []
    for h in range(config.heads):
        basis_rng = tc.make_rng(config.seed + BASIS_SEED_OFFSET + h)
        basis = code_memory.make_basis(
            config.num_bases,
            config.d_head,
            basis_rng,
            frozen=not config.train_bases,
            name=f"bases.{h}",
        )
        if dtype is not None:
            basis.value = basis.value.astype(dtype)
        bases.append(basis)
        table = np.zeros((1, 2 * config.window - 1), dtype=w_q.value.dtype)
        pos.append(Parameter(table, name=f"pos.{h}"))

    return LavoParams(w_q, w_k, w_v, w_o, bases, pos)


def cast_params(params, dtype):
    """
    Copy a parameter set with every value cast to dtype.

    Parameters
    ----------
    params : LavoParams
    dtype : string or numpy.dtype

    Returns
    -------
    params : LavoParams
    """

    def cast(p):
        if isinstance(p, code_memory.OrthogonalBasis):
            return code_memory.OrthogonalBasis(p.value.astype(dtype), p.frozen, p.name)
        return Parameter(p.value.astype(dtype), p.trainable, p.name)

    return LavoParams(
        cast(params.w_q),
        cast(params.w_k),
        cast(params.w_v),
        cast(params.w_o),
        [cast(b) for b in params.bases],
        [cast(p) for p in params.pos],
    )


def memory_ends(n, config):
    """
    Get, per query, the exclusive end of the prefix its memory compresses.

    With dissection, a causal query in window b sees the windows before it,
    so its memory covers [0, b*w). Without dissection, a causal query sees
    its whole prefix including itself. Noncausal queries see everything.

    Parameters
    ----------
    n : int
        sequence length
    config : LavoConfig

    Returns
    -------
    ends : numpy.ndarray of int
        shape (n,); an end of 0 marks an EMPTY memory
    """
    positions = np.arange(n)
    if not config.causal:
        return np.full(n, n, dtype=np.int64)
    if config.use_dissection:
        return (positions // config.window) * config.window
    return positions + 1


def local_attention(q, k, v, pos, config, tape=None):
    """
    Attend from every query to its window-local neighbourhood.

    Each window is extended by the w tokens before its first position and
    masked so every causal query sees exactly the w most recent positions
    (fewer at the start of the sequence). Noncausal queries additionally see
    later positions of their own window (or up to w-1 ahead without
    dissection). With use_epe, the score of query i and key j receives
    pos[j - i + w - 1].

    Parameters
    ----------
    q, k, v : Node or numpy.ndarray
        per-head queries, keys and values, shape (n, d_head)
    pos : Parameter or Node
        relative position table, shape (1, 2w-1)
    config : LavoConfig
    tape : Tape
        if None, compute without recording

    Returns
    -------
    out : Node
        shape (n, d_head)
    """
    if tape is None:
        tape = Tape(record=False)
    q, k, v = tape.lift(q), tape.lift(k), tape.lift(v)
    n = q.shape[0]
    w = config.window
    width = tc.band_width(w, config.causal)

    scores = tape.scale(tape.band_scores(q, k, w, config.causal), config.scale)
    bias = None
    if config.use_epe:
        pos = tape.lift(pos)
        if pos.shape != (1, 2 * w - 1):
            raise ContractError(f"position table {pos.shape} does not index offsets of w={w}")
        # causal bands only ever read indices [0, w-1]
        bias = tape.broadcast_rows(tape.slice_cols(pos, 0, width), n)
    mask = tc.band_mask(n, w, config.causal, config.use_dissection)
    weights = tape.softmax_rows(scores, bias, mask)
    return tape.band_combine(weights, v, w, config.causal)


def _memory_attention(tape, q, source, basis, ends, config):
    # row i attends to B ⊙ H_i with H_i the prefix mean of B·source over
    # [0, ends[i]); q·(h_k b_k) = h_k (q·b_k) and Σ a_k h_k b_k = (a ⊙ h) B
    basis_t = tape.transpose(basis)
    means = tape.prefix_mean(tape.matmul(source, basis_t), ends)
    scores = tape.scale(tape.mul(tape.matmul(q, basis_t), means), config.scale)
    weights = tape.softmax_rows(scores)
    return tape.matmul(tape.mul(weights, means), basis)


def forward(x, params, config, tape=None):
    """
    Run the attention layer over a whole sequence.

    Per head, local attention gives F_local; the local outputs of the
    windows a query may see (or the raw prefix, without dissection) are
    compressed into an orthogonal memory that gives F_global; the two are
    averaged, or F_local is used alone where the memory is EMPTY. Heads are
    concatenated and projected by W_o.

    Parameters
    ----------
    x : numpy.ndarray or Node
        input sequence, shape (n, d_model) with n >= 1
    params : LavoParams
    config : LavoConfig
    tape : Tape
        if None, compute without recording

    Returns
    -------
    out : Node
        shape (n, d_model); read the array from out.value
    """
    if tape is None:
        tape = Tape(record=False)
    x = tape.lift(x)
    n = x.shape[0]
    if n == 0:
        raise EmptyContextError("cannot run attention over an empty sequence")

    q = tape.matmul(x, tape.param(params.w_q))
    k = tape.matmul(x, tape.param(params.w_k))
    v = tape.matmul(x, tape.param(params.w_v))

    ends = memory_ends(n, config)
    has_memory = (ends > 0).astype(q.value.dtype)[:, None]
    local_weight = tape.const(1.0 - 0.5 * has_memory)
    global_weight = tape.const(0.5 * has_memory)

    fused = []
    for h in range(config.heads):
        lo, hi = h * config.d_head, (h + 1) * config.d_head
        q_h = tape.slice_cols(q, lo, hi)
        f_local = local_attention(
            q_h,
            tape.slice_cols(k, lo, hi),
            tape.slice_cols(v, lo, hi),
            params.pos[h],
            config,
            tape,
        )
        source = f_local if config.use_dissection else tape.slice_cols(x, lo, hi)
        basis = tape.param(params.bases[h])
        f_global = _memory_attention(tape, q_h, source, basis, ends, config)
        fused.append(
            tape.add(
                tape.row_scale(f_local, local_weight), tape.row_scale(f_global, global_weight)
            )
        )

    return tape.matmul(tape.concat_cols(fused), tape.param(params.w_o))


class _HeadCache:
    """Ring buffers and orthogonal memory of one head."""

    def __init__(self, basis, w, d_head, dtype):
        self.keys = np.zeros((w, d_head), dtype=dtype)
        self.values = np.zeros((w, d_head), dtype=dtype)
        self.pending = np.zeros((w, d_head), dtype=dtype)
        self.pending_count = 0
        self.memory = code_memory.OrthoMemoryState(basis, dtype=dtype)

    def to_bytes(self):
        return b"".join(
            [
                self.keys.tobytes(),
                self.values.tobytes(),
                self.pending.tobytes(),
                np.array([self.pending_count], dtype="<u8").tobytes(),
                self.memory.to_bytes(),
            ]
        )


class CausalCache:
    """
    Per-sequence state for incremental causal decoding.

    Every head keeps its orthogonal memory, the keys and values of the last
    w positions, and the local outputs of the current window awaiting
    compression. Buffers are preallocated, so the footprint does not change
    with the number of steps.

    Parameters
    ----------
    params : LavoParams
    config : LavoConfig
        must be causal
    """

    def __init__(self, params, config):
        """Create an empty cache."""
        if not config.causal:
            raise ContractError("incremental decoding requires a causal configuration")
        self.params = params
        self.config = config
        self.position = 0
        dtype = params.w_q.value.dtype
        self.heads = [
            _HeadCache(basis, config.window, config.d_head, dtype) for basis in params.bases
        ]

    def to_bytes(self):
        """Serialize the decoding state."""
        header = np.array([self.position], dtype="<u8").tobytes()
        return header + b"".join(head.to_bytes() for head in self.heads)


def step(cache, x_t):
    """
    Decode one position with constant work per head.

    Produces the same output as forward on the whole prefix, at the newest
    position. When a window completes, its pending local outputs are
    flushed into the orthogonal memory.

    Parameters
    ----------
    cache : CausalCache
        state built from the same parameters and configuration
    x_t : numpy.ndarray
        input vector of length d_model

    Returns
    -------
    out : numpy.ndarray
        output vector of length d_model
    """
    params, config = cache.params, cache.config
    w = config.window
    x = np.asarray(x_t, dtype=params.w_q.value.dtype).reshape(1, -1)
    q = tc.matmul(x, params.w_q.value)
    k = tc.matmul(x, params.w_k.value)
    v = tc.matmul(x, params.w_v.value)

    t = cache.position
    slot = t % w
    filled = min(t + 1, w)
    # absolute position held by each filled ring slot
    positions = t - ((t - np.arange(filled)) % w)

    fused = []
    for h, head in enumerate(cache.heads):
        lo, hi = h * config.d_head, (h + 1) * config.d_head
        q_h = q[:, lo:hi]
        head.keys[slot] = k[0, lo:hi]
        head.values[slot] = v[0, lo:hi]

        scores = tc.scale(tc.matmul(q_h, tc.transpose(head.keys[:filled])), config.scale)
        bias = None
        if config.use_epe:
            bias = params.pos[h].value[:, positions - t + w - 1]
        weights = tc.softmax_rows(scores, bias)
        f_local = tc.matmul(weights, head.values[:filled])

        if config.use_dissection:
            memory = code_memory.state_read(head.memory)
            head.pending[head.pending_count] = f_local[0]
            head.pending_count += 1
            if (t + 1) % w == 0:
                code_memory.state_update_block(head.memory, head.pending[: head.pending_count])
                head.pending_count = 0
        else:
            code_memory.state_update(head.memory, x[0, lo:hi])
            memory = code_memory.state_read(head.memory)

        if memory is code_memory.EMPTY:
            fused.append(f_local)
        else:
            f_global = code_memory.attend_memory(q_h, memory, config.scale)
            fused.append(0.5 * f_local + 0.5 * f_global)

    cache.position += 1
    return tc.matmul(tc.concat_cols(fused), params.w_o.value)[0]


def complexity_audit(config, n, num_bases=None, window=None):
    """
    Count the multiply-adds of one forward pass in closed form.

    Projections cost 8 n d_model^2; each head adds 4 n L d_head for local
    attention over L band offsets (w causal, 2w-1 otherwise) and 6 n r d_head
    for compressing into and attending over the memory.

    Parameters
    ----------
    config : LavoConfig
    n : int
        sequence length
    num_bases : int
        if not None, override config.num_bases (0 drops the memory term)
    window : int
        if not None, override config.window

    Returns
    -------
    flops : int
    """
    r = config.num_bases if num_bases is None else num_bases
    w = config.window if window is None else window
    width = tc.band_width(w, config.causal)
    projections = 8 * n * config.d_model ** 2
    per_head = 4 * n * width * config.d_head + 6 * n * r * config.d_head
    return projections + config.heads * per_head
