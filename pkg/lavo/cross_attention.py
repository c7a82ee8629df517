"""Attend from a target sequence to the compressed memory of a source."""

import math

from . import code_memory
from . import tensor_core as tc
from ._errors import ContractError
from ._errors import EmptyContextError
from .autodiff import Parameter
from .autodiff import Tape
from .lavo_layer import BASIS_SEED_OFFSET


class CrossParams:
    """
    Query projection, per-head bases, and the head recombination projection.

    Parameters
    ----------
    w_q : Parameter
        d_model-by-d_model query projection
    bases : list of OrthogonalBasis
        one r-by-d_head basis per head
    w_o : Parameter or None
        d_model-by-d_model recombination, present only with several heads
    """

    def __init__(self, w_q, bases, w_o=None):
        """Create parameter set."""
        self.w_q = w_q
        self.bases = list(bases)
        self.w_o = w_o

    def named_parameters(self, prefix=""):
        """Map dotted names to parameters."""
        named = {f"{prefix}w_q": self.w_q}
        if self.w_o is not None:
            named[f"{prefix}w_o"] = self.w_o
        for h, basis in enumerate(self.bases):
            named[f"{prefix}bases.{h}"] = basis
        return named

    def parameters(self):
        """List every parameter, trainable or not."""
        return list(self.named_parameters().values())


class CrossMemory:
    """
    Compressed source, one r-by-d_head memory per head.

    The memory is immutable once built and may be shared by any number of
    target decodes.
    """

    def __init__(self, heads, signature):
        """Create memory."""
        self.heads = list(heads)
        self.signature = signature


def _signature(config):
    return (config.heads, config.d_head, config.num_bases)


def init_cross_params(config, dtype=None):
    """
    Initialize cross-attention parameters from a layer configuration.

    Parameters
    ----------
    config : LavoConfig
        window and the local-attention toggles are ignored
    dtype : string or numpy.dtype
        if None, use settings.default_dtype

    Returns
    -------
    params : CrossParams
    """
    rng = tc.make_rng(config.seed)
    std = 1.0 / math.sqrt(config.d_model)
    d = config.d_model
    w_q = Parameter(tc.gaussian_matrix(rng, d, d, dtype) * std, name="w_q")
    w_o = None
    if config.heads > 1:
        w_o = Parameter(tc.gaussian_matrix(rng, d, d, dtype) * std, name="w_o")
    bases = [
        code_memory.make_basis(
            config.num_bases,
            config.d_head,
            tc.make_rng(config.seed + BASIS_SEED_OFFSET + h),
            frozen=not config.train_bases,
            name=f"bases.{h}",
        )
        for h in range(config.heads)
    ]
    return CrossParams(w_q, bases, w_o)


def encode_source(x, params, config, tape=None):
    """
    Compress each head's slice of the raw source once.

    Parameters
    ----------
    x : numpy.ndarray or Node
        source sequence, shape (n, d_model) with n >= 1
    params : CrossParams
    config : LavoConfig
    tape : Tape
        if given, the memory is recorded on it so gradients reach the source
        and trainable bases; pass the same tape to forward_cross

    Returns
    -------
    memory : CrossMemory
    """
    n = x.shape[0]
    if n == 0:
        raise EmptyContextError("cannot encode an empty source")

    heads = []
    for h, basis in enumerate(params.bases):
        lo, hi = h * config.d_head, (h + 1) * config.d_head
        if tape is None:
            value = x.value if hasattr(x, "value") else x
            heads.append(code_memory.compress(value[:, lo:hi], basis))
        else:
            b = tape.param(basis)
            proj = tape.matmul(tape.slice_cols(tape.lift(x), lo, hi), tape.transpose(b))
            heads.append(tape.row_scale(b, tape.transpose(tape.mean_rows(proj))))
    return CrossMemory(heads, _signature(config))


def forward_cross(y, memory, params, config, tape=None):
    """
    Attend from target queries to a compressed source.

    There is no local term and no position bias: every target row attends to
    the r memory rows of each head, so with a reused memory the cost is
    linear in the target length.

    Parameters
    ----------
    y : numpy.ndarray or Node
        target sequence, shape (m, d_model)
    memory : CrossMemory
        built by encode_source with a matching configuration
    params : CrossParams
    config : LavoConfig
    tape : Tape
        if None, compute without recording

    Returns
    -------
    out : Node
        shape (m, d_model)
    """
    if memory.signature != _signature(config):
        raise ContractError(
            f"memory built for (heads, d_head, r)={memory.signature}, "
            f"layer expects {_signature(config)}"
        )
    if tape is None:
        tape = Tape(record=False)

    q = tape.matmul(tape.lift(y), tape.param(params.w_q))
    outputs = []
    for h in range(config.heads):
        lo, hi = h * config.d_head, (h + 1) * config.d_head
        mem = tape.lift(memory.heads[h])
        scores = tape.matmul(tape.slice_cols(q, lo, hi), tape.transpose(mem))
        scores = tape.scale(scores, config.scale)
        outputs.append(tape.matmul(tape.softmax_rows(scores), mem))

    out = outputs[0] if len(outputs) == 1 else tape.concat_cols(outputs)
    if params.w_o is not None:
        out = tape.matmul(out, tape.param(params.w_o))
    return out


def cross_complexity_audit(config, n, m):
    """
    Count the multiply-adds of encoding an n-row source and attending from m rows.

    Parameters
    ----------
    config : LavoConfig
    n : int
        source length
    m : int
        target length

    Returns
    -------
    flops : int
    """
    r, d_head = config.num_bases, config.d_head
    encode = config.heads * 2 * n * r * d_head
    attend = 2 * m * config.d_model ** 2 + config.heads * 4 * m * r * d_head
    if config.heads > 1:
        attend += 2 * m * config.d_model ** 2
    return encode + attend
