"""Slow, direct reference computations for checking the attention layer."""

import numpy as np

from . import tensor_core as tc
from ._errors import ContractError
from ._errors import DimensionError
from ._errors import EmptyContextError


def vanilla_attention(q, k, v, causal=True, scale=1.0):
    """
    Compute exact quadratic softmax attention.

    Parameters
    ----------
    q : numpy.ndarray
        queries, shape (n, d)
    k : numpy.ndarray
        keys, shape (m, d)
    v : numpy.ndarray
        values, shape (m, dv)
    causal : bool
        if True, query i sees keys 0..i only (requires n == m)
    scale : float
        score multiplier

    Returns
    -------
    out : numpy.ndarray
        shape (n, dv)
    """
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"keys {k.shape} and values {v.shape} differ in length")
    if causal and q.shape[0] != k.shape[0]:
        raise DimensionError(f"causal attention needs as many queries {q.shape} as keys {k.shape}")

    scores = tc.scale(tc.matmul(q, tc.transpose(k)), scale)
    mask = None
    if causal:
        mask = np.triu(np.ones(scores.shape, dtype=bool), k=1)
    return tc.matmul(tc.softmax_rows(scores, mask=mask), v)


def _project(x, params):
    return (
        tc.matmul(x, params.w_q.value),
        tc.matmul(x, params.w_k.value),
        tc.matmul(x, params.w_v.value),
    )


def _local_rows(q, k, v, pos, config):
    # dense attention of each window against itself and the w positions
    # before it, masked to the offsets a query may see
    n = q.shape[0]
    w = config.window
    out = np.zeros(v.shape, dtype=v.dtype)
    for start in range(0, n, w):
        stop = min(start + w, n)
        k_lo = max(0, start - w)
        k_hi = stop
        if not config.causal and not config.use_dissection:
            k_hi = min(n, stop + w - 1)

        offsets = np.arange(k_lo, k_hi)[None, :] - np.arange(start, stop)[:, None]
        if config.causal:
            visible = (offsets > -w) & (offsets <= 0)
        else:
            visible = (offsets > -w) & (offsets < w)

        scores = tc.scale(tc.matmul(q[start:stop], tc.transpose(k[k_lo:k_hi])), config.scale)
        bias = None
        if config.use_epe:
            table = pos.value[0]
            bias = table[np.clip(offsets + w - 1, 0, 2 * w - 2)]
        weights = tc.softmax_rows(scores, bias, ~visible)
        out[start:stop] = tc.matmul(weights, v[k_lo:k_hi])
    return out


def _check_input(x):
    if x.shape[0] == 0:
        raise EmptyContextError("cannot run attention over an empty sequence")


def local_only(x, params, config):
    """
    Compute the local branch of the layer alone, with the output projection.

    Each window is evaluated as one dense block against its lookback
    extension, independently of the banded evaluation the layer uses.

    Parameters
    ----------
    x : numpy.ndarray
        input sequence, shape (n, d_model)
    params : LavoParams
    config : LavoConfig

    Returns
    -------
    out : numpy.ndarray
        shape (n, d_model)
    """
    _check_input(x)
    q, k, v = _project(x, params)
    heads = []
    for h in range(config.heads):
        cols = slice(h * config.d_head, (h + 1) * config.d_head)
        heads.append(_local_rows(q[:, cols], k[:, cols], v[:, cols], params.pos[h], config))
    return tc.matmul(tc.concat_cols(heads), params.w_o.value)


def vanilla_layer(x, params, config):
    """
    Replace the layer's attention with exact quadratic attention.

    Projections and the output projection are shared with the layer; each
    head runs vanilla_attention with the layer's causality and scaling.

    Parameters
    ----------
    x : numpy.ndarray
        input sequence, shape (n, d_model)
    params : LavoParams
    config : LavoConfig

    Returns
    -------
    out : numpy.ndarray
        shape (n, d_model)
    """
    _check_input(x)
    q, k, v = _project(x, params)
    heads = []
    for h in range(config.heads):
        cols = slice(h * config.d_head, (h + 1) * config.d_head)
        heads.append(
            vanilla_attention(q[:, cols], k[:, cols], v[:, cols], config.causal, config.scale)
        )
    return tc.matmul(tc.concat_cols(heads), params.w_o.value)


def _memory_branch(q_rows, context, basis, config):
    # rebuild B ⊙ H from the context rows, then attend to it
    h_mean = tc.transpose(tc.mean_rows(tc.matmul(context, tc.transpose(basis))))
    memory = tc.row_scale(basis, h_mean)
    scores = tc.scale(tc.matmul(q_rows, tc.transpose(memory)), config.scale)
    return tc.matmul(tc.softmax_rows(scores), memory)


def _head_locals(q, k, v, params, config):
    per_head = []
    for h in range(config.heads):
        cols = slice(h * config.d_head, (h + 1) * config.d_head)
        local = _local_rows(q[:, cols], k[:, cols], v[:, cols], params.pos[h], config)
        per_head.append((cols, local, params.bases[h].value))
    return per_head


def naive_causal_lavo(x, params, config):
    """
    Compute the causal layer by recompressing the visible context at every step.

    For every position t the orthogonal memory is rebuilt from scratch out
    of everything t may see, the way a linear mechanism that cannot update
    its memory recurrently must re-encode its context per query. This costs
    O(n^2) and shares no code path with lavo_layer.

    Parameters
    ----------
    x : numpy.ndarray
        input sequence, shape (n, d_model)
    params : LavoParams
    config : LavoConfig
        must be causal

    Returns
    -------
    out : numpy.ndarray
        shape (n, d_model)
    """
    if not config.causal:
        raise ContractError("the per-step oracle only covers causal attention")
    _check_input(x)
    n, w = x.shape[0], config.window
    q, k, v = _project(x, params)
    per_head = _head_locals(q, k, v, params, config)

    out = np.zeros((n, config.d_model), dtype=np.result_type(x, params.w_o.value))
    for t in range(n):
        heads = []
        for cols, local, basis in per_head:
            if config.use_dissection:
                context = local[: (t // w) * w]
            else:
                context = x[: t + 1, cols]
            f_local = local[t : t + 1]
            if context.shape[0] == 0:
                heads.append(f_local)
                continue
            f_global = _memory_branch(q[t : t + 1, cols], context, basis, config)
            heads.append(0.5 * f_local + 0.5 * f_global)
        out[t] = tc.matmul(tc.concat_cols(heads), params.w_o.value)[0]
    return out


def naive_noncausal_lavo(x, params, config):
    """
    Compute the noncausal layer from one memory over the whole sequence.

    Every query attends to the same memory, compressed from all local
    outputs (or all raw rows, without dissection), and averages it with its
    dense local attention.

    Parameters
    ----------
    x : numpy.ndarray
        input sequence, shape (n, d_model)
    params : LavoParams
    config : LavoConfig
        must be noncausal

    Returns
    -------
    out : numpy.ndarray
        shape (n, d_model)
    """
    if config.causal:
        raise ContractError("the whole-sequence oracle only covers noncausal attention")
    _check_input(x)
    q, k, v = _project(x, params)

    heads = []
    for cols, local, basis in _head_locals(q, k, v, params, config):
        context = local if config.use_dissection else x[:, cols]
        f_global = _memory_branch(q[:, cols], context, basis, config)
        heads.append(0.5 * local + 0.5 * f_global)
    return tc.matmul(tc.concat_cols(heads), params.w_o.value)
