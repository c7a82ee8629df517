"""Record operations on a tape and differentiate them in reverse mode."""

import numpy as np

from . import tensor_core as tc
from ._errors import ContractError


class Parameter:
    """
    A named matrix with a gradient accumulator and Adam moments.

    Parameters
    ----------
    value : numpy.ndarray
        the parameter matrix
    trainable : bool
        if False, the parameter enters tapes as a constant and never
        receives a gradient
    name : string
        label used in checkpoints and diagnostics
    """

    def __init__(self, value, trainable=True, name=None):
        """Create parameter."""
        self.value = tc.as_tensor(value, dtype=np.asarray(value).dtype)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable
        self.name = name
        self.adam_m = None
        self.adam_v = None
        self.adam_t = 0

    @property
    def shape(self):
        """Get the shape of the parameter matrix."""
        return self.value.shape

    def __repr__(self):
        """Describe the parameter."""
        return f"Parameter(name={self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Node:
    """
    One value on a tape.

    Parameters
    ----------
    value : numpy.ndarray
        forward value
    parents : tuple of Node
        inputs the value was computed from
    backward_fn : callable
        maps the gradient of this node to a tuple of parent gradients
    requires_grad : bool
        if True, backward reaches this node
    """

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "grad", "param")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        """Create node."""
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.grad = None
        self.param = None

    @property
    def shape(self):
        """Get the shape of the node value."""
        return self.value.shape


class Tape:
    """
    Define-by-run record of differentiable operations.

    Every operation method computes its value with tensor_core. When the tape
    is recording and at least one input requires a gradient, the node and
    its backward rule are appended, so parents always precede children. An
    unrecorded tape runs the same code at plain numpy cost.

    Parameters
    ----------
    record : bool
        if False, nothing is recorded and backward is unavailable
    """

    def __init__(self, record=True):
        """Create tape."""
        self.record = record
        self.nodes = []
        self.leaves = {}

    def _push(self, value, parents, backward_fn):
        if self.record and any(p.requires_grad for p in parents):
            node = Node(value, parents, backward_fn, requires_grad=True)
            self.nodes.append(node)
            return node
        return Node(value)

    def const(self, value):
        """Wrap an array as a constant node."""
        return Node(value)

    def param(self, p):
        """
        Wrap a Parameter as a leaf node.

        Frozen parameters, and every parameter on an unrecorded tape, enter
        as constants. A parameter wrapped twice maps to the same leaf.
        """
        if not (self.record and p.trainable):
            return Node(p.value)
        if id(p) not in self.leaves:
            leaf = Node(p.value, requires_grad=True)
            leaf.param = p
            self.leaves[id(p)] = leaf
        return self.leaves[id(p)]

    def lift(self, x):
        """Return x as a node, wrapping parameters and arrays as needed."""
        if isinstance(x, Node):
            return x
        if isinstance(x, Parameter):
            return self.param(x)
        return self.const(np.asarray(x))

    def matmul(self, a, b):
        """Record a matrix product."""
        return self._push(
            tc.matmul(a.value, b.value), (a, b), lambda g: (g @ b.value.T, a.value.T @ g)
        )

    def transpose(self, a):
        """Record a transpose."""
        return self._push(tc.transpose(a.value), (a,), lambda g: (g.T,))

    def add(self, a, b):
        """Record an elementwise sum."""
        return self._push(tc.add(a.value, b.value), (a, b), lambda g: (g, g))

    def mul(self, a, b):
        """Record an elementwise product."""
        return self._push(
            tc.mul(a.value, b.value), (a, b), lambda g: (g * b.value, g * a.value)
        )

    def scale(self, a, c):
        """Record multiplication by a constant scalar."""
        return self._push(tc.scale(a.value, c), (a,), lambda g: (g * c,))

    def row_scale(self, b, h):
        """Record scaling the rows of b by the column h."""

        def backward(g):
            return g * h.value, (g * b.value).sum(axis=1, keepdims=True)

        return self._push(tc.row_scale(b.value, h.value), (b, h), backward)

    def add_row(self, x, b):
        """Record adding the 1-by-d row b to every row of x."""
        if b.shape != (1, x.shape[1]):
            raise ContractError(f"cannot broadcast {b.shape} over rows of {x.shape}")
        return self._push(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)))

    def broadcast_rows(self, p, n):
        """Record repeating the 1-by-m row p n times."""
        value = np.repeat(p.value, n, axis=0)
        return self._push(value, (p,), lambda g: (g.sum(axis=0, keepdims=True),))

    def slice_cols(self, x, start, stop):
        """Record taking columns [start, stop)."""

        def backward(g):
            full = np.zeros_like(x.value)
            full[:, start:stop] = g
            return (full,)

        return self._push(tc.slice_cols(x.value, start, stop), (x,), backward)

    def concat_cols(self, blocks):
        """Record side-by-side concatenation."""
        edges = np.cumsum([0] + [b.shape[1] for b in blocks])

        def backward(g):
            return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(blocks)))

        return self._push(tc.concat_cols([b.value for b in blocks]), tuple(blocks), backward)

    def sum(self, x):
        """Record the sum of all entries as a 1-by-1 node."""
        value = np.array([[x.value.sum()]], dtype=x.value.dtype)
        return self._push(value, (x,), lambda g: (np.full_like(x.value, g[0, 0]),))

    def mean_rows(self, x):
        """Record the average of the rows."""
        n = x.shape[0]
        return self._push(
            tc.mean_rows(x.value), (x,), lambda g: (np.repeat(g / n, n, axis=0),)
        )

    def gather_rows(self, table, ids):
        """Record selecting rows of a table by id."""
        ids = np.asarray(ids, dtype=np.int64).ravel()

        def backward(g):
            full = np.zeros_like(table.value)
            np.add.at(full, ids, g)
            return (full,)

        return self._push(tc.gather_rows(table.value, ids), (table,), backward)

    def softmax_rows(self, scores, bias=None, mask=None):
        """
        Record a row softmax with optional additive bias and hidden mask.

        The backward rule uses g = s ⊙ (ĝ - <ĝ, s>) per row instead of a
        materialized Jacobian.
        """
        probs = tc.softmax_rows(scores.value, None if bias is None else bias.value, mask)

        def backward(g):
            gs = probs * (g - (g * probs).sum(axis=1, keepdims=True))
            return (gs,) if bias is None else (gs, gs)

        parents = (scores,) if bias is None else (scores, bias)
        return self._push(probs, parents, backward)

    def band_scores(self, q, k, w, causal=True):
        """Record banded query-key dot products, see tensor_core.band_scores."""

        def backward(g):
            return (
                tc.band_combine(g, k.value, w, causal),
                tc.band_scatter(g, q.value, w, causal),
            )

        return self._push(tc.band_scores(q.value, k.value, w, causal), (q, k), backward)

    def band_combine(self, a, v, w, causal=True):
        """Record banded mixing of value rows, see tensor_core.band_combine."""

        def backward(g):
            return (
                tc.band_scores(g, v.value, w, causal),
                tc.band_scatter(a.value, g, w, causal),
            )

        return self._push(tc.band_combine(a.value, v.value, w, causal), (a, v), backward)

    def prefix_mean(self, x, ends):
        """Record per-row prefix means, see tensor_core.prefix_mean."""
        ends = np.asarray(ends, dtype=np.int64)

        def backward(g):
            # output row i spreads g[i] / ends[i] over source rows [0, ends[i])
            weights = np.zeros((x.shape[0] + 1, x.shape[1]), dtype=g.dtype)
            live = ends > 0
            np.add.at(weights, ends[live], g[live] / ends[live][:, None])
            tail = np.cumsum(weights[::-1], axis=0)[::-1]
            return (tail[1:],)

        return self._push(tc.prefix_mean(x.value, ends), (x,), backward)

    def layer_norm(self, x, gain, bias, eps=1e-5):
        """Record row-wise layer normalization with gain and bias rows."""
        mu = x.value.mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(x.value.var(axis=1, keepdims=True) + eps)
        xhat = (x.value - mu) * inv
        d = x.shape[1]

        def backward(g):
            dxhat = g * gain.value
            dx = (inv / d) * (
                d * dxhat
                - dxhat.sum(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
            )
            return (
                dx,
                (g * xhat).sum(axis=0, keepdims=True),
                g.sum(axis=0, keepdims=True),
            )

        return self._push(xhat * gain.value + bias.value, (x, gain, bias), backward)

    def gelu(self, x):
        """Record the gelu nonlinearity."""
        return self._push(tc.gelu(x.value), (x,), lambda g: (g * tc.gelu_grad(x.value),))

    def cross_entropy_rows(self, logits, targets):
        """
        Record the mean next-token cross-entropy of logit rows.

        Parameters
        ----------
        logits : Node
            shape (n, vocab)
        targets : array-like of int
            one target id per row

        Returns
        -------
        loss : Node
            shape (1, 1)
        """
        targets = np.asarray(targets, dtype=np.int64).ravel()
        n = logits.shape[0]
        if len(targets) != n:
            raise ContractError(f"{len(targets)} targets for {n} logit rows")
        log_probs = tc.log_softmax_rows(logits.value)
        value = np.array([[-log_probs[np.arange(n), targets].mean()]], dtype=log_probs.dtype)

        def backward(g):
            d = np.exp(log_probs)
            d[np.arange(n), targets] -= 1.0
            return (d * (g[0, 0] / n),)

        return self._push(value, (logits,), backward)


def detach(node):
    """Return a constant node holding the value of node (stop-gradient)."""
    return Node(node.value)


def zero_grad(params):
    """
    Reset the gradient accumulators of parameters to zero.

    Parameters
    ----------
    params : list of Parameter

    Returns
    -------
    None
    """
    for p in params:
        p.grad = np.zeros_like(p.value)


def backward(tape, loss):
    """
    Accumulate the gradient of a scalar loss into every trainable parameter.

    Parameters
    ----------
    tape : Tape
        the recording tape loss was computed on
    loss : Node
        1-by-1 node

    Returns
    -------
    grads : dict
        maps each reached Parameter to its accumulated gradient
    """
    if loss.value.shape != (1, 1):
        raise ContractError(f"loss must be 1x1, got {loss.value.shape}")
    if not tape.record:
        raise ContractError("cannot differentiate an unrecorded tape")
    if not loss.requires_grad:
        return {}

    for node in tape.nodes:
        node.grad = None
    for leaf in tape.leaves.values():
        leaf.grad = None

    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if parent.requires_grad:
                parent.grad = g if parent.grad is None else parent.grad + g

    grads = {}
    for leaf in tape.leaves.values():
        if leaf.grad is not None:
            leaf.param.grad = leaf.param.grad + leaf.grad
            grads[leaf.param] = leaf.param.grad
    return grads


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    Apply one Adam update with bias correction to every trainable parameter.

    Moments live on the parameters and persist between calls.

    Parameters
    ----------
    params : list of Parameter
        parameters with populated gradients
    lr : float
        learning rate
    beta1 : float
        first-moment decay
    beta2 : float
        second-moment decay
    eps : float
        denominator floor

    Returns
    -------
    params : list of Parameter
        the same parameters, updated
    """
    for p in params:
        if not p.trainable:
            continue
        if p.adam_m is None:
            p.adam_m = np.zeros_like(p.value)
            p.adam_v = np.zeros_like(p.value)
        p.adam_t += 1
        p.adam_m = beta1 * p.adam_m + (1 - beta1) * p.grad
        p.adam_v = beta2 * p.adam_v + (1 - beta2) * p.grad ** 2
        m_hat = p.adam_m / (1 - beta1 ** p.adam_t)
        v_hat = p.adam_v / (1 - beta2 ** p.adam_t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def check_gradients(loss_fn, params, h=1e-5):
    """
    Compare reverse-mode gradients with central finite differences.

    Parameters
    ----------
    loss_fn : callable
        maps a Tape to a 1-by-1 loss Node; must be deterministic
    params : list of Parameter
        trainable parameters to check
    h : float
        finite-difference step

    Returns
    -------
    errors : dict
        maps parameter name (or index) to the relative error
        ||analytic - numeric|| / max(||analytic||, ||numeric||)
    """
    zero_grad(params)
    tape = Tape()
    backward(tape, loss_fn(tape))

    errors = {}
    for index, p in enumerate(params):
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.value)
        original = p.value
        for idx in np.ndindex(*original.shape):
            plus = original.copy()
            plus[idx] += h
            p.value = plus
            f_plus = loss_fn(Tape(record=False)).value[0, 0]
            minus = original.copy()
            minus[idx] -= h
            p.value = minus
            f_minus = loss_fn(Tape(record=False)).value[0, 0]
            numeric[idx] = (f_plus - f_minus) / (2 * h)
        p.value = original

        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        errors[p.name if p.name is not None else index] = np.linalg.norm(analytic - numeric) / denom
    return errors
