"""Unit tests for the package."""

# use agg backend so you don't need a display on ci
# do this first before pyplot is imported by anything
import matplotlib as mpl

mpl.use("Agg")

import logging as lg
import math
import os
import shutil
import struct

import numpy as np
import pandas as pd
import pytest

import lavo
from lavo import bench
from lavo import cross_attention
from lavo import io
from lavo import lavo_layer
from lavo import lm_demo
from lavo import oracles
from lavo import tensor_core as tc
from lavo._errors import CheckpointFormatError
from lavo._errors import ContractError
from lavo._errors import CorruptCheckpointError
from lavo._errors import DataError
from lavo._errors import DegenerateRowError
from lavo._errors import DimensionError
from lavo._errors import EmptyContextError
from lavo._errors import InfeasibleBasisError
from lavo._errors import InsufficientDataError
from lavo._errors import NonFiniteLossError
from lavo._errors import UnsupportedVersionError
from lavo.autodiff import Parameter
from lavo.autodiff import Tape
from lavo.code_memory import OrthogonalBasis
from lavo.lavo_layer import LavoConfig
from lavo.lm_demo import LmConfig

# remove the .temp folder and .coverage file if they already
# exist so we start fresh with these tests
if os.path.exists(".temp"):
    shutil.rmtree(".temp")
if os.path.exists(".coverage"):
    os.remove(".coverage")


def _configure():
    lavo.config(
        log_console=True,
        log_file=True,
        data_folder=".temp/data",
        logs_folder=".temp/logs",
        imgs_folder=".temp/imgs",
    )


_configure()

# a small repetitive text corpus shared by the language model tests
corpus_text = (
    b"the quick brown fox jumps over the lazy dog. "
    b"a stitch in time saves nine. "
    b"all that glitters is not gold. "
) * 60

small_lm = dict(
    d_model=16, n_layers=1, heads=2, num_bases=4, window=4, ctx_len=32, batch=2, seed=3
)


def _random_layer(rng, **kwargs):
    heads = int(rng.integers(1, 3))
    d_head = int(rng.integers(2, 7))
    settings = dict(
        d_model=heads * d_head,
        heads=heads,
        num_bases=int(rng.integers(1, d_head + 1)),
        window=int(rng.integers(1, 6)),
        use_epe=bool(rng.integers(0, 2)),
        use_dissection=bool(rng.integers(0, 2)),
        seed=int(rng.integers(0, 2 ** 31)),
    )
    settings.update(kwargs)
    config = LavoConfig(**settings)
    params = lavo_layer.init_params(config)
    for table in params.pos:
        table.value = tc.gaussian_matrix(rng, 1, table.shape[1])
    return config, params


def test_logging():
    # test the logger
    lavo.log("test a fake debug", level=lg.DEBUG)
    lavo.log("test a fake info", level=lg.INFO)
    lavo.log("test a fake warning", level=lg.WARNING)
    lavo.log("test a fake error", level=lg.ERROR)

    lavo.ts(style="date")
    lavo.ts(style="time")
    with pytest.raises(ValueError):
        lavo.ts(style="xyz")


def test_tensor_core():
    rng = tc.make_rng(0)

    a = tc.as_tensor([[1, 2], [3, 4]])
    assert a.dtype == np.float64
    assert np.array_equal(tc.matmul(a, tc.as_tensor([[5], [6]])), [[17.0], [39.0]])
    with pytest.raises(DimensionError):
        tc.matmul(a, tc.as_tensor([[1, 2, 3]]))
    with pytest.raises(DimensionError):
        tc.add(a, tc.as_tensor([[1, 2, 3]]))
    with pytest.raises(EmptyContextError):
        tc.mean_rows(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        tc.check_finite(np.array([[1.0, np.nan]]))

    # softmax rows sum to one, ignore hidden entries and survive large scores
    probs = tc.softmax_rows(tc.as_tensor([[1000.0, 1000.0], [0.0, math.log(3.0)]]))
    assert np.allclose(probs, [[0.5, 0.5], [0.25, 0.75]])
    mask = np.array([[False, True], [False, False]])
    masked = tc.softmax_rows(tc.as_tensor([[1.0, 9.0], [0.0, 0.0]]), mask=mask)
    assert np.array_equal(masked[0], [1, 0])
    with pytest.raises(DegenerateRowError):
        tc.softmax_rows(np.zeros((2, 2)), mask=np.array([[True, True], [False, True]]))

    # softmax ignores a constant shift and its rows sum to one
    scores = tc.gaussian_matrix(rng, 6, 5)
    probs = tc.softmax_rows(scores)
    assert np.abs(probs.sum(axis=1) - 1).max() <= 1e-12
    assert np.abs(tc.softmax_rows(scores + 7.5) - probs).max() <= 1e-12
    thirds = tc.softmax_rows(tc.as_tensor([[0.0, math.log(2.0)]]))
    assert np.abs(thirds - [[1 / 3, 2 / 3]]).max() <= 1e-12

    # products associate and match a hand evaluation
    assert np.array_equal(tc.matmul(a, tc.as_tensor([[1], [1]])), [[3.0], [7.0]])
    m1 = tc.gaussian_matrix(rng, 4, 5)
    m2 = tc.gaussian_matrix(rng, 5, 3)
    m3 = tc.gaussian_matrix(rng, 3, 6)
    left = tc.matmul(tc.matmul(m1, m2), m3)
    right = tc.matmul(m1, tc.matmul(m2, m3))
    assert np.linalg.norm(left - right) <= 1e-9 * np.linalg.norm(left)

    # row scaling
    rows = tc.gaussian_matrix(rng, 3, 4)
    assert np.array_equal(tc.row_scale(rows, np.ones((3, 1))), rows)
    assert not tc.row_scale(rows, np.zeros((3, 1))).any()
    assert np.array_equal(tc.row_scale(np.eye(2), np.array([[2.0], [3.0]])), [[2, 0], [0, 3]])
    with pytest.raises(DimensionError):
        tc.row_scale(rows, np.ones((2, 1)))

    # seeded orthonormal bases are reproducible
    for r, d in [(1, 1), (4, 8), (16, 16), (16, 64)]:
        b = tc.orthogonal_basis(r, d, tc.make_rng(5))
        assert b.shape == (r, d)
        assert np.abs(b @ b.T - np.eye(r)).max() < 1e-10
        assert np.array_equal(b, tc.orthogonal_basis(r, d, tc.make_rng(5)))
    with pytest.raises(InfeasibleBasisError):
        tc.orthogonal_basis(5, 4, rng)
    with pytest.raises(InfeasibleBasisError):
        tc.orthogonal_basis(0, 4, rng)

    # banded products match the dense ones inside the band
    n, w = 9, 3
    q = tc.gaussian_matrix(rng, n, 4)
    k = tc.gaussian_matrix(rng, n, 4)
    dense = q @ k.T
    for causal in (True, False):
        scores = tc.band_scores(q, k, w, causal)
        assert scores.shape == (n, tc.band_width(w, causal))
        for i in range(n):
            for c in range(scores.shape[1]):
                j = i + c - (w - 1)
                expected = dense[i, j] if 0 <= j < n else 0.0
                assert abs(scores[i, c] - expected) < 1e-12

        # band_combine and band_scatter are adjoint to band_scores
        a = tc.gaussian_matrix(rng, n, scores.shape[1])
        v = tc.gaussian_matrix(rng, n, 4)
        g = tc.gaussian_matrix(rng, n, 4)
        lhs = (g * tc.band_combine(a, v, w, causal)).sum()
        assert abs(lhs - (a * tc.band_scores(g, v, w, causal)).sum()) < 1e-10
        assert abs(lhs - (v * tc.band_scatter(a, g, w, causal)).sum()) < 1e-10

    mask = tc.band_mask(3, 2, causal=True)
    assert np.array_equal(mask, [[True, False], [False, False], [False, False]])
    mask = tc.band_mask(4, 2, causal=False, windowed=True)
    # query 1 closes its window, so it cannot see position 2
    assert np.array_equal(mask[1], [False, False, True])
    assert np.array_equal(tc.band_mask(4, 2, causal=False, windowed=False)[1], [False] * 3)

    x = np.arange(12, dtype=float).reshape(4, 3)
    means = tc.prefix_mean(x, [0, 1, 3, 4])
    assert np.array_equal(means[0], [0, 0, 0])
    assert np.array_equal(means[1], x[0])
    assert np.allclose(means[2], x[:3].mean(axis=0))
    assert np.allclose(means[3], x.mean(axis=0))
    with pytest.raises(DimensionError):
        tc.prefix_mean(x, [5])

    ln = tc.layer_norm_rows(x, np.ones((1, 3)), np.zeros((1, 3)))
    assert np.allclose(ln.mean(axis=1), 0)
    assert np.allclose(np.exp(tc.log_softmax_rows(x)).sum(axis=1), 1)
    assert tc.gelu(np.zeros((1, 1)))[0, 0] == 0
    with pytest.raises(DimensionError):
        tc.gather_rows(x, [4])

    # identical seeds give identical draws
    assert np.array_equal(
        tc.gaussian_matrix(tc.make_rng(9), 3, 3), tc.gaussian_matrix(tc.make_rng(9), 3, 3)
    )


def test_autodiff():
    rng = tc.make_rng(1)
    w1 = Parameter(tc.gaussian_matrix(rng, 4, 6), name="w1")
    gain = Parameter(tc.gaussian_matrix(rng, 1, 6), name="gain")
    bias = Parameter(tc.gaussian_matrix(rng, 1, 6), name="bias")
    table = Parameter(tc.gaussian_matrix(rng, 5, 4), name="table")
    ids = [0, 3, 3, 1, 4]
    targets = [1, 2, 5, 0, 3]

    def loss_fn(tape):
        x = tape.gather_rows(tape.param(table), ids)
        h = tape.layer_norm(tape.matmul(x, tape.param(w1)), tape.param(gain), tape.param(bias))
        h = tape.gelu(h)
        probs = tape.softmax_rows(h)
        return tape.cross_entropy_rows(tape.add(h, probs), targets)

    errors = lavo.check_gradients(loss_fn, [w1, gain, bias, table])
    assert set(errors) == {"w1", "gain", "bias", "table"}
    assert max(errors.values()) < 1e-6

    # a second pass after zero_grad gives identical gradients
    params = [w1, gain, bias, table]
    grads = []
    for _ in range(2):
        lavo.autodiff.zero_grad(params)
        tape = Tape()
        lavo.backward(tape, loss_fn(tape))
        grads.append([p.grad.copy() for p in params])
    assert all(np.array_equal(g, h) for g, h in zip(*grads))

    # an unrecorded tape keeps nothing and cannot be differentiated
    tape = Tape(record=False)
    loss = loss_fn(tape)
    assert tape.nodes == []
    with pytest.raises(ContractError):
        lavo.backward(tape, loss)

    tape = Tape()
    out = tape.matmul(tape.param(table), tape.param(w1))
    with pytest.raises(ContractError):
        lavo.backward(tape, out)

    # frozen parameters receive no gradient and no update
    w1.trainable = False
    tape = Tape()
    grads = lavo.backward(tape, loss_fn(tape))
    assert w1 not in grads
    assert table in grads
    before = w1.value.copy()
    lavo.adam_step([w1], lr=0.1)
    assert np.array_equal(before, w1.value)
    w1.trainable = True

    # adam descends a quadratic
    p = Parameter(np.array([[3.0, -2.0]]), name="p")
    for _ in range(200):
        lavo.autodiff.zero_grad([p])
        tape = Tape()
        node = tape.param(p)
        lavo.backward(tape, tape.sum(tape.mul(node, node)))
        lavo.adam_step([p], lr=0.1)
    assert np.abs(p.value).max() < 0.5

    # detached nodes pass no gradient back to their source
    u = Parameter(np.array([[3.0, -2.0]]), name="u")
    tape = Tape()
    node = tape.param(u)
    grads = lavo.backward(tape, tape.sum(tape.mul(node, lavo.detach(node))))
    assert np.array_equal(grads[u], u.value)
    lavo.autodiff.zero_grad([u])
    tape = Tape()
    node = tape.param(u)
    assert lavo.backward(tape, tape.sum(lavo.detach(tape.mul(node, node)))) == {}
    assert not u.grad.any()


def test_code_memory():
    rng = tc.make_rng(2)

    # recurrent state reads equal batch compression
    for _ in range(100):
        d = int(rng.integers(1, 65))
        r = int(rng.integers(1, min(d, 32) + 1))
        n = int(rng.integers(1, 1025))
        basis = lavo.make_basis(r, d, rng)
        x = tc.gaussian_matrix(rng, n, d)
        state = lavo.OrthoMemoryState(basis)
        for row in x:
            lavo.state_update(state, row)
        assert np.abs(lavo.state_read(state) - lavo.compress(x, basis)).max() < 1e-10

    basis = lavo.make_basis(4, 8, rng, name="b")
    assert basis.frozen
    assert basis.num_bases == 4
    assert basis.dim == 8
    assert basis.orthonormality_error() < 1e-10

    state = lavo.OrthoMemoryState(basis)
    assert lavo.state_read(state) is lavo.EMPTY
    assert not lavo.EMPTY
    size = len(state.to_bytes())
    x = tc.gaussian_matrix(rng, 10, 8)
    lavo.state_update_block(state, x[:6])
    lavo.state_update_block(state, x[6:6])
    lavo.state_update_block(state, x[6:])
    assert state.count == 10
    assert len(state.to_bytes()) == size
    assert np.allclose(lavo.state_read(state), lavo.compress(x, basis), atol=1e-12)

    # one token: each memory row is its basis row times the token's projection
    single = lavo.compress(x[:1], basis)
    assert np.allclose(single, basis.b * (basis.b @ x[0])[:, None])

    # compression is linear and ignores token order
    mem = lavo.compress(x, basis)
    assert np.abs(lavo.compress(2.5 * x, basis) - 2.5 * mem).max() <= 1e-12
    assert np.abs(lavo.compress(x[rng.permutation(10)], basis) - mem).max() <= 1e-12
    assert not lavo.compress(np.zeros((3, 8)), basis).any()

    # the standard basis keeps each coordinate's mean on its own row
    identity = OrthogonalBasis(np.eye(2))
    assert np.array_equal(lavo.compress(tc.as_tensor([[1, 2], [3, 4]]), identity), [[2, 0], [0, 3]])

    # a zero query weighs every memory row equally
    uniform = lavo.attend_memory(np.zeros((2, 8)), mem)
    assert np.allclose(uniform, np.repeat(mem.mean(axis=0, keepdims=True), 2, axis=0))

    with pytest.raises(EmptyContextError):
        lavo.compress(np.zeros((0, 8)), basis)
    with pytest.raises(DimensionError):
        lavo.compress(np.zeros((3, 7)), basis)
    with pytest.raises(DimensionError):
        lavo.state_update(state, np.zeros(7))
    with pytest.raises(ContractError):
        lavo.attend_memory(x, lavo.EMPTY)

    # a one-row memory is returned verbatim to every query
    mem = lavo.compress(x, lavo.make_basis(1, 8, rng))
    out = lavo.attend_memory(x, mem)
    assert np.allclose(out, np.repeat(mem, 10, axis=0))


def test_layer_config():
    with pytest.raises(ValueError):
        LavoConfig(d_model=10, heads=3)
    with pytest.raises(ValueError):
        LavoConfig(d_model=8, heads=2, num_bases=5)
    with pytest.raises(ValueError):
        LavoConfig(d_model=8, heads=2, num_bases=2, window=0)

    config = LavoConfig(d_model=8, heads=2, num_bases=2, window=2)
    assert config.d_head == 4
    assert config.scale == 0.5
    assert LavoConfig(d_model=8, heads=2, num_bases=2, use_scale=False).scale == 1.0
    assert config.to_dict()["window"] == 2

    assert np.array_equal(lavo_layer.memory_ends(5, config), [0, 0, 2, 2, 4])
    no_dissect = LavoConfig(d_model=8, heads=2, num_bases=2, window=2, use_dissection=False)
    assert np.array_equal(lavo_layer.memory_ends(5, no_dissect), [1, 2, 3, 4, 5])
    noncausal = LavoConfig(d_model=8, heads=2, num_bases=2, window=2, causal=False)
    assert np.array_equal(lavo_layer.memory_ends(5, noncausal), [5] * 5)

    # parameters are a deterministic function of the seed
    a = lavo.init_params(config)
    b = lavo.init_params(config)
    c = lavo.init_params(LavoConfig(d_model=8, heads=2, num_bases=2, window=2, seed=1))
    assert all(np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.w_q.value, c.w_q.value)
    assert list(a.named_parameters()) == [
        "w_q", "w_k", "w_v", "w_o", "bases.0", "pos.0", "bases.1", "pos.1"
    ]
    assert a.pos[0].shape == (1, 3)
    assert not a.bases[0].trainable
    assert lavo_layer.cast_params(a, "float32").w_q.value.dtype == np.float32

    with pytest.raises(EmptyContextError):
        lavo.forward(np.zeros((0, 8)), a, config)
    a.pos[0] = Parameter(np.zeros((1, 5)))
    with pytest.raises(ContractError):
        lavo.forward(np.ones((3, 8)), a, config)


def test_causality():
    rng = tc.make_rng(3)
    for _ in range(100):
        config, params = _random_layer(rng)
        n = int(rng.integers(2, 6 * config.window + 2))
        x = tc.gaussian_matrix(rng, n, config.d_model)
        t = int(rng.integers(0, n - 1))
        edited = x.copy()
        edited[t + 1 :] = tc.gaussian_matrix(rng, n - t - 1, config.d_model)
        a = lavo.forward(x, params, config).value
        b = lavo.forward(edited, params, config).value
        assert np.abs(a[: t + 1] - b[: t + 1]).max() <= 1e-12

    # noncausal outputs do see the future
    config, params = _random_layer(rng, causal=False, window=3)
    x = tc.gaussian_matrix(rng, 8, config.d_model)
    edited = x.copy()
    edited[-1] += 1.0
    a = lavo.forward(x, params, config).value
    b = lavo.forward(edited, params, config).value
    assert np.abs(a[0] - b[0]).max() > 1e-9


def test_oracle_equivalence():
    rng = tc.make_rng(4)
    for _ in range(50):
        config, params = _random_layer(rng)
        n = int(rng.integers(1, 8 * config.window + 1))
        x = tc.gaussian_matrix(rng, n, config.d_model)
        fast = lavo.forward(x, params, config).value
        slow = lavo.naive_causal_lavo(x, params, config)
        assert np.abs(fast - slow).max() <= 1e-8

    # with one window and no memory yet, the layer is pure local attention
    config, params = _random_layer(rng, window=6, use_dissection=True)
    x = tc.gaussian_matrix(rng, 6, config.d_model)
    local = oracles.local_only(x, params, config)
    assert np.allclose(lavo.forward(x, params, config).value, local, atol=1e-12)

    # a window covering the sequence makes local attention exact attention
    for causal in (True, False):
        config, params = _random_layer(rng, window=8, use_epe=False, causal=causal)
        x = tc.gaussian_matrix(rng, 7, config.d_model)
        exact = oracles.vanilla_layer(x, params, config)
        assert np.allclose(oracles.local_only(x, params, config), exact, atol=1e-12)

    # vanilla attention's first causal row is the first value
    q, k, v = (tc.gaussian_matrix(rng, 5, 3) for _ in range(3))
    assert np.allclose(lavo.vanilla_attention(q, k, v)[0], v[0])
    with pytest.raises(DimensionError):
        lavo.vanilla_attention(q, k, v[:4])

    config, params = _random_layer(rng, causal=False)
    with pytest.raises(ContractError):
        lavo.naive_causal_lavo(tc.gaussian_matrix(rng, 4, config.d_model), params, config)


def test_noncausal_forward():
    rng = tc.make_rng(10)
    for dissection in (True, False):
        for _ in range(20):
            config, params = _random_layer(rng, causal=False, use_dissection=dissection)
            n = int(rng.integers(1, 6 * config.window + 1))
            x = tc.gaussian_matrix(rng, n, config.d_model)
            fast = lavo.forward(x, params, config).value
            assert np.abs(fast - lavo.naive_noncausal_lavo(x, params, config)).max() <= 1e-10

            # every query shares one whole-sequence memory per head
            q, k, v = (x @ p.value for p in (params.w_q, params.w_k, params.w_v))
            heads = []
            for h in range(config.heads):
                cols = slice(h * config.d_head, (h + 1) * config.d_head)
                local = oracles._local_rows(
                    q[:, cols], k[:, cols], v[:, cols], params.pos[h], config
                )
                context = local if dissection else x[:, cols]
                mem = lavo.compress(context, params.bases[h])
                heads.append((local + lavo.attend_memory(q[:, cols], mem, config.scale)) / 2)
            expected = np.concatenate(heads, axis=1) @ params.w_o.value
            assert np.abs(fast - expected).max() <= 1e-10

    config, params = _random_layer(rng)
    with pytest.raises(ContractError):
        lavo.naive_noncausal_lavo(tc.gaussian_matrix(rng, 4, config.d_model), params, config)


def test_incremental_decoding():
    rng = tc.make_rng(5)
    for dissection in (True, False):
        for _ in range(10):
            config, params = _random_layer(rng, use_dissection=dissection)
            n = int(rng.integers(1, 8 * config.window + 1))
            x = tc.gaussian_matrix(rng, n, config.d_model)
            full = lavo.forward(x, params, config).value
            cache = lavo.CausalCache(params, config)
            size = len(cache.to_bytes())
            for t in range(n):
                assert np.abs(lavo.step(cache, x[t]) - full[t]).max() <= 1e-8
                assert len(cache.to_bytes()) == size
            assert cache.position == n

    config, params = _random_layer(rng, causal=False)
    with pytest.raises(ContractError):
        lavo.CausalCache(params, config)


def test_position_encoding():
    rng = tc.make_rng(6)
    config = LavoConfig(d_model=8, heads=2, num_bases=2, window=3, seed=11)
    off = LavoConfig(d_model=8, heads=2, num_bases=2, window=3, use_epe=False, seed=11)
    params = lavo.init_params(config)
    x = tc.gaussian_matrix(rng, 20, 8)

    # a zero table is bitwise the same as no table at all
    assert np.array_equal(lavo.forward(x, params, config).value, lavo.forward(x, params, off).value)

    params.pos[0].value = tc.gaussian_matrix(rng, 1, 5)
    biased = lavo.forward(x, params, config).value
    assert not np.allclose(biased, lavo.forward(x, params, off).value)

    # causal attention never reads offsets after the query
    changed = lavo.init_params(config)
    changed.pos[0].value = params.pos[0].value.copy()
    changed.pos[0].value[0, 3:] += 5.0
    assert np.array_equal(
        lavo.forward(x, params, config).value, lavo.forward(x, changed, config).value
    )


def test_layer_gradients():
    rng = tc.make_rng(7)
    x = tc.gaussian_matrix(rng, 12, 8)
    target = tc.gaussian_matrix(rng, 12, 8)
    for dissection in (True, False):
        config = LavoConfig(
            d_model=8, heads=2, num_bases=2, window=4, use_dissection=dissection, train_bases=True
        )
        params = lavo.init_params(config)
        for table in params.pos:
            table.value = tc.gaussian_matrix(rng, 1, 7)

        def loss_fn(tape):
            out = lavo.forward(x, params, config, tape)
            return tape.sum(tape.mul(out, tape.const(target)))

        errors = lavo.check_gradients(loss_fn, params.parameters())
        assert "pos.0" in errors
        assert "bases.1" in errors
        assert max(errors.values()) < 1e-4


def test_complexity_audit():
    config = LavoConfig(d_model=64, heads=2, num_bases=16, window=16)
    audit = lavo.complexity_audit
    assert audit(config, 2048) == 2 * audit(config, 1024)
    assert audit(config, 1024, num_bases=32) > audit(config, 1024)
    assert audit(config, 1024, window=32) > audit(config, 1024)
    assert audit(config, 0) == 0

    # no memory and a window spanning the sequence is the quadratic count
    n = 256
    quadratic = 8 * n * config.d_model ** 2 + config.heads * 4 * n * n * config.d_head
    assert audit(config, n, num_bases=0, window=n) == quadratic

    cross = cross_attention.cross_complexity_audit
    assert cross(config, 0, 0) == 0
    assert cross(config, 200, 50) - cross(config, 100, 50) == cross(config, 300, 50) - cross(
        config, 200, 50
    )
    assert cross(config, 100, 200) - cross(config, 100, 100) == cross(config, 100, 100) - cross(
        config, 100, 0
    )


def test_cross_attention():
    rng = tc.make_rng(8)
    config = LavoConfig(d_model=16, heads=2, num_bases=4, window=4, seed=3)
    params = lavo.init_cross_params(config)
    assert params.w_o is not None
    assert lavo.init_cross_params(LavoConfig(d_model=8, heads=1, num_bases=2)).w_o is None

    x = tc.gaussian_matrix(rng, 30, 16)
    memory = lavo.encode_source(x, params, config)
    assert len(memory.heads) == 2
    assert memory.heads[0].shape == (4, 8)

    # the memory does not depend on source order
    shuffled = lavo.encode_source(x[rng.permutation(30)], params, config)
    for y in (tc.gaussian_matrix(rng, 9, 16), tc.gaussian_matrix(rng, 3, 16)):
        a = lavo.forward_cross(y, memory, params, config).value
        b = lavo.forward_cross(y, shuffled, params, config).value
        assert np.abs(a - b).max() <= 1e-12
        # one encoded source serves every target
        fresh = lavo.encode_source(x, params, config)
        assert np.array_equal(a, lavo.forward_cross(y, fresh, params, config).value)

    # each head's memory is the compressed slice of the raw source
    for h, mem in enumerate(memory.heads):
        assert np.array_equal(mem, lavo.compress(x[:, h * 8 : (h + 1) * 8], params.bases[h]))

    # one target row against softmax(q memᵀ) mem per head, then the recombination
    y1 = tc.gaussian_matrix(rng, 1, 16)
    q = y1 @ params.w_q.value
    heads = []
    for h, mem in enumerate(memory.heads):
        scores = q[:, h * 8 : (h + 1) * 8] @ mem.T * config.scale
        weights = np.exp(scores - scores.max())
        heads.append(weights / weights.sum() @ mem)
    expected = np.concatenate(heads, axis=1) @ params.w_o.value
    assert np.abs(lavo.forward_cross(y1, memory, params, config).value - expected).max() <= 1e-12

    # a one-row memory hands that row to every target
    single = LavoConfig(d_model=8, heads=1, num_bases=1, seed=4)
    single_params = lavo.init_cross_params(single)
    single_mem = lavo.encode_source(tc.gaussian_matrix(rng, 6, 8), single_params, single)
    out = lavo.forward_cross(tc.gaussian_matrix(rng, 4, 8), single_mem, single_params, single)
    assert np.allclose(out.value, np.repeat(single_mem.heads[0], 4, axis=0), atol=1e-12)

    with pytest.raises(EmptyContextError):
        lavo.encode_source(np.zeros((0, 16)), params, config)
    other = LavoConfig(d_model=16, heads=2, num_bases=3, window=4)
    with pytest.raises(ContractError):
        lavo.forward_cross(x, memory, lavo.init_cross_params(other), other)

    # gradients reach the query projection and, through the source, the bases
    config = LavoConfig(d_model=8, heads=2, num_bases=2, window=4, train_bases=True)
    params = lavo.init_cross_params(config)
    src = tc.gaussian_matrix(rng, 12, 8)
    y = tc.gaussian_matrix(rng, 5, 8)
    target = tc.gaussian_matrix(rng, 5, 8)

    def loss_fn(tape):
        mem = lavo.encode_source(src, params, config, tape)
        out = lavo.forward_cross(y, mem, params, config, tape)
        return tape.sum(tape.mul(out, tape.const(target)))

    errors = lavo.check_gradients(loss_fn, params.parameters())
    assert "w_q" in errors
    assert max(errors.values()) < 1e-4


def test_bench():
    # deterministic inputs
    a = bench.make_inputs(16, 8, seed=42)
    assert a.dtype == np.float32
    assert np.array_equal(a, bench.make_inputs(16, 8, seed=42))
    assert not np.array_equal(a, bench.make_inputs(16, 8, seed=43))

    grid = dict(d_model=8, heads=2, num_bases=2, window=4, repetitions=3, warmup=0)
    records = lavo.run_bench([16, 32, 64], mechanisms=["lavo", "naive"], **grid)
    assert len(records) == 6
    for r in records:
        assert r.ok
        assert isinstance(r.wall_ns, int) and r.wall_ns > 0
        assert (r.d_model, r.heads, r.num_bases, r.window, r.seed) == (8, 2, 2, 4, 42)
        assert isinstance(r.peak_bytes, int)

    records = lavo.run_bench([16, 32], mechanisms=["local"], measure_memory=False, **grid)
    assert all(r.peak_bytes.startswith("est:") for r in records)

    # decode is timed for the layer and recorded as a failure for the rest
    records = lavo.run_bench([8, 16, 24], ["lavo", "vanilla"], mode="decode", **grid)
    assert all(r.ok for r in records if r.mechanism == "lavo")
    failed = [r for r in records if r.mechanism == "vanilla"]
    assert all(not r.ok for r in failed)
    assert failed[0].to_row()["wall_ns"] == "-"
    assert failed[0].to_row()["peak_bytes"] == "-"

    with pytest.raises(ValueError):
        lavo.run_bench([32, 16], **grid)
    with pytest.raises(ValueError):
        lavo.run_bench([16, 32], d_model=8, heads=2, num_bases=2, window=4, repetitions=2)
    with pytest.raises(ValueError):
        lavo.run_bench([16], mechanisms=["xyz"], **grid)
    with pytest.raises(ValueError):
        lavo.run_bench([16], mode="xyz", **grid)

    # csv output
    filepath = lavo.write_csv([], ".temp/data/empty.csv")
    with open(filepath, "rb") as f:
        assert f.read() == (
            b"mechanism,mode,n,d_model,heads,num_bases,window,seed,wall_ns,peak_bytes\n"
        )
    filepath = lavo.write_csv(records, ".temp/data/decode.csv")
    with open(filepath, "rb") as f:
        assert b"\r" not in f.read()
    df = lavo.read_csv(filepath)
    assert list(df["mechanism"]) == [r.mechanism for r in records]
    assert list(df["n"]) == [r.n for r in records]
    assert list(df["ok"]) == [r.ok for r in records]
    assert df["wall_ns"].iloc[0] == records[0].wall_ns
    with pytest.raises(OSError, match="empty.csv"):
        lavo.write_csv(records, ".temp/data/empty.csv/nested.csv")

    summary = lavo.summarize(records)
    assert set(summary["mechanism"]) == {"lavo", "vanilla"}
    assert summary.set_index("mechanism").loc["vanilla", "failures"] == 3
    assert bench.estimate_peak_bytes("vanilla", "forward", LavoConfig(8, 2, 2, 4), 64) > 0


def _synthetic(mechanism, times, lengths=(1024, 2048, 4096, 8192)):
    return [
        bench.BenchRecord(mechanism, "forward", n, 64, 2, 16, 16, 42, wall_ns=t)
        for n, t in zip(lengths, times)
    ]


def test_slopes_and_trends():
    lengths = np.array([1024, 2048, 4096, 8192])
    assert abs(lavo.fit_loglog_slope(_synthetic("lavo", 1000 * lengths)) - 1.0) < 1e-9
    assert abs(lavo.fit_loglog_slope(_synthetic("vanilla", lengths ** 2)) - 2.0) < 1e-9
    perturbed = 1000 * lengths * np.array([1.05, 0.95, 1.05, 0.95])
    assert 0.9 <= lavo.fit_loglog_slope(_synthetic("lavo", perturbed)) <= 1.1

    with pytest.raises(InsufficientDataError):
        lavo.fit_loglog_slope(_synthetic("lavo", [1, 2], lengths=(16, 32)))
    with pytest.raises(InsufficientDataError):
        lavo.fit_loglog_slope(_synthetic("lavo", [1, 2, 3], lengths=(16, 16, 32)))
    with pytest.raises(ValueError):
        lavo.fit_loglog_slope(_synthetic("lavo", [1, 2, 3]) + _synthetic("naive", [1, 2, 3]))

    records = (
        _synthetic("lavo", 100 * lengths)
        + _synthetic("vanilla", lengths ** 2)
        + _synthetic("naive", lengths ** 2)
    )
    summary = lavo.summarize(records)
    assert np.allclose(summary["slope"], [1, 2, 2])
    assert summary.set_index("mechanism").loc["lavo", "flops_slope"] < 1.05
    assert summary.set_index("mechanism").loc["vanilla", "flops_slope"] > 1.3
    checks = bench.check_trends(summary, decode_times={32: 100.0, 128: 120.0})
    assert checks == {
        "lavo_forward_linear": True,
        "vanilla_superlinear": True,
        "naive_superlinear": True,
        "lavo_speedup_over_vanilla": True,
        "decode_constant_per_step": True,
    }
    assert not bench.check_trends(summary, decode_times={32: 100.0, 128: 200.0})[
        "decode_constant_per_step"
    ]

    config = LavoConfig(d_model=8, heads=2, num_bases=2, window=4)
    times = bench.time_decode_steps(config, [8, 32], repetitions=3)
    assert sorted(times) == [8, 32]
    assert all(t > 0 for t in times.values())


def test_plots_and_cli():
    records = _synthetic("lavo", [1, 2, 4, 8]) + _synthetic("vanilla", [1, 4, 16, 64])
    records[-1].failure = "out of memory"
    fig, ax = lavo.plot_scaling(
        bench.records_to_frame(records), show=False, close=True, save=True
    )
    assert os.path.exists(".temp/imgs/scaling.png")
    assert len(ax.get_lines()) == 4

    argv = ["--mechanisms", "lavo,local", "--lengths", "8,16,32", "--d-model", "8"]
    argv += ["--num-bases", "2", "--window", "4", "--reps", "3", "--no-memory"]
    argv += ["--out", ".temp/data/cli.csv", "--plot", ".temp/imgs/cli.png"]
    assert bench.main(argv) == 0
    assert os.path.exists(".temp/data/cli.csv")
    assert os.path.exists(".temp/imgs/cli.png")

    argv = ["--mechanisms", "vanilla", "--mode", "decode", "--lengths", "8,16,32"]
    argv += ["--d-model", "8", "--num-bases", "2", "--window", "4", "--reps", "3"]
    argv += ["--out", ".temp/data/strict.csv", "--strict"]
    assert bench.main(argv) == 1
    assert bench.main(["--lengths", "32,16", "--out", ".temp/data/bad.csv"]) == 2
    _configure()


def test_checkpoint_format():
    rng = tc.make_rng(9)
    tensors = {"w": tc.gaussian_matrix(rng, 3, 4), "b": tc.gaussian_matrix(rng, 1, 4)}
    checkpoint = lavo.Checkpoint({"name": "x", "n": 2}, tensors)
    data = checkpoint.to_bytes()
    assert data[:4] == b"LAVO"
    assert struct.unpack("<I", data[4:8]) == (1,)
    assert len(data) == 16 + struct.unpack("<Q", data[8:16])[0] + (12 + 4) * 4

    # round trip is bitwise and keeps tensor order
    filepath = lavo.save_checkpoint(checkpoint, ".temp/data/test.lavo")
    loaded = lavo.load_checkpoint(filepath)
    assert loaded.config == {"name": "x", "n": 2}
    assert list(loaded.tensors) == ["w", "b"]
    assert loaded.to_bytes() == data
    assert np.array_equal(loaded.tensors["w"], tensors["w"].astype(np.float32))
    assert lavo.save_checkpoint(checkpoint) == os.path.join(".temp/data", "model.lavo")

    with pytest.raises(CorruptCheckpointError):
        io.Checkpoint.from_bytes(data[:-3])
    with pytest.raises(CorruptCheckpointError):
        io.Checkpoint.from_bytes(data[:10])
    with pytest.raises(CorruptCheckpointError):
        io.Checkpoint.from_bytes(data + b"\x00\x00\x00\x00")
    with pytest.raises(CheckpointFormatError):
        io.Checkpoint.from_bytes(b"GGUF" + data[4:])
    with pytest.raises(UnsupportedVersionError):
        io.Checkpoint.from_bytes(data[:4] + struct.pack("<I", 99) + data[8:])

    # overlapping tensors
    header = b'{"config":{},"tensors":{"a":[1,2,0],"b":[1,2,4]}}'
    bad = b"LAVO" + struct.pack("<IQ", 1, len(header)) + header + b"\x00" * 16
    with pytest.raises(CorruptCheckpointError):
        io.Checkpoint.from_bytes(bad)

    # malformed index entries
    for entry in ["[1,2]", "[1.5,2,0]", "[-1,2,0]", '"x"', "[true,2,0]", "[1,2,0,0]"]:
        header = b'{"config":{},"tensors":{"a":' + entry.encode() + b"}}"
        bad = b"LAVO" + struct.pack("<IQ", 1, len(header)) + header + b"\x00" * 8
        with pytest.raises(CorruptCheckpointError):
            io.Checkpoint.from_bytes(bad)
    header = b'{"config":{},"tensors":[]}'
    bad = b"LAVO" + struct.pack("<IQ", 1, len(header)) + header
    with pytest.raises(CorruptCheckpointError):
        io.Checkpoint.from_bytes(bad)


def test_corpus_stream():
    corpus = lavo.CorpusStream(corpus_text, seed=1, holdout_fraction=0.1)
    train = corpus.split("train")
    heldout = corpus.split("heldout")
    assert len(train) + len(heldout) == len(corpus_text)
    assert len(heldout) == int(len(corpus_text) * 0.1)
    assert bytes(np.concatenate([train, heldout]).astype(np.uint8)) == corpus_text
    with pytest.raises(ValueError):
        corpus.split("test")

    inputs, targets = corpus.next_batch(3, 16)
    assert inputs.shape == targets.shape == (3, 16)
    assert np.array_equal(inputs[:, 1:], targets[:, :-1])

    # the same seed replays the same batches
    corpus.reseed(1)
    again, _ = corpus.next_batch(3, 16)
    assert np.array_equal(inputs, again)

    windows = list(corpus.windows(50, "heldout"))
    assert len(windows) == (len(heldout) - 1) // 50
    assert all(len(i) == 50 for i, _ in windows)
    (whole, _), = corpus.windows(10_000, "heldout")
    assert len(whole) == len(heldout) - 1

    filepath = ".temp/data/corpus.txt"
    os.makedirs(".temp/data", exist_ok=True)
    with open(filepath, "wb") as f:
        f.write(corpus_text)
    assert len(lavo.CorpusStream.from_files([filepath, filepath])) == 2 * len(corpus_text)


def test_language_model():
    with pytest.raises(ValueError):
        LmConfig(vocab_size=256)
    with pytest.raises(ValueError):
        LmConfig(window=32, ctx_len=16)

    corpus = lavo.CorpusStream(corpus_text, seed=0)
    config = LmConfig(steps=0, **small_lm)
    model = lavo.LmModel(config)
    assert model.config.layer_config(0).seed == config.seed + 7919

    # zero output gain gives uniform predictions at initialization
    inputs, targets = corpus.next_batch(2, 32)
    loss = model.loss(inputs, targets).value[0, 0]
    assert abs(loss - math.log(257)) < 1e-12
    assert abs(lavo.eval_ppl(model, corpus, 64) - 257) < 1e-6

    # a zero learning rate leaves the loss bitwise constant
    frozen = LmConfig(steps=5, lr=0.0, **small_lm)
    _, trace = lavo.train(frozen, corpus, save=False)
    assert len(trace) == 5
    assert len(set(trace)) == 1
    assert abs(trace[0] - math.log(257)) < 0.05

    # training lowers the loss and is bitwise reproducible
    run = LmConfig(steps=60, lr=1e-2, **small_lm)
    trained = lavo.LmModel(run)
    checkpoint, trace = lavo.train(run, corpus, filepath=".temp/data/lm.lavo", model=trained)
    assert np.mean(trace[-10:]) < trace[0]
    again, trace_again = lavo.train(run, corpus, save=False)
    assert trace == trace_again
    assert again.to_bytes() == checkpoint.to_bytes()

    # checkpoints reload bitwise
    loaded = lavo.LmModel.from_checkpoint(lavo.load_checkpoint(".temp/data/lm.lavo"))
    assert loaded.to_checkpoint().to_bytes() == checkpoint.to_bytes()

    # frozen bases come back at full precision, and must match their seeds
    for block in loaded.blocks:
        assert all(b.orthonormality_error() < 1e-8 for b in block.attn.bases)
    tampered = dict(checkpoint.tensors)
    tampered["layers.0.attn.bases.0"] = tampered["layers.0.attn.bases.0"] + 1e-3
    with pytest.raises(CorruptCheckpointError):
        lavo.LmModel.from_checkpoint(io.Checkpoint(checkpoint.config, tampered))

    partial = io.Checkpoint(checkpoint.config, dict(list(checkpoint.tensors.items())[1:]))
    with pytest.raises(CorruptCheckpointError):
        lavo.LmModel.from_checkpoint(partial)
    with pytest.raises(CorruptCheckpointError):
        lavo.LmModel.from_checkpoint(io.Checkpoint({"model": "other"}, {}))

    # evaluation past the training length, and decoding that agrees with it
    ppl = lavo.eval_ppl(trained, corpus, 64, max_windows=2)
    decoded = lavo.eval_ppl(trained, corpus, 64, decode=True, max_windows=2)
    assert np.isfinite(ppl)
    assert abs(ppl - decoded) <= 1e-9 * ppl
    assert np.isfinite(lavo.eval_ppl(checkpoint, corpus, 16 * run.ctx_len, max_windows=1))
    assert lavo.eval_ppl(trained, corpus, 128, split="train", max_windows=4) < 257
    with pytest.raises(ValueError):
        lavo.eval_ppl(trained, corpus, 0)
    with pytest.raises(DataError):
        lavo.eval_ppl(trained, lavo.CorpusStream(corpus_text, holdout_fraction=0.0), 64)

    with pytest.raises(DataError):
        lavo.train(run, lavo.CorpusStream(corpus_text[:100]), save=False)

    broken = lavo.LmModel(run)
    broken.embed.value[:] = np.nan
    with pytest.raises(NonFiniteLossError) as e:
        lavo.train(run, corpus, model=broken, save=False)
    assert e.value.step == 0


def test_ablations():
    corpus = lavo.CorpusStream(corpus_text, seed=0)

    # dropping the position bias is the same as freezing it at zero
    no_epe = LmConfig(steps=5, lr=1e-2, use_epe=False, **small_lm)
    a, _ = lavo.train(no_epe, corpus, save=False)
    with_epe = LmConfig(steps=5, lr=1e-2, **small_lm)
    model = lavo.LmModel(with_epe)
    for block in model.blocks:
        for table in block.attn.pos:
            table.trainable = False
    b, _ = lavo.train(with_epe, corpus, model=model, save=False)
    assert list(a.tensors) == list(b.tensors)
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)

    # the raw-prefix memory trains too
    no_dissect = LmConfig(steps=5, lr=1e-2, use_dissection=False, **small_lm)
    _, trace = lavo.train(no_dissect, corpus, save=False)
    assert all(np.isfinite(trace))

    sweep = lm_demo.sweep_windows(
        LmConfig(steps=2, **small_lm), corpus, windows=[2, 4], eval_lens=[32, 64], max_windows=1
    )
    assert isinstance(sweep, pd.DataFrame)
    assert sweep.shape == (4, 3)
    assert list(sweep["window"]) == [2, 2, 4, 4]


def test_lm_cli_and_selftest():
    filepath = ".temp/data/cli_corpus.txt"
    os.makedirs(".temp/data", exist_ok=True)
    with open(filepath, "wb") as f:
        f.write(corpus_text)

    out = ".temp/data/cli.lavo"
    argv = ["train", "--corpus", filepath, "--d-model", "8", "--layers", "1", "--heads", "2"]
    argv += ["--num-bases", "2", "--window", "4", "--ctx", "16", "--steps", "3", "--batch", "2"]
    argv += ["--no-epe", "--out", out]
    assert lm_demo.main(argv) == 0
    assert os.path.exists(out)

    argv = ["eval", "--model", out, "--corpus", filepath, "--eval-lens", "16,64"]
    assert lm_demo.main(argv + ["--max-windows", "2"]) == 0
    assert lm_demo.main(argv + ["--decode", "--max-windows", "1"]) == 0
    assert lm_demo.main(["eval", "--model", ".temp/data/missing.lavo", "--corpus", filepath]) == 1

    results = lavo.run_selftest(seed=1)
    assert all(results.values())
    _configure()
