"""Run the library's numerical invariants at desk scale."""

import logging as lg
import time

import numpy as np

from . import code_memory
from . import cross_attention
from . import io
from . import lavo_layer
from . import oracles
from . import settings
from . import tensor_core as tc
from . import utils
from .autodiff import Tape
from .autodiff import check_gradients
from .lavo_layer import LavoConfig


def _check_recurrent_compress(rng):
    for _ in range(20):
        d = int(rng.integers(2, 33))
        r = int(rng.integers(1, d + 1))
        n = int(rng.integers(1, 200))
        basis = code_memory.make_basis(r, d, rng)
        x = tc.gaussian_matrix(rng, n, d)
        state = code_memory.OrthoMemoryState(basis)
        for row in x:
            code_memory.state_update(state, row)
        if np.abs(code_memory.state_read(state) - code_memory.compress(x, basis)).max() > 1e-10:
            return False
    return True


def _check_orthonormality(rng):
    for r, d in [(1, 1), (4, 8), (16, 32), (32, 32), (16, 64)]:
        if code_memory.make_basis(r, d, rng).orthonormality_error() >= 1e-10:
            return False
    return True


def _random_config(rng, **kwargs):
    heads = int(rng.integers(1, 3))
    d_head = int(rng.integers(2, 7))
    defaults = dict(
        d_model=heads * d_head,
        heads=heads,
        num_bases=int(rng.integers(1, d_head + 1)),
        window=int(rng.integers(1, 6)),
        use_epe=bool(rng.integers(0, 2)),
        use_dissection=bool(rng.integers(0, 2)),
        seed=int(rng.integers(0, 2 ** 31)),
    )
    defaults.update(kwargs)
    config = LavoConfig(**defaults)
    params = lavo_layer.init_params(config)
    for table in params.pos:
        table.value = tc.gaussian_matrix(rng, 1, table.shape[1])
    return config, params


def _check_causality(rng):
    for _ in range(20):
        config, params = _random_config(rng)
        n = int(rng.integers(2, 6 * config.window + 2))
        x = tc.gaussian_matrix(rng, n, config.d_model)
        t = int(rng.integers(0, n - 1))
        edited = x.copy()
        edited[t + 1 :] = tc.gaussian_matrix(rng, n - t - 1, config.d_model)
        a = lavo_layer.forward(x, params, config).value
        b = lavo_layer.forward(edited, params, config).value
        if np.abs(a[: t + 1] - b[: t + 1]).max() > 1e-12:
            return False
    return True


def _check_oracle(rng):
    for _ in range(10):
        config, params = _random_config(rng)
        n = int(rng.integers(1, 8 * config.window + 1))
        x = tc.gaussian_matrix(rng, n, config.d_model)
        fast = lavo_layer.forward(x, params, config).value
        if np.abs(fast - oracles.naive_causal_lavo(x, params, config)).max() > 1e-8:
            return False
    return True


def _check_decode(rng):
    for _ in range(10):
        config, params = _random_config(rng)
        n = int(rng.integers(1, 8 * config.window + 1))
        x = tc.gaussian_matrix(rng, n, config.d_model)
        full = lavo_layer.forward(x, params, config).value
        cache = lavo_layer.CausalCache(params, config)
        size = len(cache.to_bytes())
        for t in range(n):
            if np.abs(lavo_layer.step(cache, x[t]) - full[t]).max() > 1e-8:
                return False
            if len(cache.to_bytes()) != size:
                return False
    return True


def _check_gradients(rng):
    config = LavoConfig(d_model=8, heads=2, num_bases=2, window=4, train_bases=True, seed=7)
    params = lavo_layer.init_params(config)
    for table in params.pos:
        table.value = tc.gaussian_matrix(rng, 1, table.shape[1])
    x = tc.gaussian_matrix(rng, 12, 8)
    target = tc.gaussian_matrix(rng, 12, 8)

    def loss_fn(tape):
        out = lavo_layer.forward(x, params, config, tape)
        return tape.sum(tape.mul(out, tape.const(target)))

    errors = check_gradients(loss_fn, params.parameters())

    cross = cross_attention.init_cross_params(config)
    y = tc.gaussian_matrix(rng, 5, 8)

    def cross_loss(tape):
        memory = cross_attention.encode_source(x, cross, config, tape)
        out = cross_attention.forward_cross(y, memory, cross, config, tape)
        return tape.sum(tape.mul(out, tape.const(target[:5])))

    errors.update(check_gradients(cross_loss, [cross.w_q, cross.w_o]))
    return max(errors.values()) < 1e-4


def _check_cross(rng):
    config = LavoConfig(d_model=16, heads=2, num_bases=4, window=4, seed=3)
    params = cross_attention.init_cross_params(config)
    x = tc.gaussian_matrix(rng, 30, 16)
    y = tc.gaussian_matrix(rng, 9, 16)
    memory = cross_attention.encode_source(x, params, config)
    shuffled = cross_attention.encode_source(x[rng.permutation(30)], params, config)
    a = cross_attention.forward_cross(y, memory, params, config).value
    b = cross_attention.forward_cross(y, shuffled, params, config).value
    fresh = cross_attention.encode_source(x, params, config)
    c = cross_attention.forward_cross(y, fresh, params, config).value
    return np.abs(a - b).max() <= 1e-12 and np.array_equal(a, c)


def _check_epe_ablation(rng):
    config = LavoConfig(d_model=8, heads=2, num_bases=2, window=3, seed=11)
    params = lavo_layer.init_params(config)
    x = tc.gaussian_matrix(rng, 20, 8)
    with_zero_table = lavo_layer.forward(x, params, config).value
    off = LavoConfig(d_model=8, heads=2, num_bases=2, window=3, use_epe=False, seed=11)
    return np.array_equal(with_zero_table, lavo_layer.forward(x, params, off).value)


def _check_checkpoint(rng):
    tensors = {"a": tc.gaussian_matrix(rng, 3, 4), "b": tc.gaussian_matrix(rng, 1, 7)}
    data = io.Checkpoint({"k": 1}, tensors).to_bytes()
    again = io.Checkpoint.from_bytes(data)
    return again.to_bytes() == data and again.config == {"k": 1}


def _check_determinism(rng):
    config = LavoConfig(d_model=8, heads=2, num_bases=2, window=3, seed=5)
    a, b = lavo_layer.init_params(config), lavo_layer.init_params(config)
    return all(np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), b.parameters()))


CHECKS = {
    "recurrent_compress": _check_recurrent_compress,
    "orthonormality": _check_orthonormality,
    "causality": _check_causality,
    "oracle_equivalence": _check_oracle,
    "incremental_decoding": _check_decode,
    "gradients": _check_gradients,
    "cross_attention": _check_cross,
    "epe_ablation": _check_epe_ablation,
    "checkpoint_roundtrip": _check_checkpoint,
    "determinism": _check_determinism,
}


def run_selftest(seed=None):
    """
    Run every invariant check and report each outcome.

    A check that raises counts as failed.

    Parameters
    ----------
    seed : int
        seed for the random cases. if None, use settings.default_seed

    Returns
    -------
    results : dict
        check name to bool
    """
    if seed is None:
        seed = settings.default_seed

    results = {}
    for name, check in CHECKS.items():
        rng = tc.make_rng(seed)
        start = time.perf_counter()
        try:
            passed = bool(check(rng))
        except Exception as e:
            utils.log(f"Selftest {name} raised {type(e).__name__}: {e}", level=lg.ERROR)
            passed = False
        elapsed = time.perf_counter() - start
        results[name] = passed
        level = lg.INFO if passed else lg.ERROR
        utils.log(f"Selftest {name}: {'pass' if passed else 'FAIL'} in {elapsed:.2f}s", level=level)

    utils.log(f"Selftest passed {sum(results.values())} of {len(results)} checks")
    return results
