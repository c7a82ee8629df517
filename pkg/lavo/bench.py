"""Measure attention cost against sequence length and check its growth."""

import argparse
import logging as lg
import os
import sys
import time
import tracemalloc
from dataclasses import asdict
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import lavo_layer
from . import oracles
from . import plot
from . import settings
from . import tensor_core as tc
from . import utils
from ._errors import InsufficientDataError
from .lavo_layer import LavoConfig

CSV_COLUMNS = [
    "mechanism",
    "mode",
    "n",
    "d_model",
    "heads",
    "num_bases",
    "window",
    "seed",
    "wall_ns",
    "peak_bytes",
]
MECHANISMS = ["lavo", "vanilla", "naive", "local"]
MODES = ["forward", "decode"]

# growth limits checked by check_trends
LINEAR_SLOPE_MAX = 1.2
QUADRATIC_SLOPE_MIN = 1.7
SPEEDUP_MIN = 4.0
DECODE_DRIFT_MAX = 0.3


@dataclass
class BenchRecord:
    """
    One timed (mechanism, mode, n) cell of a benchmark grid.

    A record with a failure reason has no timing; it is written to CSV with
    "-" in wall_ns and peak_bytes.
    """

    mechanism: str
    mode: str
    n: int
    d_model: int
    heads: int
    num_bases: int
    window: int
    seed: int
    wall_ns: int = None
    peak_bytes: object = None
    failure: str = None

    @property
    def ok(self):
        """Get whether the cell was timed."""
        return self.failure is None

    def to_row(self):
        """Convert to a CSV row dict."""
        row = {col: getattr(self, col) for col in CSV_COLUMNS}
        if not self.ok:
            row["wall_ns"] = "-"
            row["peak_bytes"] = "-"
        return row


def make_inputs(n, d_model, seed, dtype=None):
    """
    Draw a deterministic input sequence.

    Parameters
    ----------
    n : int
        sequence length
    d_model : int
        model width
    seed : int
        identical seeds give identical inputs
    dtype : string or numpy.dtype
        if None, use settings.bench_dtype

    Returns
    -------
    x : numpy.ndarray
        shape (n, d_model)
    """
    if dtype is None:
        dtype = settings.bench_dtype
    return tc.gaussian_matrix(tc.make_rng(seed), n, d_model, dtype)


def _mechanism_fn(mechanism, mode, x, params, config):
    if mode == "decode":

        def decode():
            cache = lavo_layer.CausalCache(params, config)
            for t in range(x.shape[0]):
                lavo_layer.step(cache, x[t])

        return decode

    if mechanism == "lavo":
        return lambda: lavo_layer.forward(x, params, config)
    elif mechanism == "vanilla":
        return lambda: oracles.vanilla_layer(x, params, config)
    elif mechanism == "naive":
        return lambda: oracles.naive_causal_lavo(x, params, config)
    else:
        return lambda: oracles.local_only(x, params, config)


def estimate_peak_bytes(mechanism, mode, config, n, itemsize=4):
    """
    Estimate the peak transient allocation of one benchmarked call.

    Parameters
    ----------
    mechanism : string
        one of MECHANISMS
    mode : string
        one of MODES
    config : LavoConfig
    n : int
        sequence length
    itemsize : int
        bytes per scalar

    Returns
    -------
    peak_bytes : int
    """
    d, d_head, r, w = config.d_model, config.d_head, config.num_bases, config.window
    if mode == "decode":
        # ring keys, ring values, pending outputs, memory sum
        return itemsize * config.heads * (3 * w * d_head + r)

    projections = 4 * n * d
    width = tc.band_width(w, config.causal)
    if mechanism == "lavo":
        per_head = 2 * n * width + 4 * n * r + 3 * n * d_head
    elif mechanism == "vanilla":
        per_head = 2 * n * n + n * d_head
    elif mechanism == "naive":
        per_head = 2 * n * d_head + 2 * n * r
    else:
        per_head = 2 * w * 2 * w + n * d_head
    return itemsize * (projections + config.heads * per_head)


def _measure_peak(fn):
    tracemalloc.start()
    try:
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak


def _time_cell(fn, repetitions, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        start = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - start)
    return max(1, int(np.median(times)))


def run_bench(
    lengths,
    mechanisms=("lavo",),
    mode="forward",
    d_model=64,
    heads=2,
    num_bases=16,
    window=16,
    seed=None,
    repetitions=5,
    warmup=1,
    dtype=None,
    measure_memory=True,
):
    """
    Time mechanisms over a grid of sequence lengths.

    Every cell is run warmup times untimed, then timed repetitions times;
    the median is recorded. Peak allocation is traced in one further
    untimed run, or estimated when measure_memory is False. A cell that
    runs out of memory becomes a failure row instead of aborting the grid,
    as does asking for decode timings of a mechanism without an incremental
    path.

    Parameters
    ----------
    lengths : list of int
        sequence lengths, sorted ascending
    mechanisms : list of string
        names from MECHANISMS
    mode : string
        "forward" times one call over the whole sequence, "decode" times the
        step loop from t=1 to n
    d_model : int
        model width
    heads : int
        number of heads
    num_bases : int
        orthogonal basis rows per head
    window : int
        local window size
    seed : int
        seed for inputs and parameters. if None, use settings.default_seed
    repetitions : int
        timed runs per cell, at least 3
    warmup : int
        untimed runs per cell before timing
    dtype : string or numpy.dtype
        if None, use settings.bench_dtype
    measure_memory : bool
        if True, trace allocations; otherwise record a model-based estimate
        prefixed with "est:"

    Returns
    -------
    records : list of BenchRecord
    """
    lengths = [int(n) for n in lengths]
    if lengths != sorted(lengths):
        raise ValueError(f"lengths {lengths} must be sorted ascending")
    if repetitions < 3:
        raise ValueError(f"repetitions={repetitions} must be at least 3")
    if mode not in MODES:
        raise ValueError(f'unrecognized mode "{mode}", must be one of {MODES}')
    unknown = [m for m in mechanisms if m not in MECHANISMS]
    if unknown:
        raise ValueError(f"unrecognized mechanisms {unknown}, must be among {MECHANISMS}")
    if seed is None:
        seed = settings.default_seed
    if dtype is None:
        dtype = settings.bench_dtype

    config = LavoConfig(d_model, heads, num_bases, window, seed=seed)
    params = lavo_layer.init_params(config, dtype)
    itemsize = np.dtype(dtype).itemsize

    records = []
    for mechanism in mechanisms:
        for n in lengths:
            record = BenchRecord(mechanism, mode, n, d_model, heads, num_bases, window, seed)
            records.append(record)
            if mode == "decode" and mechanism != "lavo":
                record.failure = "decode unsupported"
                utils.log(f"Skipped {mechanism} decode at n={n}: no incremental path")
                continue

            x = make_inputs(n, d_model, seed, dtype)
            fn = _mechanism_fn(mechanism, mode, x, params, config)
            try:
                record.wall_ns = _time_cell(fn, repetitions, warmup)
                if measure_memory:
                    record.peak_bytes = _measure_peak(fn)
                else:
                    estimate = estimate_peak_bytes(mechanism, mode, config, n, itemsize)
                    record.peak_bytes = f"est:{estimate}"
            except MemoryError:
                record.wall_ns = None
                record.failure = "out of memory"
                utils.log(f"{mechanism} {mode} ran out of memory at n={n}", level=lg.WARNING)
                continue

            utils.log(f"Timed {mechanism} {mode} at n={n}: median {record.wall_ns} ns")

    return records


def records_to_frame(records):
    """
    Convert benchmark records to a DataFrame.

    Parameters
    ----------
    records : list of BenchRecord
        if a DataFrame is passed, it is returned as a copy

    Returns
    -------
    df : pandas.DataFrame
        the CSV columns plus "failure" and a boolean "ok"; wall_ns is float
        with NaN on failure rows
    """
    if isinstance(records, pd.DataFrame):
        return records.copy()

    columns = CSV_COLUMNS + ["failure"]
    df = pd.DataFrame([asdict(r) for r in records], columns=columns)
    df["ok"] = df["failure"].isna()
    df["wall_ns"] = pd.to_numeric(df["wall_ns"], errors="coerce")
    return df


def _slope(n, t):
    n = np.asarray(n, dtype=float)
    t = np.asarray(t, dtype=float)
    if len(np.unique(n)) < 3:
        raise InsufficientDataError(
            f"need at least 3 distinct lengths to fit a slope, got {len(np.unique(n))}"
        )
    slope, _ = np.polyfit(np.log(n), np.log(t), 1)
    return float(slope)


def fit_loglog_slope(records):
    """
    Fit the least-squares slope of ln(wall time) against ln(n).

    A slope near 1 means time grows linearly with sequence length, near 2
    quadratically. Failure rows are ignored.

    Parameters
    ----------
    records : list of BenchRecord or pandas.DataFrame
        records of a single mechanism and mode

    Returns
    -------
    slope : float
    """
    df = records_to_frame(records)
    if len(df[["mechanism", "mode"]].drop_duplicates()) > 1:
        raise ValueError("records must share one mechanism and one mode")
    df = df[df["ok"]]
    return _slope(df["n"], df["wall_ns"])


def _predicted_flops(mechanism, mode, config, n):
    d, d_head, r = config.d_model, config.d_head, config.num_bases
    if mechanism == "lavo" or mode == "decode":
        return lavo_layer.complexity_audit(config, n)
    elif mechanism == "vanilla":
        return 8 * n * d ** 2 + config.heads * 4 * n * n * d_head
    elif mechanism == "naive":
        local = lavo_layer.complexity_audit(config, n, num_bases=0)
        return local + config.heads * n * n * r * d_head
    else:
        return lavo_layer.complexity_audit(config, n, num_bases=0)


def summarize(records):
    """
    Summarize growth per mechanism and mode.

    Parameters
    ----------
    records : list of BenchRecord or pandas.DataFrame

    Returns
    -------
    summary : pandas.DataFrame
        one row per (mechanism, mode) with the number of timed points, the
        measured log-log slope (NaN below 3 lengths), the slope predicted by
        the closed-form operation counts, the largest timed n and its wall
        time
    """
    df = records_to_frame(records)
    rows = []
    for (mechanism, mode), group in df.groupby(["mechanism", "mode"], sort=False):
        timed = group[group["ok"]].sort_values("n")
        row = {
            "mechanism": mechanism,
            "mode": mode,
            "points": len(timed),
            "failures": int((~group["ok"]).sum()),
            "slope": np.nan,
            "flops_slope": np.nan,
            "n_max": np.nan,
            "wall_ns_at_n_max": np.nan,
        }
        if len(timed) > 0:
            row["n_max"] = int(timed["n"].iloc[-1])
            row["wall_ns_at_n_max"] = float(timed["wall_ns"].iloc[-1])
        if timed["n"].nunique() >= 3:
            first = timed.iloc[0]
            config = LavoConfig(
                int(first["d_model"]),
                int(first["heads"]),
                int(first["num_bases"]),
                int(first["window"]),
            )
            flops = [_predicted_flops(mechanism, mode, config, int(n)) for n in timed["n"]]
            row["slope"] = _slope(timed["n"], timed["wall_ns"])
            row["flops_slope"] = _slope(timed["n"], flops)
        rows.append(row)
    return pd.DataFrame(rows, columns=list(rows[0]) if rows else ["mechanism", "mode"])


def _summary_row(summary, mechanism, mode):
    match = summary[(summary["mechanism"] == mechanism) & (summary["mode"] == mode)]
    if len(match) == 0:
        return None
    return match.iloc[0]


def check_trends(summary, decode_times=None):
    """
    Check the desk-scale complexity separations on a benchmark summary.

    Only the checks whose inputs are present are evaluated: the linear
    slope of the layer forward and of decoding, the superlinear slopes of
    the vanilla and naive per-step baselines, the speedup of the layer over
    vanilla attention at the largest shared length, and the drift of the
    per-step decode time.

    Parameters
    ----------
    summary : pandas.DataFrame
        as returned by summarize
    decode_times : dict
        position to per-step nanoseconds, as returned by time_decode_steps;
        the drift compares the last position to the first

    Returns
    -------
    checks : dict
        check name to bool
    """
    checks = {}
    for mode in MODES:
        row = _summary_row(summary, "lavo", mode)
        if row is not None and not np.isnan(row["slope"]):
            checks[f"lavo_{mode}_linear"] = bool(row["slope"] <= LINEAR_SLOPE_MAX)

    for mechanism in ("vanilla", "naive"):
        row = _summary_row(summary, mechanism, "forward")
        if row is not None and not np.isnan(row["slope"]):
            checks[f"{mechanism}_superlinear"] = bool(row["slope"] >= QUADRATIC_SLOPE_MIN)

    lavo = _summary_row(summary, "lavo", "forward")
    vanilla = _summary_row(summary, "vanilla", "forward")
    if lavo is not None and vanilla is not None and lavo["n_max"] == vanilla["n_max"]:
        speedup = vanilla["wall_ns_at_n_max"] / lavo["wall_ns_at_n_max"]
        checks["lavo_speedup_over_vanilla"] = bool(speedup >= SPEEDUP_MIN)

    if decode_times:
        positions = sorted(decode_times)
        first, last = decode_times[positions[0]], decode_times[positions[-1]]
        checks["decode_constant_per_step"] = bool(abs(last - first) / first < DECODE_DRIFT_MAX)

    for name, passed in checks.items():
        utils.log(f"Trend {name}: {'pass' if passed else 'FAIL'}")
    return checks


def time_decode_steps(config, positions, repetitions=20, dtype=None):
    """
    Time single decode steps at chosen positions.

    Each repetition decodes a fresh sequence up to the largest position and
    records how long the step at each requested position took.

    Parameters
    ----------
    config : LavoConfig
        causal layer configuration
    positions : list of int
        zero-based step indices to time
    repetitions : int
        number of decoded sequences
    dtype : string or numpy.dtype
        if None, use settings.bench_dtype

    Returns
    -------
    decode_times : dict
        position to median nanoseconds of that step
    """
    if dtype is None:
        dtype = settings.bench_dtype
    params = lavo_layer.init_params(config, dtype)
    wanted = set(int(p) for p in positions)
    x = make_inputs(max(wanted) + 1, config.d_model, config.seed, dtype)

    timings = {p: [] for p in wanted}
    for _ in range(repetitions):
        cache = lavo_layer.CausalCache(params, config)
        for t in range(x.shape[0]):
            start = time.perf_counter_ns()
            lavo_layer.step(cache, x[t])
            elapsed = time.perf_counter_ns() - start
            if t in wanted:
                timings[t].append(elapsed)

    return {p: float(np.median(timings[p])) for p in sorted(wanted)}


def write_csv(records, filepath=None):
    """
    Write benchmark records to a CSV file.

    The file is UTF-8 with LF line endings and the header
    mechanism,mode,n,d_model,heads,num_bases,window,seed,wall_ns,peak_bytes;
    an empty record list gives a header-only file.

    Parameters
    ----------
    records : list of BenchRecord
    filepath : string
        path to the file. if None, use settings.data_folder/bench.csv

    Returns
    -------
    filepath : string
    """
    if filepath is None:
        filepath = os.path.join(settings.data_folder, "bench.csv")

    df = pd.DataFrame([r.to_row() for r in records], columns=CSV_COLUMNS)
    try:
        utils.make_folder(filepath)
        df.to_csv(filepath, index=False, encoding="utf-8", lineterminator="\n")
    except OSError as e:
        raise OSError(f'cannot write benchmark CSV to "{filepath}": {e}')

    utils.log(f'Saved {len(df)} benchmark rows to "{filepath}"')
    return filepath


def read_csv(filepath):
    """
    Read a benchmark CSV written by write_csv.

    Parameters
    ----------
    filepath : string

    Returns
    -------
    df : pandas.DataFrame
        same columns as records_to_frame
    """
    df = pd.read_csv(filepath, dtype=str, keep_default_na=False)
    for col in ["n", "d_model", "heads", "num_bases", "window", "seed"]:
        df[col] = df[col].astype(int)
    df["ok"] = df["wall_ns"] != "-"
    df["failure"] = np.where(df["ok"], None, "failed")
    df["wall_ns"] = pd.to_numeric(df["wall_ns"], errors="coerce")
    return df


def _int_list(value):
    return [int(v) for v in value.split(",") if v]


def _parse_args(argv):
    parser = argparse.ArgumentParser(
        prog="lavo-bench", description="Time attention mechanisms against sequence length."
    )
    parser.add_argument("--mechanisms", default="lavo,vanilla,naive,local")
    parser.add_argument("--mode", choices=MODES, default="forward")
    parser.add_argument("--lengths", type=_int_list, default=[1024, 2048, 4096])
    parser.add_argument("--d-model", type=int, default=64)
    parser.add_argument("--heads", type=int, default=2)
    parser.add_argument("--num-bases", type=int, default=16)
    parser.add_argument("--window", type=int, default=16)
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--warmup", type=int, default=1)
    parser.add_argument("--seed", type=int, default=settings.default_seed)
    parser.add_argument("--out", default=None, help="CSV path, default data_folder/bench.csv")
    parser.add_argument("--strict", action="store_true", help="exit nonzero on failure rows")
    parser.add_argument("--plot", default=None, help="save a log-log figure to this path")
    parser.add_argument("--no-memory", action="store_true", help="estimate peak bytes")
    return parser.parse_args(argv)


def main(argv=None):
    """
    Run the benchmark command line tool.

    Parameters
    ----------
    argv : list of string
        arguments; if None, read sys.argv

    Returns
    -------
    exit_code : int
    """
    args = _parse_args(argv)
    utils.config(log_console=True)
    try:
        records = run_bench(
            args.lengths,
            mechanisms=[m for m in args.mechanisms.split(",") if m],
            mode=args.mode,
            d_model=args.d_model,
            heads=args.heads,
            num_bases=args.num_bases,
            window=args.window,
            seed=args.seed,
            repetitions=args.reps,
            warmup=args.warmup,
            measure_memory=not args.no_memory,
        )
        write_csv(records, args.out)
    except (ValueError, OSError) as e:
        print(f"lavo-bench: {e}", file=sys.stderr)
        return 2

    summary = summarize(records)
    print(summary.to_string(index=False))
    check_trends(summary)
    if args.plot:
        plot.plot_scaling(
            records_to_frame(records), save=True, show=False, close=True, filepath=args.plot
        )

    failures = [r for r in records if not r.ok]
    if args.strict and failures:
        for r in failures:
            message = f"{r.mechanism} {r.mode} n={r.n} failed: {r.failure}"
            print(f"lavo-bench: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
