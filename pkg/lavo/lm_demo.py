"""Train and evaluate a tiny byte-level causal language model built on the layer."""

import argparse
import logging as lg
import math
import os
import sys
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import replace

import numpy as np
import pandas as pd

from . import autodiff
from . import code_memory
from . import io
from . import lavo_layer
from . import settings
from . import tensor_core as tc
from . import utils
from ._errors import CorruptCheckpointError
from ._errors import DataError
from ._errors import NonFiniteLossError
from .autodiff import Parameter
from .autodiff import Tape
from .lavo_layer import LavoConfig

# 256 byte values plus one padding id
VOCAB_SIZE = 257

# layer i draws its parameters from seed + LAYER_SEED_STRIDE * (i + 1)
LAYER_SEED_STRIDE = 7919
FFN_SEED_OFFSET = 104_729


@dataclass(frozen=True)
class LmConfig:
    """
    Shape, ablation toggles and optimizer settings of the language model.

    Parameters
    ----------
    vocab_size : int
        fixed at 257
    d_model : int
        model width
    n_layers : int
        number of attention blocks
    heads : int
        attention heads per block
    num_bases : int
        orthogonal basis rows per head
    window : int
        local window size
    ctx_len : int
        training sequence length, at least window
    use_epe : bool
        add the learned relative position bias
    use_dissection : bool
        compress windowed local outputs instead of the raw prefix
    lr : float
        Adam learning rate
    steps : int
        optimizer steps
    batch : int
        sequences per step
    seed : int
        seed for initialization and batch sampling
    train_bases : bool
        if True, orthogonal bases are trained too
    """

    vocab_size: int = VOCAB_SIZE
    d_model: int = 64
    n_layers: int = 2
    heads: int = 2
    num_bases: int = 16
    window: int = 16
    ctx_len: int = 256
    use_epe: bool = True
    use_dissection: bool = True
    lr: float = 3e-4
    steps: int = 2000
    batch: int = 8
    seed: int = 42
    train_bases: bool = False

    def __post_init__(self):
        """Validate the configuration."""
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError(f"vocab_size must be {VOCAB_SIZE}, got {self.vocab_size}")
        if self.ctx_len < self.window:
            raise ValueError(f"ctx_len={self.ctx_len} must be at least window={self.window}")
        if self.n_layers < 1 or self.batch < 1 or self.steps < 0:
            raise ValueError("n_layers and batch must be positive and steps non-negative")
        # validates the attention shape
        self.layer_config(0)

    def layer_config(self, i):
        """
        Get the attention configuration of block i.

        Parameters
        ----------
        i : int
            block index

        Returns
        -------
        config : LavoConfig
        """
        return LavoConfig(
            d_model=self.d_model,
            heads=self.heads,
            num_bases=self.num_bases,
            window=self.window,
            use_epe=self.use_epe,
            use_dissection=self.use_dissection,
            causal=True,
            train_bases=self.train_bases,
            seed=self.seed + LAYER_SEED_STRIDE * (i + 1),
        )

    def to_dict(self):
        """Convert the configuration to a plain dict."""
        return asdict(self)


class CorpusStream:
    """
    Raw bytes split into a training head and a held-out tail, with a seeded sampler.

    Parameters
    ----------
    data : bytes
        the corpus
    seed : int
        sampler seed. if None, use settings.default_seed
    holdout_fraction : float
        share of the corpus tail reserved for evaluation. if None, use
        settings.holdout_fraction
    """

    def __init__(self, data, seed=None, holdout_fraction=None):
        """Create stream."""
        if holdout_fraction is None:
            holdout_fraction = settings.holdout_fraction
        if not 0 <= holdout_fraction < 1:
            raise ValueError(f"holdout_fraction={holdout_fraction} must lie in [0, 1)")
        self.data = np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)
        split = len(self.data) - int(len(self.data) * holdout_fraction)
        self.splits = {"train": self.data[:split], "heldout": self.data[split:]}
        self.reseed(settings.default_seed if seed is None else seed)

    @classmethod
    def from_files(cls, filepaths, seed=None, holdout_fraction=None):
        """
        Read and concatenate one or more files.

        Parameters
        ----------
        filepaths : string or list of string
            paths to text files
        seed : int
            sampler seed
        holdout_fraction : float
            see CorpusStream

        Returns
        -------
        corpus : CorpusStream
        """
        if isinstance(filepaths, str):
            filepaths = [filepaths]
        chunks = []
        for filepath in filepaths:
            with open(filepath, "rb") as f:
                chunks.append(f.read())
        data = b"".join(chunks)
        utils.log(f"Read {len(data):,} corpus bytes from {len(chunks)} file(s)")
        return cls(data, seed, holdout_fraction)

    def __len__(self):
        """Get the total number of bytes."""
        return len(self.data)

    def split(self, name):
        """Get the byte ids of the "train" or "heldout" split."""
        if name not in self.splits:
            raise ValueError(f'unrecognized split "{name}", must be "train" or "heldout"')
        return self.splits[name]

    def reseed(self, seed):
        """Restart the sampler from a seed."""
        self.rng = tc.make_rng(seed)

    def next_batch(self, batch, ctx_len, split="train"):
        """
        Sample random contiguous training sequences.

        Parameters
        ----------
        batch : int
            number of sequences
        ctx_len : int
            tokens per sequence
        split : string
            "train" or "heldout"

        Returns
        -------
        inputs, targets : tuple of numpy.ndarray
            each shape (batch, ctx_len); targets are inputs shifted by one
        """
        data = self.split(split)
        if len(data) < ctx_len + 1:
            raise DataError(f"{split} split holds {len(data)} bytes, need {ctx_len + 1}")
        starts = self.rng.integers(0, len(data) - ctx_len, size=batch)
        inputs = np.stack([data[s : s + ctx_len] for s in starts])
        targets = np.stack([data[s + 1 : s + ctx_len + 1] for s in starts])
        return inputs, targets

    def windows(self, length, split="heldout"):
        """
        Yield consecutive non-overlapping evaluation windows.

        When the split is shorter than one window, it is yielded whole.

        Parameters
        ----------
        length : int
            tokens per window
        split : string
            "train" or "heldout"

        Yields
        ------
        inputs, targets : tuple of numpy.ndarray
            each of one window's length
        """
        data = self.split(split)
        if len(data) < 2:
            raise DataError(f"{split} split holds {len(data)} bytes, too few to evaluate")
        if len(data) < length + 1:
            utils.log(
                f"{split} split is shorter than eval_len={length}, evaluating {len(data) - 1}",
                level=lg.WARNING,
            )
            yield data[:-1], data[1:]
            return
        for start in range(0, len(data) - length, length):
            yield data[start : start + length], data[start + 1 : start + length + 1]


class _Block:
    """Pre-norm residual block: attention then a gelu feed-forward layer."""

    def __init__(self, config, i, dtype):
        d = config.d_model
        self.attn_config = config.layer_config(i)
        self.attn = lavo_layer.init_params(self.attn_config, dtype)
        rng = tc.make_rng(self.attn_config.seed + FFN_SEED_OFFSET)
        self.ln1_gain = Parameter(np.ones((1, d), dtype=dtype))
        self.ln1_bias = Parameter(np.zeros((1, d), dtype=dtype))
        self.ln2_gain = Parameter(np.ones((1, d), dtype=dtype))
        self.ln2_bias = Parameter(np.zeros((1, d), dtype=dtype))
        self.w1 = Parameter(tc.gaussian_matrix(rng, d, 4 * d, dtype) / math.sqrt(d))
        self.b1 = Parameter(np.zeros((1, 4 * d), dtype=dtype))
        self.w2 = Parameter(tc.gaussian_matrix(rng, 4 * d, d, dtype) / math.sqrt(4 * d))
        self.b2 = Parameter(np.zeros((1, d), dtype=dtype))

    def named_parameters(self, prefix):
        named = {
            f"{prefix}ln1.gain": self.ln1_gain,
            f"{prefix}ln1.bias": self.ln1_bias,
        }
        named.update(self.attn.named_parameters(f"{prefix}attn."))
        named.update(
            {
                f"{prefix}ln2.gain": self.ln2_gain,
                f"{prefix}ln2.bias": self.ln2_bias,
                f"{prefix}ffn.w1": self.w1,
                f"{prefix}ffn.b1": self.b1,
                f"{prefix}ffn.w2": self.w2,
                f"{prefix}ffn.b2": self.b2,
            }
        )
        return named

    def forward(self, x, tape):
        h = tape.layer_norm(x, tape.param(self.ln1_gain), tape.param(self.ln1_bias))
        x = tape.add(x, lavo_layer.forward(h, self.attn, self.attn_config, tape))
        h = tape.layer_norm(x, tape.param(self.ln2_gain), tape.param(self.ln2_bias))
        h = tape.gelu(tape.add_row(tape.matmul(h, tape.param(self.w1)), tape.param(self.b1)))
        h = tape.add_row(tape.matmul(h, tape.param(self.w2)), tape.param(self.b2))
        return tape.add(x, h)

    def step(self, cache, x):
        h = tc.layer_norm_rows(x, self.ln1_gain.value, self.ln1_bias.value)
        x = x + lavo_layer.step(cache, h[0])[None, :]
        h = tc.layer_norm_rows(x, self.ln2_gain.value, self.ln2_bias.value)
        h = tc.gelu(tc.matmul(h, self.w1.value) + self.b1.value)
        return x + tc.matmul(h, self.w2.value) + self.b2.value


class LmModel:
    """
    Byte embedding, a stack of attention blocks and a tied output head.

    There is no absolute position embedding; order enters only through the
    causal attention. The final layer norm starts with zero gain and bias,
    so every logit is zero at initialization and the first loss is ln(257).

    Parameters
    ----------
    config : LmConfig
    dtype : string or numpy.dtype
        if None, use settings.default_dtype
    """

    def __init__(self, config, dtype=None):
        """Create a freshly initialized model."""
        if dtype is None:
            dtype = settings.default_dtype
        self.config = config
        d = config.d_model
        rng = tc.make_rng(config.seed)
        self.embed = Parameter(tc.gaussian_matrix(rng, VOCAB_SIZE, d, dtype) / math.sqrt(d))
        self.blocks = [_Block(config, i, dtype) for i in range(config.n_layers)]
        self.lnf_gain = Parameter(np.zeros((1, d), dtype=dtype))
        self.lnf_bias = Parameter(np.zeros((1, d), dtype=dtype))

        for name, p in self.named_parameters().items():
            p.name = name

    def named_parameters(self):
        """
        Map dotted names to parameters, in checkpoint order.

        Returns
        -------
        named : dict
        """
        named = {"embed": self.embed}
        for i, block in enumerate(self.blocks):
            named.update(block.named_parameters(f"layers.{i}."))
        named["lnf.gain"] = self.lnf_gain
        named["lnf.bias"] = self.lnf_bias
        return named

    def parameters(self):
        """List every parameter, trainable or not."""
        return list(self.named_parameters().values())

    def forward_logits(self, ids, tape=None):
        """
        Compute next-byte logits for one sequence.

        Parameters
        ----------
        ids : array-like of int
            byte ids, length n >= 1
        tape : Tape
            if None, compute without recording

        Returns
        -------
        logits : Node
            shape (n, 257)
        """
        if tape is None:
            tape = Tape(record=False)
        embed = tape.param(self.embed)
        x = tape.gather_rows(embed, ids)
        for block in self.blocks:
            x = block.forward(x, tape)
        x = tape.layer_norm(x, tape.param(self.lnf_gain), tape.param(self.lnf_bias))
        return tape.matmul(x, tape.transpose(embed))

    def loss(self, inputs, targets, tape=None):
        """
        Compute the mean next-byte cross-entropy of a batch.

        Parameters
        ----------
        inputs : numpy.ndarray
            shape (batch, n)
        targets : numpy.ndarray
            shape (batch, n)
        tape : Tape
            if None, compute without recording

        Returns
        -------
        loss : Node
            shape (1, 1)
        """
        if tape is None:
            tape = Tape(record=False)
        total = None
        for ids, tgt in zip(inputs, targets):
            ce = tape.cross_entropy_rows(self.forward_logits(ids, tape), tgt)
            total = ce if total is None else tape.add(total, ce)
        return tape.scale(total, 1.0 / len(inputs))

    def decode_logprobs(self, ids, targets):
        """
        Score a sequence one byte at a time with constant state per layer.

        Each block carries a CausalCache, so memory does not grow with the
        sequence length.

        Parameters
        ----------
        ids : array-like of int
            input byte ids
        targets : array-like of int
            next-byte ids, same length as ids

        Returns
        -------
        log_probs : numpy.ndarray
            log-probability of each target, shape (n,)
        """
        caches = [lavo_layer.CausalCache(b.attn, b.attn_config) for b in self.blocks]
        out = np.zeros(len(ids), dtype=self.embed.value.dtype)
        for t, (token, target) in enumerate(zip(ids, targets)):
            x = self.embed.value[int(token)][None, :]
            for block, cache in zip(self.blocks, caches):
                x = block.step(cache, x)
            x = tc.layer_norm_rows(x, self.lnf_gain.value, self.lnf_bias.value)
            logits = tc.matmul(x, tc.transpose(self.embed.value))
            out[t] = tc.log_softmax_rows(logits)[0, int(target)]
        return out

    def to_checkpoint(self):
        """
        Pack the configuration and every parameter into a Checkpoint.

        Returns
        -------
        checkpoint : io.Checkpoint
        """
        tensors = {name: p.value for name, p in self.named_parameters().items()}
        return io.Checkpoint({"model": "lavo-lm", "lm": self.config.to_dict()}, tensors)

    @classmethod
    def from_checkpoint(cls, checkpoint, dtype=None):
        """
        Rebuild a model from a Checkpoint.

        Frozen bases are rebuilt from the layer seeds at full precision; the
        stored 32-bit copies must match them and are otherwise discarded.

        Parameters
        ----------
        checkpoint : io.Checkpoint
        dtype : string or numpy.dtype
            if None, use settings.default_dtype

        Returns
        -------
        model : LmModel
        """
        if checkpoint.config.get("model") != "lavo-lm":
            raise CorruptCheckpointError("checkpoint does not hold a lavo-lm model")
        model = cls(LmConfig(**checkpoint.config["lm"]), dtype)
        named = model.named_parameters()
        if set(named) != set(checkpoint.tensors):
            missing = sorted(set(named) - set(checkpoint.tensors))
            extra = sorted(set(checkpoint.tensors) - set(named))
            raise CorruptCheckpointError(f"tensor names differ: missing {missing}, extra {extra}")
        for name, p in named.items():
            tensor = checkpoint.tensors[name]
            if tensor.shape != p.shape:
                raise CorruptCheckpointError(f'tensor "{name}" is {tensor.shape}, not {p.shape}')
            if isinstance(p, code_memory.OrthogonalBasis) and p.frozen:
                if not np.array_equal(p.value.astype("<f4"), tensor):
                    raise CorruptCheckpointError(
                        f'frozen basis "{name}" does not match the one its seed generates'
                    )
                continue
            p.value = tensor.astype(p.value.dtype)
        return model


def train(config, corpus, filepath=None, model=None, save=True):
    """
    Train a language model with Adam on next-byte cross-entropy.

    Batches come from the corpus sampler reseeded with config.seed, so two
    runs with the same configuration and corpus are bitwise identical.

    Parameters
    ----------
    config : LmConfig
    corpus : CorpusStream
        at least 10 * ctx_len bytes
    filepath : string
        where to save the final checkpoint. if None, use
        settings.data_folder/model.lavo
    model : LmModel
        if not None, continue training this model in place
    save : bool
        if True, save the final checkpoint

    Returns
    -------
    checkpoint, loss_trace : tuple
        the final io.Checkpoint and the loss at every step
    """
    if len(corpus) < 10 * config.ctx_len:
        raise DataError(
            f"corpus holds {len(corpus)} bytes, need at least {10 * config.ctx_len} "
            f"for ctx_len={config.ctx_len}"
        )
    if model is None:
        model = LmModel(config)
    corpus.reseed(config.seed)
    params = [p for p in model.parameters() if p.trainable]
    utils.log(f"Training {len(params)} parameter tensors for {config.steps} steps")

    loss_trace = []
    for step in range(config.steps):
        inputs, targets = corpus.next_batch(config.batch, config.ctx_len)
        tape = Tape()
        loss = model.loss(inputs, targets, tape)
        value = float(loss.value[0, 0])
        try:
            tc.check_finite(loss.value, what=f"loss at step {step}")
        except ValueError as e:
            utils.log(f"Loss became {value} at step {step}", level=lg.ERROR)
            raise NonFiniteLossError(f"loss became {value} at step {step}", step=step) from e

        autodiff.zero_grad(params)
        autodiff.backward(tape, loss)
        autodiff.adam_step(params, config.lr)
        loss_trace.append(value)
        if step % settings.log_every == 0 or step == config.steps - 1:
            utils.log(f"Step {step}: loss {value:.4f}")

    checkpoint = model.to_checkpoint()
    if save:
        if filepath is None:
            filepath = os.path.join(settings.data_folder, "model.lavo")
        io.save_checkpoint(checkpoint, filepath)
    return checkpoint, loss_trace


def eval_ppl(model, corpus, eval_len, split="heldout", decode=False, max_windows=None):
    """
    Measure perplexity over non-overlapping windows of a corpus split.

    A split shorter than eval_len is scored whole. A split of fewer than 2
    bytes has no next byte to score and raises DataError.

    Parameters
    ----------
    model : LmModel or io.Checkpoint
        the model to evaluate
    corpus : CorpusStream
    eval_len : int
        tokens per window; may exceed the training context
    split : string
        "heldout" or "train"
    decode : bool
        if True, score byte by byte with constant-state caches instead of a
        whole-window forward pass
    max_windows : int
        if not None, evaluate at most this many windows

    Returns
    -------
    ppl : float
        exp of the mean next-byte cross-entropy
    """
    if eval_len < 1:
        raise ValueError(f"eval_len={eval_len} must be at least 1")
    if isinstance(model, io.Checkpoint):
        model = LmModel.from_checkpoint(model)

    nll = 0.0
    count = 0
    for i, (inputs, targets) in enumerate(corpus.windows(eval_len, split)):
        if max_windows is not None and i >= max_windows:
            break
        if decode:
            log_probs = model.decode_logprobs(inputs, targets)
        else:
            logits = model.forward_logits(inputs).value
            log_probs = tc.log_softmax_rows(logits)[np.arange(len(targets)), targets]
        nll -= float(log_probs.sum())
        count += len(targets)

    ppl = math.exp(nll / count)
    utils.log(f"Perplexity {ppl:.3f} at eval_len={eval_len} over {count:,} {split} bytes")
    return ppl


def sweep_windows(config, corpus, windows, eval_lens, max_windows=None):
    """
    Train one model per window size and evaluate each at several lengths.

    No window size is favored; the table only exposes how perplexity moves
    with w at this scale.

    Parameters
    ----------
    config : LmConfig
        base configuration; window is replaced per run and ctx_len raised to
        at least the window
    corpus : CorpusStream
    windows : list of int
        window sizes to train
    eval_lens : list of int
        evaluation lengths
    max_windows : int
        passed to eval_ppl

    Returns
    -------
    df : pandas.DataFrame
        columns window, eval_len, ppl
    """
    rows = []
    for w in windows:
        run = replace(config, window=w, ctx_len=max(config.ctx_len, w))
        model = LmModel(run)
        train(run, corpus, model=model, save=False)
        for eval_len in eval_lens:
            ppl = eval_ppl(model, corpus, eval_len, max_windows=max_windows)
            rows.append({"window": w, "eval_len": eval_len, "ppl": ppl})
    return pd.DataFrame(rows, columns=["window", "eval_len", "ppl"])


def _int_list(value):
    return [int(v) for v in value.split(",") if v]


def _parse_args(argv):
    parser = argparse.ArgumentParser(prog="lavo-lm", description="Byte-level language model demo.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a text corpus")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--num-bases", type=int, default=16)
    p.add_argument("--window", type=int, default=16)
    p.add_argument("--ctx", type=int, default=256)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=settings.default_seed)
    p.add_argument("--no-epe", action="store_true")
    p.add_argument("--no-dissect", action="store_true")
    p.add_argument("--out", default="model.lavo")

    p = sub.add_parser("eval", help="measure perplexity at several lengths")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--eval-lens", type=_int_list, default=[256, 512, 1024, 4096])
    p.add_argument("--split", choices=["heldout", "train"], default="heldout")
    p.add_argument("--decode", action="store_true", help="score with constant-state decoding")
    p.add_argument("--max-windows", type=int, default=None)

    p = sub.add_parser("selftest", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=settings.default_seed)
    return parser.parse_args(argv)


def main(argv=None):
    """
    Run the language model command line tool.

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

    if args.command == "selftest":
        from .selftest import run_selftest

        results = run_selftest(args.seed)
        return 0 if all(results.values()) else 1

    try:
        if args.command == "train":
            config = LmConfig(
                d_model=args.d_model,
                n_layers=args.layers,
                heads=args.heads,
                num_bases=args.num_bases,
                window=args.window,
                ctx_len=args.ctx,
                use_epe=not args.no_epe,
                use_dissection=not args.no_dissect,
                lr=args.lr,
                steps=args.steps,
                batch=args.batch,
                seed=args.seed,
            )
            corpus = CorpusStream.from_files(args.corpus, seed=args.seed)
            _, loss_trace = train(config, corpus, filepath=args.out)
            if loss_trace:
                print(f"loss {loss_trace[0]:.4f} -> {loss_trace[-1]:.4f}")
        else:
            model = LmModel.from_checkpoint(io.load_checkpoint(args.model))
            corpus = CorpusStream.from_files(args.corpus)
            for eval_len in args.eval_lens:
                ppl = eval_ppl(model, corpus, eval_len, args.split, args.decode, args.max_windows)
                print(f"eval_len={eval_len} ppl={ppl:.3f}")
    except (ValueError, RuntimeError, OSError) as e:
        print(f"lavo-lm: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
