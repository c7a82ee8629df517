"""Expose most common parts of public API directly in `lavo.` namespace."""

from .autodiff import Parameter
from .autodiff import Tape
from .autodiff import adam_step
from .autodiff import backward
from .autodiff import check_gradients
from .autodiff import detach
from .bench import fit_loglog_slope
from .bench import read_csv
from .bench import run_bench
from .bench import summarize
from .bench import write_csv
from .code_memory import EMPTY
from .code_memory import OrthoMemoryState
from .code_memory import attend_memory
from .code_memory import compress
from .code_memory import make_basis
from .code_memory import state_read
from .code_memory import state_update
from .code_memory import state_update_block
from .cross_attention import encode_source
from .cross_attention import forward_cross
from .cross_attention import init_cross_params
from .io import Checkpoint
from .io import load_checkpoint
from .io import save_checkpoint
from .lavo_layer import CausalCache
from .lavo_layer import LavoConfig
from .lavo_layer import complexity_audit
from .lavo_layer import forward
from .lavo_layer import init_params
from .lavo_layer import step
from .lm_demo import CorpusStream
from .lm_demo import LmConfig
from .lm_demo import LmModel
from .lm_demo import eval_ppl
from .lm_demo import train
from .oracles import naive_causal_lavo
from .oracles import naive_noncausal_lavo
from .oracles import vanilla_attention
from .plot import plot_scaling
from .selftest import run_selftest
from .utils import config
from .utils import log
from .utils import ts
