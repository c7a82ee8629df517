"""Global settings, can be configured by user with utils.config()."""

import logging as lg

# locations to save data, logs, and images
data_folder = "data"
logs_folder = "logs"
imgs_folder = "images"

# write log to file and/or to console
log_file = False
log_console = False
log_level = lg.INFO
log_name = "lavo"
log_filename = "lavo"

# numpy dtype names for correctness work and for the benchmark path. gradient
# checks need the headroom of 64-bit floats
default_dtype = "float64"
bench_dtype = "float32"

# seed used by the CLIs when none is passed
default_seed = 42

# fraction of a corpus (taken from its tail) held out for evaluation
holdout_fraction = 0.1

# log training loss every this many steps
log_every = 50

# checkpoint format version written by io.save_checkpoint. load_checkpoint
# refuses any other version
checkpoint_version = 1
