"""Configuration, logging and filesystem helpers shared by every module."""

import datetime as dt
import logging as lg
import os
import sys
import unicodedata

from . import settings

_TS_TEMPLATES = {
    "datetime": "{:%Y-%m-%d %H:%M:%S}",
    "date": "{:%Y-%m-%d}",
    "time": "{:%H:%M:%S}",
}


def ts(style="datetime", template=None):
    """
    Format the current local time as a string.

    Parameters
    ----------
    style : string
        one of {'datetime', 'date', 'time'}
    template : string
        if not None, a str.format template used instead of the style

    Returns
    -------
    string
    """
    if template is None:
        try:
            template = _TS_TEMPLATES[style]
        except KeyError:
            raise ValueError(f'unrecognized timestamp style "{style}"') from None
    return template.format(dt.datetime.now())


def config(
    data_folder=settings.data_folder,
    logs_folder=settings.logs_folder,
    imgs_folder=settings.imgs_folder,
    log_file=settings.log_file,
    log_console=settings.log_console,
    log_level=settings.log_level,
    log_name=settings.log_name,
    log_filename=settings.log_filename,
    default_dtype=settings.default_dtype,
    bench_dtype=settings.bench_dtype,
    default_seed=settings.default_seed,
    holdout_fraction=settings.holdout_fraction,
    log_every=settings.log_every,
    checkpoint_version=settings.checkpoint_version,
):
    """
    Set every global setting at once.

    A setting left out of the call goes back to its default, so calling
    config() with no arguments restores the package defaults.

    Parameters
    ----------
    data_folder : string
        default folder for checkpoints and benchmark CSVs
    logs_folder : string
        folder for dated log files
    imgs_folder : string
        default folder for saved figures
    log_file : bool
        if True, write log messages to a file in logs_folder
    log_console : bool
        if True, print log messages to the terminal
    log_level : int
        logging level constant for messages logged without one
    log_name : string
        logger name
    log_filename : string
        log file name prefix
    default_dtype : string
        numpy dtype name for parameters and activations
    bench_dtype : string
        numpy dtype name for the benchmark harness
    default_seed : int
        seed the command line tools fall back on
    holdout_fraction : float
        share of each corpus, from its tail, kept for evaluation
    log_every : int
        training loss is logged every this many steps
    checkpoint_version : int
        checkpoint format version written and accepted

    Returns
    -------
    None
    """
    values = dict(locals())
    for key, value in values.items():
        setattr(settings, key, value)

    if settings.log_file or settings.log_console:
        log("Configured lavo")


def log(message, level=None, name=None, filename=None):
    """
    Log a message to the log file and/or the console.

    Which outputs are used follows settings.log_file and
    settings.log_console. Console output is timestamped and folded to ASCII.

    Parameters
    ----------
    message : string
    level : int
        logging level constant. if None, use settings.log_level
    name : string
        logger name. if None, use settings.log_name
    filename : string
        log file name prefix. if None, use settings.log_filename

    Returns
    -------
    None
    """
    if level is None:
        level = settings.log_level

    if settings.log_file:
        _get_logger(level=level, name=name, filename=filename).log(level, message)

    if settings.log_console:
        line = f"{ts()} {message}"
        line = unicodedata.normalize("NFKD", line).encode("ascii", errors="replace").decode()
        # write to the real terminal even when stdout is redirected
        print(line, file=sys.__stdout__)


def _get_logger(level=None, name=None, filename=None):
    """
    Return the named logger, attaching a dated file handler on first use.

    Parameters
    ----------
    level : int
        logging level constant
    name : string
        logger name
    filename : string
        log file name prefix

    Returns
    -------
    logger : logging.Logger
    """
    level = settings.log_level if level is None else level
    name = settings.log_name if name is None else name
    filename = settings.log_filename if filename is None else filename

    logger = lg.getLogger(name)
    if not getattr(logger, "handler_set", False):
        filepath = os.path.join(settings.logs_folder, f"{filename}_{ts(style='date')}.log")
        make_folder(filepath)
        handler = lg.FileHandler(filepath, encoding="utf-8")
        handler.setFormatter(lg.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
        logger.addHandler(handler)
        logger.setLevel(level)
        logger.handler_set = True

    return logger


def make_folder(filepath):
    """
    Create the parent folder of a file path if it does not exist yet.

    Parameters
    ----------
    filepath : string
        path to a file

    Returns
    -------
    None
    """
    folder = os.path.dirname(filepath)
    if folder:
        os.makedirs(folder, exist_ok=True)
