"""LAVO init."""

from ._api import *
from ._version import __version__
