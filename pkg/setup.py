"""
lavo setup script.

See license in LICENSE.txt.
"""

import os

from setuptools import setup

# provide a long description using reStructuredText
LONG_DESCRIPTION = r"""
**lavo** is a Python package implementing linear attention over a
fixed-size orthogonal memory. A sequence is compressed by projecting it
onto a set of orthonormal bases and averaging, which gives causal attention
a recurrent form with constant state per step. Context is dissected into
windows: tokens attend locally with a learned relative position bias, and
globally to the compressed outputs of completed windows.

The package ships the layer (self and cross attention) on a small
reverse-mode autodiff tape, quadratic reference oracles, a scaling
benchmark harness, and a byte-level language model demo with training,
perplexity evaluation at extrapolated lengths, and checkpoints.
"""

# list of classifiers from the PyPI classifiers trove
CLASSIFIERS = [
    "Development Status :: 3 - Alpha",
    "License :: OSI Approved :: MIT License",
    "Operating System :: OS Independent",
    "Intended Audience :: Science/Research",
    "Topic :: Scientific/Engineering :: Artificial Intelligence",
    "Topic :: Scientific/Engineering :: Mathematics",
    "Programming Language :: Python",
    "Programming Language :: Python :: 3",
    "Programming Language :: Python :: 3.8",
    "Programming Language :: Python :: 3.9",
]

DESC = "Linear attention over orthogonal memory, with oracles, benchmarks and a tiny LM demo"

# only specify install_requires if not in RTD environment
if os.getenv("READTHEDOCS") == "True":
    INSTALL_REQUIRES = []
else:
    with open("requirements.txt") as f:
        INSTALL_REQUIRES = [line.strip() for line in f.readlines()]

# now call setup
setup(
    name="lavo",
    version="0.1.0dev",
    description=DESC,
    long_description=LONG_DESCRIPTION,
    classifiers=CLASSIFIERS,
    license="MIT",
    platforms="any",
    packages=["lavo"],
    python_requires=">=3.8",
    install_requires=INSTALL_REQUIRES,
    entry_points={
        "console_scripts": [
            "lavo-bench=lavo.bench:main",
            "lavo-lm=lavo.lm_demo:main",
        ]
    },
)
