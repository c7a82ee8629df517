#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
lavo documentation build configuration file.

This file is execfile()d with the current directory set to its
containing dir.
"""

import os
import sys

# go up two levels from /docs/source to the package root
sys.path.insert(0, os.path.abspath("../.."))

# mock import these packages because readthedocs doesn't have them installed
autodoc_mock_imports = [
    "matplotlib",
    "matplotlib.colors",
    "matplotlib.pyplot",
    "numpy",
    "pandas",
]

# -- General configuration ------------------------------------------------

# General information about the project.
project = "lavo"
copyright = "2020, lavo contributors"
author = "lavo contributors"

# |version| and |release|
version = release = "0.1.0dev"

extensions = ["sphinx.ext.autodoc", "sphinx.ext.napoleon"]
templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"
language = None
exclude_patterns = []
pygments_style = "sphinx"
todo_include_todos = False


# -- Options for HTML output ----------------------------------------------

html_theme = "default"
html_static_path = []
html_sidebars = {"**": ["relations.html", "searchbox.html"]}
htmlhelp_basename = "lavodoc"


# -- Options for LaTeX output ---------------------------------------------

latex_elements = {}
latex_documents = [
    (master_doc, "lavo.tex", "lavo Documentation", author, "manual"),
]


# -- Options for manual page output ---------------------------------------

man_pages = [(master_doc, "lavo", "lavo Documentation", [author], 1)]


# -- Options for Texinfo output -------------------------------------------

texinfo_documents = [
    (
        master_doc,
        "lavo",
        "lavo Documentation",
        author,
        "lavo",
        "Linear attention over orthogonal memory.",
        "Miscellaneous",
    ),
]
