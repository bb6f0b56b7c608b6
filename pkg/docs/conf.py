# Sphinx configuration for the tffquant documentation.

import os
import sys

sys.path.insert(0, os.path.abspath(".."))

project = "tffquant"
copyright = "2024, tffquant developers"
author = "tffquant developers"
release = "0.3.0"

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.mathjax",
    "sphinx.ext.viewcode",
]

source_suffix = ".rst"
master_doc = "index"
language = "en"
exclude_patterns = ["_build"]

html_theme = "alabaster"

autodoc_member_order = "bysource"
