# Configuration file for the Sphinx documentation builder.
#
# This file only contains a selection of the most common options. For a full
# list see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Path setup --------------------------------------------------------------

import os
import sys
sys.path.insert(0, os.path.abspath('../../src'))

# -- Project information -----------------------------------------------------

project = 'brokenray'
copyright = '2026, brokenray developers'
author = 'brokenray developers'

# The full version, including alpha/beta/rc tags
_version = {}
with open(os.path.abspath('../../src/brokenray/_version.py')) as fp:
    exec(fp.read(), _version)
release = _version['__version__']


# -- General configuration ---------------------------------------------------

extensions = [
    'm2r',
    'sphinx.ext.napoleon',
    'sphinx.ext.viewcode',
    'sphinx.ext.autodoc',
    'sphinx.ext.autosummary',
    'sphinx.ext.mathjax',
]

templates_path = []

exclude_patterns = []


# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'

autodoc_default_options = {
    'members': True,
    'member-order': 'bysource',
    'special-members': '__init__',
}

html_static_path = []
