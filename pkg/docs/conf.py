"""Sphinx configuration for genro-vad documentation."""

import os
import sys
from datetime import datetime

# Add source to path for autodoc
sys.path.insert(0, os.path.abspath('../src'))

# Project information
project = 'genro-vad'
copyright = f'{datetime.now().year}, Genropy Team'
author = 'Genropy Team'
release = '0.1.0'
version = '0.1.0'

# General configuration
extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.napoleon',
    'sphinx.ext.viewcode',
    'sphinx.ext.intersphinx',
    'myst_parser',
]

templates_path = ['_templates']
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

source_suffix = {
    '.rst': 'restructuredtext',
    '.md': 'markdown',
}

master_doc = 'index'
language = 'en'

# HTML output options
html_theme = 'sphinx_rtd_theme'
html_theme_options = {
    'navigation_depth': 4,
    'collapse_navigation': False,
    'sticky_navigation': True,
}

# Autodoc options
autodoc_default_options = {
    'members': True,
    'member-order': 'bysource',
    'undoc-members': True,
    'exclude-members': '__weakref__',
}

# Napoleon settings (Google style docstrings)
napoleon_google_docstring = True
napoleon_numpy_docstring = False
napoleon_include_init_with_doc = True
napoleon_use_param = True
napoleon_use_rtype = True
napoleon_attr_annotations = True

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'fsspec': ('https://filesystem-spec.readthedocs.io/en/latest/', None),
    'pydantic': ('https://docs.pydantic.dev/latest/', None),
}

myst_enable_extensions = [
    "colon_fence",
    "deflist",
]

# Heavy numerical dependencies are not needed to render the API pages
autodoc_mock_imports = [
    'scipy',
    'sklearn',
    'PIL',
]

autodoc_typehints = 'description'
autodoc_typehints_description_target = 'documented'
