# -*- coding: utf-8 -*-
#
# orthoflow documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.
#
# All configuration values have a default; values that are commented out
# serve to show the default.

import sys
import os

# If extensions (or modules to document with autodoc) are in another directory,
# add these directories to sys.path here.
sys.path.insert(0, os.path.abspath('../..'))

# -- General configuration ------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.autosummary',
    'sphinx.ext.doctest',
    'sphinx.ext.intersphinx',
    'sphinx.ext.todo',
    'sphinx.ext.coverage',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
    'sphinx.ext.napoleon',
]

# -- Extensions to the  Napoleon GoogleDocstring class ---------------------
#############################################################################

from sphinx.ext.napoleon.docstring import NumpyDocstring as GoogleDocstring


def parse_attributes_section(self, section):
    return self._format_fields('Attributes', self._consume_fields())


GoogleDocstring._parse_attributes_section = parse_attributes_section

#############################################################################

templates_path = ['_templates']

# Force autodoc to arrange functions by their appearance
autodoc_member_order = 'bysource'

source_suffix = '.rst'

master_doc = 'index'

project = u'orthoflow'
copyright = u'2026'
author = u'The orthoflow developers'

# The short X.Y version.
version = 'development'
# The full version, including alpha/beta/rc tags.
release = '1.0'

language = "en"

exclude_patterns = []

pygments_style = 'sphinx'

todo_include_todos = True


# -- Options for HTML output ----------------------------------------------

html_theme = 'sphinx_book_theme'

htmlhelp_basename = 'orthoflowdoc'

# -- Options for LaTeX output ---------------------------------------------

latex_elements = {}

latex_documents = [
    (master_doc, 'orthoflow.tex', r'\texttt{orthoflow} Documentation',
     author, 'manual'),
]

# -- Options for manual page output ---------------------------------------

man_pages = [
    (master_doc, 'orthoflow', u'orthoflow Documentation', [author], 1)
]

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'scipy': ('https://docs.scipy.org/doc/scipy/', None),
    'pandas': ('https://pandas.pydata.org/docs/', None),
}
