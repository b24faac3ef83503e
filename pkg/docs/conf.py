# Sphinx configuration for the med3d documentation.

project = 'med3d'
copyright = '2026'
author = ''

version = '0.1'
release = '0.1.0'

extensions = []
master_doc = 'index'
source_suffix = '.rst'
exclude_patterns = ['_build']

pygments_style = 'sphinx'
html_theme = 'default'
htmlhelp_basename = 'med3ddoc'
