"""artext: CPU-only detector for artistic-style scene text.

Subpackage map:

- ``tensor``, ``ops``, ``nn``, ``optim``, ``gradcheck``: reverse-mode autodiff
  core and layers
- ``backbone``, ``rcca``, ``rfpn``, ``seghead``, ``boundary``: network stages
- ``geomeval``: polygon matching and detection metrics
- ``dataio``: annotation/image/checkpoint formats and the synthetic dataset
- ``pipeline``: full detector assembly, training and inference loops
- ``cli``: the ``artext`` command
"""

__version__ = "0.1.0"
