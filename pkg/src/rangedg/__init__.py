"""Range-view LiDAR semantic segmentation that generalises from clean to adverse weather.

Modules: ``kernels`` (numeric kernels with explicit gradients), ``projection``
(spherical range images), ``weather`` (synthetic scenes and corruptions),
``gas`` and ``rdc`` (the two robustness modules), ``net`` (model, optimiser,
training), ``metrics``, ``checkpoint``, ``config``, ``data`` and ``cli``.
"""

__version__ = "0.1.0"
