"""Density maps for crowd counting, detection and tracking.

Modules: ``core`` (types and file formats), ``synthesis`` (ground-truth
maps), ``estimator`` (ridge regression predictor), ``detection``,
``metrics``, ``tracking``, ``simulator`` and ``cli``.
"""

__version__ = "0.1.0"
