"""Mechanistic anomaly detection for small classifiers.

Pipeline: train a two-stage (clean -> poisoned) toy classifier, sample the
localized posterior around its weights with SGLD, couple per-draw loss
traces of test samples against a trusted reference set, and validate the
spectral detection condition on the dense Hessian.
"""

__version__ = "0.1.0"

from . import arch, attribution, data, engine, errors, harness, sgld, spectral  # noqa: F401
