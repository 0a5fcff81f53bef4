"""Benchmark engine for industrial image anomaly detection.

Subpackages: data loading and synthesis (:mod:`iadbench.data`,
:mod:`iadbench.synth`), patch features (:mod:`iadbench.features`),
split protocols (:mod:`iadbench.protocols`), metrics
(:mod:`iadbench.metrics`), the memory-bank detector
(:mod:`iadbench.detector`), and experiment orchestration
(:mod:`iadbench.runner`, :mod:`iadbench.report`).
"""

__version__ = "0.1.0"
