"""Continual domain adaptation over paired support/query streams.

Three cooperating modules: variational environment-conditioned feature
inference with adversarial alignment, generative feature replay from frozen
decoder snapshots, and one unified solver trained across environments.
Includes synthetic drift-stream generation, the method/ablation grid, and
an empirical estimator of the query-error bound.
"""

__version__ = "0.1.0"
