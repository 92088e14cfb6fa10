"""Joint-graph entropy knowledge distillation for point-cloud classifiers.

Subpackages cover the differentiable numerics core, synthetic shape data,
the corruption taxonomy, the classifier, the distillation losses, training
loops with a robustness harness, and a batch CLI.
"""

__version__ = "0.1.0"
