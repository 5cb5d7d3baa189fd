"""Trigger-key protected multi-task image classification.

A model trained with this package reveals a protected task's predictions
only when the matching trigger key is stamped onto the input; without the
key the task's output is deliberately uninformative. The package covers the
whole pipeline: synthetic correlated multi-task data, label-correlation
decoupling, keyed training-set construction, training, protection and
revelation reports, and an authorization-gated serving loop.
"""

from mtk.errors import FormatError, MTKError, UndefinedConditionalError

__version__ = "0.1.0"

__all__ = ["MTKError", "FormatError", "UndefinedConditionalError", "__version__"]
