"""The (velocity, score, divergence) triple the ratio engine consumes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

Field = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True, eq=False)
class FieldProvider:
    """Pure functions of ``(x, t)`` with ``x`` of shape ``(n, d)``.

    ``velocity`` and ``score`` return ``(n, d)``; ``divergence`` returns the
    divergence of ``velocity`` with shape ``(n,)``.

    ``model`` and ``labels`` are set for providers backed by a trained model,
    which lets the ratio engine share the condition-independent parts of the
    network between providers of the same model.
    """

    velocity: Field
    score: Field
    divergence: Field
    name: str = "field"
    model: Optional[Any] = None
    labels: Optional[tuple] = None
