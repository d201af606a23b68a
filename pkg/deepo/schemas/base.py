"""
Base schema definitions for the DeePO library.
"""
from typing import Annotated, Any

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, PlainSerializer


def _as_matrix(value: Any) -> np.ndarray:
    array = np.array(value, dtype=float)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    if array.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ValueError("matrix entries must be finite")
    return array


def _as_vector(value: Any) -> np.ndarray:
    array = np.array(value, dtype=float).reshape(-1)
    if not np.all(np.isfinite(array)):
        raise ValueError("vector entries must be finite")
    return array


Matrix = Annotated[
    np.ndarray,
    BeforeValidator(_as_matrix),
    PlainSerializer(lambda a: a.tolist(), return_type=list, when_used="json"),
]

Vector = Annotated[
    np.ndarray,
    BeforeValidator(_as_vector),
    PlainSerializer(lambda a: a.tolist(), return_type=list, when_used="json"),
]


class DeepoBaseModel(BaseModel):
    """Base Pydantic model with common configuration."""

    model_config = ConfigDict(
        populate_by_name=True,
        arbitrary_types_allowed=True,
    )
