"""
numpy array field type for pydantic models

Arrays validate from nested lists (JSON) or ndarrays and serialize back to
nested lists, so models round-trip through model_dump_json / model_validate_json.
"""
from typing import Any

import numpy as np
from pydantic import BeforeValidator, PlainSerializer
from typing_extensions import Annotated


def _to_float_array(value: Any) -> np.ndarray:
    array = np.array(value, dtype=float)
    if not np.all(np.isfinite(array)):
        raise ValueError("array contains non-finite values")
    return array


def _to_list(array: np.ndarray) -> list:
    return np.asarray(array, dtype=float).tolist()


NDArray = Annotated[
    np.ndarray,
    BeforeValidator(_to_float_array),
    PlainSerializer(_to_list, return_type=list),
]


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def clamp_psd(matrix: np.ndarray, floor: float = 0.0) -> np.ndarray:
    """Symmetrize and clip eigenvalues below `floor` (tiny negatives from round-off)."""
    sym = symmetrize(matrix)
    eigvals, eigvecs = np.linalg.eigh(sym)
    if eigvals.min() >= floor:
        return sym
    eigvals = np.maximum(eigvals, floor)
    return symmetrize((eigvecs * eigvals) @ eigvecs.T)
