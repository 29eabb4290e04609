import torch
import numpy as np

from typing import Any

__all__ = [
    "TRAINING_DTYPE",
    "STORAGE_DTYPE",
    "get_numpy_dtype",
    "as_training_tensor",
]

# Training math runs in double precision, embeddings are stored in single.
TRAINING_DTYPE = torch.float64
STORAGE_DTYPE = torch.float32

def get_numpy_dtype(torch_type: torch.dtype) -> np.dtype[Any]:
    """
    Gets the little-endian numpy dtype used to serialize a torch float type.

    >>> get_numpy_dtype(torch.float32).str
    '<f4'

    :raises ValueError: For any type other than float32 and float64.
    """
    if torch_type is torch.float32:
        return np.dtype("<f4")
    if torch_type is torch.float64:
        return np.dtype("<f8")
    raise ValueError(f"Unsupported serialization dtype: {torch_type}")

def as_training_tensor(value: Any) -> torch.Tensor:
    """
    Widens an array-like into a contiguous float64 CPU tensor.

    >>> as_training_tensor(np.ones((2, 2), dtype=np.float32)).dtype
    torch.float64
    """
    if isinstance(value, torch.Tensor):
        return value.detach().to(device="cpu", dtype=TRAINING_DTYPE).contiguous()
    return torch.as_tensor(np.asarray(value), dtype=TRAINING_DTYPE).contiguous()
