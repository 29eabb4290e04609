import torch

from typing import Tuple

from .dtype_util import TRAINING_DTYPE

__all__ = [
    "MAX_DIM",
    "random_orthogonal",
    "dso_penalty",
    "so_penalty",
    "orthogonality_penalty",
    "dso_gradient",
    "so_gradient",
    "orthogonality_gradient",
    "l1_penalty",
    "soft_threshold",
    "orthogonality_deviation",
    "svd_decompose",
    "check_square",
    "all_finite",
]

MAX_DIM = 4096
ORTHOGONALITY_PENALTIES = ("dso", "so")

def check_square(matrix: torch.Tensor, name: str="matrix") -> int:
    """
    Ensures `matrix` is a square 2-D tensor and returns its dimension.

    :raises ValueError: When the matrix is not square.
    """
    if matrix.dim() != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"Expected a square {name}, got shape {tuple(matrix.shape)}")
    return int(matrix.shape[0])

def all_finite(tensor: torch.Tensor) -> bool:
    """
    Returns whether every entry is finite.
    """
    return bool(torch.isfinite(tensor).all())

def random_orthogonal(dim: int, seed: int) -> torch.Tensor:
    """
    Builds a seeded random orthogonal matrix.

    A standard-Gaussian matrix is orthonormalized by QR, and the columns of
    Q are sign-fixed so the diagonal of R is positive, which makes the draw
    Haar-uniform and fully determined by the seed.

    >>> random_orthogonal(1, 3).abs().item()
    1.0
    >>> q = random_orthogonal(4, 7)
    >>> bool(orthogonality_deviation(q) < 1e-8)
    True

    :param dim: The matrix dimension.
    :param seed: The generator seed.
    :return: A `dim`×`dim` float64 orthogonal matrix.
    :raises ValueError: When `dim` is not in [1, MAX_DIM].
    """
    if dim < 1 or dim > MAX_DIM:
        raise ValueError(f"Orthogonal matrix dimension must be in [1, {MAX_DIM}], got {dim}")
    generator = torch.Generator(device="cpu").manual_seed(seed)
    gaussian = torch.randn(dim, dim, generator=generator, dtype=TRAINING_DTYPE)
    q, r = torch.linalg.qr(gaussian)
    signs = torch.sign(torch.diagonal(r))
    signs[signs == 0] = 1.0
    return (q * signs.unsqueeze(0)).contiguous()

def _gram_residual(matrix: torch.Tensor, transpose_first: bool=True) -> torch.Tensor:
    dim = matrix.shape[0]
    identity = torch.eye(dim, dtype=matrix.dtype)
    if transpose_first:
        return matrix.T @ matrix - identity
    return matrix @ matrix.T - identity

def so_penalty(matrix: torch.Tensor) -> float:
    """
    Soft orthogonality, ‖VᵀV − 𝕀‖²_F.

    >>> so_penalty(torch.zeros(4, 4, dtype=torch.float64))
    4.0
    >>> so_penalty(torch.diag(torch.tensor([2.0, 1.0, 1.0], dtype=torch.float64)))
    9.0
    """
    check_square(matrix, "V")
    return float((_gram_residual(matrix) ** 2).sum())

def dso_penalty(matrix: torch.Tensor) -> float:
    """
    Double soft orthogonality, ‖VᵀV − 𝕀‖²_F + ‖VVᵀ − 𝕀‖²_F.

    >>> dso_penalty(torch.eye(4, dtype=torch.float64))
    0.0
    >>> dso_penalty(torch.zeros(4, 4, dtype=torch.float64))
    8.0
    >>> dso_penalty(torch.diag(torch.tensor([2.0, 1.0, 1.0], dtype=torch.float64)))
    18.0
    """
    check_square(matrix, "V")
    return float(
        (_gram_residual(matrix, True) ** 2).sum() +
        (_gram_residual(matrix, False) ** 2).sum()
    )

def so_gradient(matrix: torch.Tensor) -> torch.Tensor:
    """
    Gradient of `so_penalty`, 4V(VᵀV − 𝕀).
    """
    check_square(matrix, "V")
    return 4.0 * matrix @ _gram_residual(matrix, True)

def dso_gradient(matrix: torch.Tensor) -> torch.Tensor:
    """
    Gradient of `dso_penalty`, 4V(VᵀV − 𝕀) + 4(VVᵀ − 𝕀)V.
    """
    check_square(matrix, "V")
    return 4.0 * matrix @ _gram_residual(matrix, True) + 4.0 * _gram_residual(matrix, False) @ matrix

def _check_penalty_kind(kind: str) -> None:
    if kind not in ORTHOGONALITY_PENALTIES:
        raise ValueError(f"Unknown orthogonality penalty {kind}, expected one of {ORTHOGONALITY_PENALTIES}")

def orthogonality_penalty(matrix: torch.Tensor, kind: str="dso") -> float:
    """
    Evaluates the configured orthogonality regularizer (`dso` or `so`).
    """
    _check_penalty_kind(kind)
    return dso_penalty(matrix) if kind == "dso" else so_penalty(matrix)

def orthogonality_gradient(matrix: torch.Tensor, kind: str="dso") -> torch.Tensor:
    """
    Gradient of `orthogonality_penalty`.
    """
    _check_penalty_kind(kind)
    return dso_gradient(matrix) if kind == "dso" else so_gradient(matrix)

def l1_penalty(vector: torch.Tensor) -> float:
    """
    >>> l1_penalty(torch.tensor([1.0, -2.0, 3.0]))
    6.0
    """
    return float(vector.abs().sum())

def soft_threshold(vector: torch.Tensor, threshold: float) -> torch.Tensor:
    """
    Proximal operator of `threshold`·‖·‖₁: shrinks every entry toward zero
    by `threshold` and zeroes the ones it would carry past zero.

    >>> soft_threshold(torch.tensor([0.5, -0.05, -2.0, 0.1], dtype=torch.float64), 0.1).tolist()
    [0.4, 0.0, -1.9, 0.0]
    """
    if threshold < 0:
        raise ValueError(f"Threshold must be nonnegative, got {threshold}")
    shrunk = torch.clamp(vector.abs() - threshold, min=0.0)
    return torch.where(shrunk > 0, torch.sign(vector) * shrunk, torch.zeros_like(vector))

def orthogonality_deviation(matrix: torch.Tensor) -> float:
    """
    Un-squared deviation ‖VᵀV − 𝕀‖_F, used for monitoring.

    >>> round(orthogonality_deviation(2 * torch.eye(2, dtype=torch.float64)), 4)
    4.2426
    """
    check_square(matrix, "V")
    return float(torch.linalg.matrix_norm(_gram_residual(matrix), ord="fro"))

def svd_decompose(matrix: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Decomposes B = U·diag(s)·Vᵀ.

    >>> _, s, _ = svd_decompose(torch.diag(torch.tensor([1.0, 3.0, 2.0], dtype=torch.float64)))
    >>> s.tolist()
    [3.0, 2.0, 1.0]

    :param matrix: A square matrix with finite entries.
    :return: A tuple of (U, singular values in descending order, V).
    :raises ValueError: When the matrix is not square or has non-finite entries.
    """
    check_square(matrix, "B")
    if not all_finite(matrix):
        raise ValueError("Cannot decompose a matrix with non-finite entries")
    u, s, vh = torch.linalg.svd(matrix.to(TRAINING_DTYPE))
    return u, s, vh.T.contiguous()
