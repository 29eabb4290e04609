import torch
import pytest

from typing import Callable

from ortho_probe.util import (
    MAX_DIM,
    dso_gradient,
    dso_penalty,
    l1_penalty,
    orthogonality_deviation,
    orthogonality_penalty,
    random_orthogonal,
    so_gradient,
    so_penalty,
    svd_decompose,
)

@pytest.mark.parametrize("dim", [1, 2, 7, 32])
def test_random_orthogonal_is_orthogonal(dim: int) -> None:
    q = random_orthogonal(dim, seed=dim)
    assert q.dtype == torch.float64
    assert torch.allclose(q.T @ q, torch.eye(dim, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(q @ q.T, torch.eye(dim, dtype=torch.float64), atol=1e-12)

def test_random_orthogonal_is_seeded() -> None:
    assert torch.equal(random_orthogonal(8, 3), random_orthogonal(8, 3))
    assert not torch.equal(random_orthogonal(8, 3), random_orthogonal(8, 4))

@pytest.mark.parametrize("dim", [0, -1, MAX_DIM + 1])
def test_random_orthogonal_rejects_bad_dimensions(dim: int) -> None:
    with pytest.raises(ValueError):
        random_orthogonal(dim, 0)

def test_penalties_vanish_on_orthogonal_matrices() -> None:
    q = random_orthogonal(12, 9)
    assert dso_penalty(q) < 1e-20
    assert so_penalty(q) < 1e-20
    assert orthogonality_deviation(q) < 1e-10

def test_penalty_worked_examples() -> None:
    scaled = torch.diag(torch.tensor([2.0, 1.0, 1.0], dtype=torch.float64))
    assert dso_penalty(scaled) == 18.0
    assert so_penalty(scaled) == 9.0
    assert orthogonality_penalty(scaled, "so") == 9.0
    assert orthogonality_penalty(scaled) == 18.0
    assert dso_penalty(torch.zeros(5, 5, dtype=torch.float64)) == 10.0

def test_dso_is_twice_so_for_symmetric_matrices(generator: torch.Generator) -> None:
    a = torch.randn(6, 6, generator=generator, dtype=torch.float64)
    symmetric = (a + a.T) / 2
    assert dso_penalty(symmetric) == pytest.approx(2 * so_penalty(symmetric), rel=1e-12)

def test_penalty_rejects_unknown_kind() -> None:
    with pytest.raises(ValueError):
        orthogonality_penalty(torch.eye(2, dtype=torch.float64), "hard")

def test_penalties_reject_non_square() -> None:
    with pytest.raises(ValueError):
        dso_penalty(torch.zeros(2, 3, dtype=torch.float64))
    with pytest.raises(ValueError):
        svd_decompose(torch.zeros(3, 2, dtype=torch.float64))

@pytest.mark.parametrize("penalty,gradient", [(dso_penalty, dso_gradient), (so_penalty, so_gradient)])
def test_orthogonality_gradients_match_finite_differences(
    penalty: Callable[[torch.Tensor], float],
    gradient: Callable[[torch.Tensor], torch.Tensor],
    generator: torch.Generator
) -> None:
    v = torch.randn(5, 5, generator=generator, dtype=torch.float64) * 0.5
    analytic = gradient(v)
    h = 1e-6
    for i in range(5):
        for j in range(5):
            plus = v.clone()
            plus[i, j] += h
            minus = v.clone()
            minus[i, j] -= h
            numeric = (penalty(plus) - penalty(minus)) / (2 * h)
            assert numeric == pytest.approx(float(analytic[i, j]), rel=1e-5, abs=1e-7)

def test_l1_penalty() -> None:
    assert l1_penalty(torch.tensor([0.5, -0.25, 0.0], dtype=torch.float64)) == 0.75

def test_svd_reconstructs(generator: torch.Generator) -> None:
    b = torch.randn(9, 9, generator=generator, dtype=torch.float64)
    u, s, v = svd_decompose(b)
    assert torch.allclose(u @ torch.diag(s) @ v.T, b, atol=1e-12)
    assert bool((s[:-1] >= s[1:]).all())
    assert orthogonality_deviation(v) < 1e-10

def test_svd_rejects_non_finite() -> None:
    b = torch.eye(3, dtype=torch.float64)
    b[0, 1] = float("nan")
    with pytest.raises(ValueError):
        svd_decompose(b)
