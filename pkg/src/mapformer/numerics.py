"""Small differentiable kernels shared by the rotor, model and SSM code.

Everything here operates on ``torch.Tensor`` and relies on torch autograd for
the reverse pass. ``grad_check`` compares that reverse pass against central
differences, which is how the rest of the package validates its gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Sequence

import torch

__all__ = [
    "NumericsError",
    "SkewBasis",
    "cumsum_time",
    "matrix_exp_skew",
    "matrix_exp",
    "assoc_scan_matmul",
    "sequential_matmul",
    "grad_check",
    "check_finite",
]


class NumericsError(ValueError):
    pass


_DEBUG_FINITE = False


def set_debug(flag: bool) -> None:
    """Turn on NaN/Inf checks after every kernel call."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(flag)


def check_finite(x: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericsError(f"non-finite values in {what}")
    return x


def _maybe_check(x: torch.Tensor, what: str) -> torch.Tensor:
    if _DEBUG_FINITE:
        check_finite(x, what)
    return x


def cumsum_time(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Inclusive prefix sum along the time axis ``dim``."""
    if x.dim() == 0 or x.shape[dim] == 0:
        raise NumericsError("cumsum_time needs a non-empty time axis")
    return _maybe_check(torch.cumsum(x, dim=dim), "cumsum_time")


@dataclass(frozen=True)
class SkewBasis:
    """Basis of so(b): one generator per coordinate plane (i, j), i < j.

    Generator for plane (i, j) has ``-1`` at [i, j] and ``+1`` at [j, i], so for
    b = 2 the single generator is [[0, -1], [1, 0]].
    """

    block_size: int
    generators: torch.Tensor  # (K, b, b)

    @classmethod
    def standard(cls, block_size: int, dtype: torch.dtype = torch.float64) -> "SkewBasis":
        if block_size < 2:
            raise NumericsError("block size must be >= 2")
        planes = list(combinations(range(block_size), 2))
        gens = torch.zeros(len(planes), block_size, block_size, dtype=dtype)
        for n, (i, j) in enumerate(planes):
            gens[n, i, j] = -1.0
            gens[n, j, i] = 1.0
        return cls(block_size, gens)

    @property
    def K(self) -> int:
        return self.block_size * (self.block_size - 1) // 2

    @property
    def planes(self) -> list[tuple[int, int]]:
        return list(combinations(range(self.block_size), 2))

    def to(self, dtype: torch.dtype) -> "SkewBasis":
        return SkewBasis(self.block_size, self.generators.to(dtype))

    def combine(self, theta: torch.Tensor) -> torch.Tensor:
        """Return the algebra element sum_i theta[..., i] * S_i, shape (..., b, b)."""
        if theta.shape[-1] != self.K:
            raise NumericsError(
                f"expected {self.K} coefficients for block size {self.block_size}, got {theta.shape[-1]}"
            )
        gens = self.generators.to(dtype=theta.dtype, device=theta.device)
        return torch.einsum("...k,kij->...ij", theta, gens)


def _inf_norm(a: torch.Tensor) -> torch.Tensor:
    return a.abs().sum(-1).amax(-1)


def matrix_exp(a: torch.Tensor, taylor_order: int = 12) -> torch.Tensor:
    """Matrix exponential of a batch of square matrices (..., n, n).

    Scaling and squaring with a truncated Taylor core; the number of squarings is
    ceil(log2(max(1, ||A||_inf))) + 6, taken over the whole batch.
    """
    if a.shape[-1] != a.shape[-2]:
        raise NumericsError("matrix_exp needs square matrices")
    n = a.shape[-1]
    norm = float(_inf_norm(a.detach()).max()) if a.numel() else 0.0
    squarings = math.ceil(math.log2(max(1.0, norm))) + 6
    scaled = a / (2.0**squarings)
    eye = torch.eye(n, dtype=a.dtype, device=a.device).expand_as(a)
    out = eye
    term = eye
    for k in range(1, taylor_order + 1):
        term = term @ scaled / k
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return _maybe_check(out, "matrix_exp")


def matrix_exp_skew(theta: torch.Tensor, basis: SkewBasis) -> torch.Tensor:
    """exp(sum_i theta_i S_i) for theta of shape (..., K); returns (..., b, b).

    Block size 2 takes the closed-form cos/sin path.
    """
    theta = torch.as_tensor(theta)
    if not theta.is_floating_point():
        theta = theta.to(torch.get_default_dtype())
    if theta.dim() == 0 or theta.shape[-1] != basis.K:
        raise NumericsError(
            f"theta has {theta.shape[-1] if theta.dim() else 0} coefficients, basis needs {basis.K}"
        )
    if basis.block_size == 2:
        c, s = torch.cos(theta[..., 0]), torch.sin(theta[..., 0])
        return torch.stack([torch.stack([c, -s], -1), torch.stack([s, c], -1)], -2)
    return matrix_exp(basis.combine(theta))


def _check_square_stack(mats: torch.Tensor | Sequence[torch.Tensor]) -> torch.Tensor:
    if not isinstance(mats, torch.Tensor):
        shapes = {tuple(m.shape) for m in mats}
        if len(shapes) != 1:
            raise NumericsError(f"ragged matrix sizes: {sorted(shapes)}")
        mats = torch.stack(list(mats))
    if mats.dim() < 3 or mats.shape[-1] != mats.shape[-2]:
        raise NumericsError("expected a (t, ..., b, b) stack of square matrices")
    return mats


def sequential_matmul(mats: torch.Tensor | Sequence[torch.Tensor]) -> torch.Tensor:
    """Reference fold: out[t] = mats[t] @ out[t-1]."""
    mats = _check_square_stack(mats)
    outs = [mats[0]]
    for t in range(1, mats.shape[0]):
        outs.append(mats[t] @ outs[-1])
    return torch.stack(outs)


def assoc_scan_matmul(mats: torch.Tensor | Sequence[torch.Tensor]) -> torch.Tensor:
    """Cumulative products out[t] = mats[t] @ ... @ mats[0] along axis 0.

    Log-depth doubling scan; extra axes between time and the matrix axes are
    treated as batch.
    """
    out = _check_square_stack(mats)
    t = out.shape[0]
    offset = 1
    while offset < t:
        # out[i] covers (i-offset, i]; left-multiply onto the earlier segment.
        later = out[offset:] @ out[:-offset]
        out = torch.cat([out[:offset], later], dim=0)
        offset *= 2
    return _maybe_check(out, "assoc_scan_matmul")


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    params: torch.Tensor,
    eps: float = 1e-5,
    max_coords: int | None = None,
    generator: torch.Generator | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    Error per coordinate is |a - c| / (|a| + |c| + 1e-12). When ``max_coords`` is
    given, only that many randomly chosen coordinates are perturbed.
    """
    x = params.detach().clone().requires_grad_(True)
    loss = f(x)
    if loss.numel() != 1 or not torch.isfinite(loss):
        raise NumericsError("grad_check needs a finite scalar loss")
    (analytic,) = torch.autograd.grad(loss, x)
    analytic = analytic.detach().reshape(-1)

    flat = x.detach().clone().reshape(-1)
    coords = torch.arange(flat.numel())
    if max_coords is not None and max_coords < flat.numel():
        coords = torch.randperm(flat.numel(), generator=generator)[:max_coords]

    worst = 0.0
    with torch.no_grad():
        for i in coords.tolist():
            orig = flat[i].item()
            flat[i] = orig + eps
            up = f(flat.view_as(x))
            flat[i] = orig - eps
            down = f(flat.view_as(x))
            flat[i] = orig
            if not (torch.isfinite(up) and torch.isfinite(down)):
                raise NumericsError("non-finite loss during finite differences")
            central = (up - down).item() / (2 * eps)
            a = analytic[i].item()
            err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
            worst = max(worst, err)
    return worst
