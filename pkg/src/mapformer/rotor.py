"""Path-integration positional core.

Inputs are projected to per-block integration times, summed along time, scaled
by a bank of angular velocities and turned into 2x2 block rotations that act on
key/query streams (working-memory form) or on a learned zero coordinate
(episodic-memory form).

Shapes follow the convention ``(..., t, n_heads, n_blocks, n_gen)`` for deltas
and angles, and ``(..., t, n_heads, head_dim)`` for the streams they rotate.
Block i of a head occupies dimensions ``(2i, 2i + 1)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import nn

from .numerics import SkewBasis, assoc_scan_matmul, cumsum_time, matrix_exp_skew

__all__ = [
    "RotorError",
    "FrequencyBank",
    "init_frequencies",
    "DeltaProjector",
    "project_deltas",
    "PathAngles",
    "path_integrate",
    "apply_rotation",
    "rotate_blocks",
    "ZeroCoordinate",
    "position_stream",
    "path_integrate_noncommutative",
    "sl2_generator",
    "rope_frequencies",
    "apply_block_matrices",
]

TIME_DIM = -4


class RotorError(ValueError):
    pass


def _geometric_omegas(n_b: int, omega_max: float, delta_max: float) -> torch.Tensor:
    i = torch.arange(n_b, dtype=torch.float64)
    return omega_max * delta_max ** (-i / n_b)


class FrequencyBank(nn.Module):
    """Per-head angular velocities, shape (n_heads, n_blocks)."""

    def __init__(self, omega: torch.Tensor, omega_max: float, delta_max: float, learnable: bool = True):
        super().__init__()
        self.omega_max = float(omega_max)
        self.delta_max = float(delta_max)
        self.omega = nn.Parameter(omega.clone(), requires_grad=learnable)

    @property
    def learnable(self) -> bool:
        return self.omega.requires_grad

    @property
    def omega_min(self) -> float:
        """Lower end of the schedule, omega_max / delta_max (= 2*pi/n)."""
        return self.omega_max / self.delta_max

    def freeze(self) -> "FrequencyBank":
        self.omega.requires_grad_(False)
        return self

    @property
    def n_heads(self) -> int:
        return self.omega.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.omega.shape[1]


def init_frequencies(
    n_b: int,
    omega_max: float,
    grid_size: int,
    n_heads: int = 1,
    learnable: bool = True,
    dtype: torch.dtype | None = None,
) -> FrequencyBank:
    """Geometric frequency schedule decaying from ``omega_max`` towards 2*pi/n.

    delta_max = n * omega_max / (2*pi) is the longest path the lowest frequency
    should cover in one turn; omega_i = omega_max * delta_max**(-i / n_b).
    """
    if n_b < 1:
        raise RotorError("need at least one frequency block")
    if grid_size < 2:
        raise RotorError("grid size must be >= 2")
    if not (1.0 < omega_max <= 2 * math.pi + 1e-12):
        warnings.warn(f"omega_max={omega_max} outside (1, 2*pi]", stacklevel=2)
    delta_max = grid_size * omega_max / (2 * math.pi)
    omega = _geometric_omegas(n_b, omega_max, delta_max)
    omega = omega.expand(n_heads, n_b).clone()
    if dtype is not None:
        omega = omega.to(dtype)
    else:
        omega = omega.to(torch.get_default_dtype())
    return FrequencyBank(omega, omega_max, delta_max, learnable=learnable)


def rope_frequencies(n_b: int, base: float = 10000.0, n_heads: int = 1) -> FrequencyBank:
    """The fixed RoPE schedule base**(-i/n_b), wrapped as a frozen bank."""
    i = torch.arange(n_b, dtype=torch.float64)
    omega = (base ** (-i / n_b)).expand(n_heads, n_b).clone().to(torch.get_default_dtype())
    return FrequencyBank(omega, 1.0, base, learnable=False)


class DeltaProjector(nn.Module):
    """Low-rank map from token features to integration times.

    ``W_in`` (d -> r) extracts a small action vector; ``W_out`` (r -> heads *
    blocks * generators) spreads it over every rotation block. With
    ``nonlinear=True`` the output map is a one-hidden-layer MLP.
    The rank-r intermediate of the latest call is kept in ``last_delta_in``.
    """

    def __init__(
        self,
        d_model: int,
        rank: int,
        n_heads: int,
        n_blocks: int,
        n_gen: int = 1,
        nonlinear: bool = False,
        hidden: int | None = None,
    ):
        super().__init__()
        if rank < 1:
            raise RotorError("rank must be >= 1")
        self.d_model, self.rank = d_model, rank
        self.n_heads, self.n_blocks, self.n_gen = n_heads, n_blocks, n_gen
        self.nonlinear = nonlinear
        out = n_heads * n_blocks * n_gen
        self.W_in = nn.Linear(d_model, rank, bias=False)
        if nonlinear:
            hidden = hidden or max(4 * rank, 32)
            self.W_out = nn.Sequential(nn.Linear(rank, hidden), nn.GELU(), nn.Linear(hidden, out))
        else:
            self.W_out = nn.Linear(rank, out, bias=False)
        self.last_delta_in: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_model:
            raise RotorError(f"expected feature size {self.d_model}, got {x.shape[-1]}")
        delta_in = self.W_in(x)
        self.last_delta_in = delta_in.detach()
        delta = self.W_out(delta_in)
        return delta.reshape(*x.shape[:-1], self.n_heads, self.n_blocks, self.n_gen)


def project_deltas(x: torch.Tensor, proj: DeltaProjector) -> torch.Tensor:
    """Integration times for every token, shape (..., t, n_h, n_b, K)."""
    return proj(x)


@dataclass
class PathAngles:
    """Cumulative rotation angles, shape (..., t, n_h, n_b, K)."""

    theta: torch.Tensor

    @property
    def blocks(self) -> torch.Tensor:
        # commutative angles without the trailing generator axis
        return self.theta[..., 0]


def path_integrate(deltas: torch.Tensor, bank: FrequencyBank | torch.Tensor) -> PathAngles:
    """theta[t] = omega * sum_{s<=t} delta[s], via a cumulative sum over time."""
    if deltas.dim() < 4:
        raise RotorError("deltas must have shape (..., t, n_h, n_b, K)")
    if deltas.shape[-1] != 1:
        raise RotorError(
            "path_integrate handles one generator per block; use path_integrate_noncommutative"
        )
    omega = bank.omega if isinstance(bank, FrequencyBank) else bank
    summed = cumsum_time(deltas, dim=TIME_DIM)
    return PathAngles(summed * omega.to(deltas.dtype)[..., None])


def _angles_tensor(angles: PathAngles | torch.Tensor) -> torch.Tensor:
    # raw tensors are taken as (..., n_b) already
    if isinstance(angles, PathAngles):
        if angles.theta.shape[-1] != 1:
            raise RotorError("2x2 rotations need one generator per block")
        return angles.blocks
    return angles


def rotate_blocks(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive pairs of the last axis by per-block cos/sin."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def apply_rotation(
    x: torch.Tensor, angles: PathAngles | torch.Tensor, sign: int = 1
) -> torch.Tensor:
    """Apply R(theta) (sign=+1) or its transpose (sign=-1) to every 2-block of x.

    x: (..., t, n_h, d_h); angles broadcast to (..., t, n_h, d_h/2).
    """
    if x.shape[-1] % 2:
        raise RotorError("head dimension must be even for 2x2 rotations")
    if sign not in (1, -1):
        raise RotorError("sign must be +1 or -1")
    theta = _angles_tensor(angles)
    if theta.shape[-1] != x.shape[-1] // 2:
        raise RotorError(f"{theta.shape[-1]} angle blocks for head dim {x.shape[-1]}")
    theta = theta * sign
    return rotate_blocks(x, torch.cos(theta), torch.sin(theta))


class ZeroCoordinate(nn.Module):
    """Learned starting key/query positions of the map, one per head."""

    def __init__(self, n_heads: int, head_dim: int, tied: bool = False, scale: float = 1.0):
        super().__init__()
        self.tied = tied
        self.k_star = nn.Parameter(torch.randn(n_heads, head_dim) * scale)
        if tied:
            self.register_parameter("q_star", None)
        else:
            self.q_star = nn.Parameter(torch.randn(n_heads, head_dim) * scale)

    def pair(self) -> tuple[torch.Tensor, torch.Tensor]:
        q = self.k_star if self.tied else self.q_star
        return self.k_star, q


def position_stream(
    angles: PathAngles | torch.Tensor, zero: ZeroCoordinate | tuple[torch.Tensor, torch.Tensor]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Rotate the shared zero coordinate to every step: K_P[t] = R(theta[t]) k_star."""
    k_star, q_star = zero.pair() if isinstance(zero, ZeroCoordinate) else zero
    theta = _angles_tensor(angles)
    cos, sin = torch.cos(theta), torch.sin(theta)
    k_p = rotate_blocks(k_star.to(theta.dtype).expand(*theta.shape[:-1], -1), cos, sin)
    q_p = rotate_blocks(q_star.to(theta.dtype).expand(*theta.shape[:-1], -1), cos, sin)
    return k_p, q_p


def path_integrate_noncommutative(
    deltas: torch.Tensor,
    basis: SkewBasis,
    omega: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cumulative products of per-step rotations exp(sum_i theta_i S_i).

    deltas: (..., t, n_h, n_b, K). Returns (..., t, n_h, n_b, b, b) with
    out[t] = R_t @ ... @ R_0. Per-step angles are ``omega * deltas`` when a
    frequency tensor (n_h, n_b) or (n_h, n_b, K) is given.
    """
    if deltas.dim() < 4 or deltas.shape[-1] != basis.K:
        raise RotorError(
            f"deltas need {basis.K} generator coefficients for block size {basis.block_size}"
        )
    theta = deltas
    if omega is not None:
        omega = omega.to(deltas.dtype)
        theta = theta * (omega[..., None] if omega.dim() == 2 else omega)
    steps = matrix_exp_skew(theta, basis.to(theta.dtype))  # (..., t, h, nb, b, b)
    time_axis = theta.dim() + TIME_DIM
    moved = steps.movedim(time_axis, 0)
    return assoc_scan_matmul(moved).movedim(0, time_axis)


def apply_block_matrices(x: torch.Tensor, mats: torch.Tensor) -> torch.Tensor:
    """Multiply each b-block of x (..., n_h, n_b*b) by mats (..., n_h, n_b, b, b)."""
    b = mats.shape[-1]
    xb = x.reshape(*x.shape[:-1], x.shape[-1] // b, b)
    return (mats @ xb[..., None])[..., 0].flatten(-2)


def sl2_generator(raw: torch.Tensor) -> torch.Tensor:
    """Project a square matrix onto the traceless subspace (generator of SL(n))."""
    n = raw.shape[-1]
    tr = torch.diagonal(raw, dim1=-2, dim2=-1).sum(-1)
    eye = torch.eye(n, dtype=raw.dtype, device=raw.device)
    return raw - (tr / n)[..., None, None] * eye
