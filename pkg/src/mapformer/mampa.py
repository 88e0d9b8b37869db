"""Selective state-space layers with diagonal or 2x2 rotation-block recurrences.

``diagonal`` is the Mamba-style negative-real diagonal A. ``block_skew`` makes
A block-diagonal with blocks omega*S, S = [[0, -1], [1, 0]], so every discrete
step is a plane rotation. ``scalar`` shares one decay across the state.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn.functional as F
from torch import nn

from .models import Block, ModelError, TokenModel
from .numerics import matrix_exp

STRUCTURES = ("diagonal", "block_skew", "scalar")

# Decay structures keep Mamba's timescales. For rotations the step sets the
# angle per token, so start with angles from about half a radian to a full turn;
# with delta >= 0 a reverse move has to be learned as a wrap past 2*pi.
DT_INIT = {"diagonal": (1e-3, 1e-1), "scalar": (1e-3, 1e-1), "block_skew": (0.5, 3.0)}


@dataclass
class SsmConfig:
    state_size: int = 16
    structure: str = "block_skew"
    d_model: int = 64
    rank: int = 4
    n_layers: int = 1
    vocab_size: int = 32
    mlp_ratio: int = 4
    omega_max: float = 2.0
    grid_size_hint: int = 16
    # initial step sizes are log-uniform in dt_init; None picks a per-structure range
    dt_init: tuple[float, float] | None = None

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ModelError(f"unknown structure {self.structure!r}")
        if self.dt_init is None:
            self.dt_init = DT_INIT[self.structure]
        self.dt_init = tuple(float(v) for v in self.dt_init)
        if not 0 < self.dt_init[0] <= self.dt_init[1]:
            raise ModelError("dt_init must satisfy 0 < low <= high")
        if self.structure == "block_skew" and self.state_size % 2:
            raise ModelError("block_skew needs an even state size")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SsmConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


SKEW = torch.tensor([[0.0, -1.0], [1.0, 0.0]])


def discretize_zoh(A: torch.Tensor, B: torch.Tensor, delta: torch.Tensor | float, tol: float = 1e-6):
    """Zero-order hold: A_bar = exp(delta A), B_bar = (delta A)^-1 (exp(delta A) - I) delta B.

    Dense reference for a single (n, n) A and (n, m) B. Falls back to the series
    limit ``delta * B`` when ||delta A|| < tol.
    """
    delta = torch.as_tensor(delta, dtype=A.dtype)
    dA = delta * A
    A_bar = matrix_exp(dA)
    if float(dA.abs().max()) < tol:
        return A_bar, delta * B
    eye = torch.eye(A.shape[-1], dtype=A.dtype)
    B_bar = torch.linalg.solve(dA, (A_bar - eye) @ (delta * B))
    return A_bar, B_bar


def zoh_diagonal(a: torch.Tensor, delta: torch.Tensor, tol: float = 1e-3):
    """Elementwise ZOH for diagonal a: (exp(da), (exp(da) - 1) / a) with the da -> 0 limit."""
    da = delta * a
    a_bar = torch.exp(da)
    small = da.abs() < tol
    safe = torch.where(small, torch.ones_like(da), da)
    # near zero, a short series keeps both value and derivative accurate
    series = 1 + da / 2 + da * da / 6
    factor = torch.where(small, series, torch.expm1(safe) / safe)
    return a_bar, factor * delta


def zoh_rotation(phi: torch.Tensor, tol: float = 1e-3):
    """ZOH for blocks phi*S: returns cos, sin of the step and the 2x2 input map entries.

    With S^-1 = -S, (phi S)^-1 (R(phi) - I) = [[sin/phi, (cos-1)/phi], [(1-cos)/phi, sin/phi]].
    Returns (cos, sin, m_diag, m_off) where the input map is [[m_diag, -m_off], [m_off, m_diag]]
    applied to delta*B.
    """
    c, s = torch.cos(phi), torch.sin(phi)
    small = phi.abs() < tol
    safe = torch.where(small, torch.ones_like(phi), phi)
    p2 = phi * phi
    m_diag = torch.where(small, 1 - p2 / 6, s / safe)
    m_off = torch.where(small, phi / 2 - phi * p2 / 24, (1 - c) / safe)
    return c, s, m_diag, m_off


def _rot(x: torch.Tensor, c: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    x1, x2 = x[..., 0::2], x[..., 1::2]
    return torch.stack([x1 * c - x2 * s, x1 * s + x2 * c], -1).flatten(-2)


def selective_scan_sequential(a_bar: torch.Tensor, u: torch.Tensor, structure: str) -> torch.Tensor:
    """Reference fold h_t = A_bar_t h_{t-1} + u_t along axis -3 (time).

    a_bar: diagonal decays (..., t, c, n) or rotation angles (..., t, c, n/2) for
    block_skew. u: (..., t, c, n) already holding B_bar_t x_t.
    """
    t_len = u.shape[-3]
    h = torch.zeros_like(u[..., 0, :, :])
    out = []
    for t in range(t_len):
        if structure == "block_skew":
            ang = a_bar[..., t, :, :]
            h = _rot(h, torch.cos(ang), torch.sin(ang))
        else:
            h = a_bar[..., t, :, :] * h
        h = h + u[..., t, :, :]
        out.append(h)
    return torch.stack(out, dim=-3)


def selective_scan_parallel(a_bar: torch.Tensor, u: torch.Tensor, structure: str) -> torch.Tensor:
    """Log-depth doubling scan over (A, b) pairs, combine (A1,b1),(A2,b2) -> (A2A1, A2b1+b2).

    Rotation blocks are carried as angles and combined by addition.
    """
    a, b = a_bar, u
    t_len = u.shape[-3]
    offset = 1
    while offset < t_len:
        a_prev, b_prev = a[..., :-offset, :, :], b[..., :-offset, :, :]
        a_cur, b_cur = a[..., offset:, :, :], b[..., offset:, :, :]
        if structure == "block_skew":
            b_new = _rot(b_prev, torch.cos(a_cur), torch.sin(a_cur)) + b_cur
            a_new = a_cur + a_prev
        else:
            b_new = a_cur * b_prev + b_cur
            a_new = a_cur * a_prev
        a = torch.cat([a[..., :offset, :, :], a_new], dim=-3)
        b = torch.cat([b[..., :offset, :, :], b_new], dim=-3)
        offset *= 2
    return b


def selective_scan(a_bar, b_bar, x, C, structure: str = "diagonal", parallel: bool = True):
    """y_t = C_t^T h_t with h_t = A_bar_t h_{t-1} + B_bar_t x_t, h_0 = 0.

    a_bar: (..., t, c, n) decays, or (..., t, c, n/2) angles for block_skew.
    b_bar: (..., t, c, n); x: (..., t, c); C: (..., t, n). Returns (..., t, c).
    """
    u = b_bar * x[..., None]
    scan = selective_scan_parallel if parallel else selective_scan_sequential
    h = scan(a_bar, u, structure)
    return torch.einsum("...tcn,...tn->...tc", h, C)


class SelectiveSSM(nn.Module):
    """One selective SSM mixer: input-dependent step size, B and C; learned A."""

    def __init__(self, cfg: SsmConfig):
        super().__init__()
        self.cfg = cfg
        d, n = cfg.d_model, cfg.state_size
        self.structure = cfg.structure
        self.in_proj = nn.Linear(d, 2 * d)
        self.dt_in = nn.Linear(d, cfg.rank, bias=False)
        self.dt_out = nn.Linear(cfg.rank, d)
        self.B_proj = nn.Linear(d, n, bias=False)
        self.C_proj = nn.Linear(d, n, bias=False)
        self.D = nn.Parameter(torch.ones(d))
        self.out_proj = nn.Linear(d, d)
        if cfg.structure == "diagonal":
            self.A_log = nn.Parameter(torch.log(torch.arange(1, n + 1, dtype=torch.get_default_dtype())).repeat(d, 1))
        elif cfg.structure == "scalar":
            self.A_log = nn.Parameter(torch.zeros(d, 1))
        else:
            nb = n // 2
            delta_max = cfg.grid_size_hint * cfg.omega_max / (2 * math.pi)
            i = torch.arange(nb, dtype=torch.get_default_dtype())
            omega = cfg.omega_max * delta_max ** (-i / nb)
            self.omega = nn.Parameter(omega.repeat(d, 1))
        with torch.no_grad():
            # softplus^-1 of log-uniform step sizes
            lo, hi = (math.log(v) for v in cfg.dt_init)
            dt = torch.exp(torch.rand(d) * (hi - lo) + lo)
            self.dt_out.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
        self.last_delta: torch.Tensor | None = None

    def discretized(self, x: torch.Tensor):
        delta = F.softplus(self.dt_out(self.dt_in(x)))  # (..., t, c)
        self.last_delta = delta.detach()
        Bt = self.B_proj(x)  # (..., t, n)
        if self.structure == "block_skew":
            phi = delta[..., None] * self.omega  # (..., t, c, n/2)
            c, s, m_diag, m_off = zoh_rotation(phi)
            dB = delta[..., None] * Bt[..., None, :]  # (..., t, c, n)
            b_bar = _rot(dB, m_diag, m_off)
            return phi, b_bar
        a = -torch.exp(self.A_log)
        a_bar, factor = zoh_diagonal(a, delta[..., None])
        b_bar = factor * Bt[..., None, :]
        if self.structure == "scalar":
            a_bar = a_bar.expand_as(b_bar)
        return a_bar, b_bar

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xz = self.in_proj(x)
        u, z = xz.chunk(2, dim=-1)
        a_bar, b_bar = self.discretized(x)
        C = self.C_proj(x)
        y = selective_scan(a_bar, b_bar, u, C, self.structure) + self.D * u
        return self.out_proj(y * F.silu(z))


class SsmModel(TokenModel):
    kind = "ssm"

    def __init__(self, cfg: SsmConfig):
        super().__init__(cfg, [Block(cfg, SelectiveSSM(cfg)) for _ in range(cfg.n_layers)])


def ssm_model_forward(model: SsmModel, tokens) -> torch.Tensor:
    return model(torch.as_tensor(tokens))
