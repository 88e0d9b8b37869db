"""Decoder-only causal transformers with swappable positional mechanisms.

Variants
--------
``rope``       fixed rotary positions.
``cope``       contextual positions from sigmoid gates (CoPE-style).
``map_wm``     keys/queries rotated by path-integrated, input-dependent angles.
``map_em_os``  content attention times positional attention (conjunctive).
``map_em_s``   positional attention only.
``map_em_o``   content attention only (no positional signal; a control).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import SkewBasis
from .rotor import (
    DeltaProjector,
    FrequencyBank,
    PathAngles,
    ZeroCoordinate,
    apply_block_matrices,
    apply_rotation,
    init_frequencies,
    path_integrate,
    path_integrate_noncommutative,
    position_stream,
    rope_frequencies,
)

VARIANTS = ("rope", "cope", "map_wm", "map_em_os", "map_em_s", "map_em_o")
MAP_VARIANTS = ("map_wm", "map_em_os", "map_em_s", "map_em_o")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: str = "map_wm"
    n_layers: int = 1
    n_heads: int = 2
    head_dim: int = 32
    d_model: int | None = None
    vocab_size: int = 32
    block_size: int = 2
    rank: int = 2
    omega_max: float = 2.0
    grid_size_hint: int = 64
    noncommutative: bool = False
    nonlinear_delta: bool = False
    cope_pmax: int = 128
    rope_base: float = 10000.0
    learn_omega: bool = True
    tie_zero: bool = False
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model is None:
            self.d_model = self.n_heads * self.head_dim
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ModelError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.d_model != self.n_heads * self.head_dim:
            raise ModelError("d_model must equal n_heads * head_dim")
        if self.variant in ("rope", "map_wm", "map_em_os", "map_em_s") and self.head_dim % 2:
            raise ModelError("head_dim must be even when rotations are used")
        if self.noncommutative and self.head_dim % self.block_size:
            raise ModelError("head_dim must be a multiple of block_size")
        if not self.noncommutative and self.block_size != 2:
            raise ModelError("commutative rotations use 2x2 blocks")

    @property
    def n_blocks(self) -> int:
        return self.head_dim // self.block_size

    @property
    def n_gen(self) -> int:
        return self.block_size * (self.block_size - 1) // 2 if self.noncommutative else 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class AttentionTrace:
    """Per-head attention matrices of the latest forward pass, (..., h, t, t)."""

    A: torch.Tensor
    A_X: torch.Tensor | None = None
    A_P: torch.Tensor | None = None


def causal_mask(t: int, device=None) -> torch.Tensor:
    return torch.ones(t, t, dtype=torch.bool, device=device).tril()


def masked_softmax(logits: torch.Tensor) -> torch.Tensor:
    t = logits.shape[-1]
    mask = causal_mask(t, logits.device)
    return logits.masked_fill(~mask, float("-inf")).softmax(-1)


def cope_positions(gates: torch.Tensor) -> torch.Tensor:
    """p[i, j] = sum_{k=j..i} gates[i, k] for j <= i, zero above the diagonal."""
    t = gates.shape[-1]
    g = gates * causal_mask(t, gates.device)
    return g.flip(-1).cumsum(-1).flip(-1) * causal_mask(t, gates.device)


def cope_interpolate(pos: torch.Tensor, table_logits: torch.Tensor) -> torch.Tensor:
    """Linear interpolation of integer-position logits at fractional positions.

    pos: (..., t, t) clamped to the table; table_logits: (..., t, pmax + 1).
    """
    pmax = table_logits.shape[-1] - 1
    pos = pos.clamp(max=pmax)
    lo = pos.floor().long()
    hi = pos.ceil().long()
    w = pos - lo.to(pos.dtype)
    return table_logits.gather(-1, hi) * w + table_logits.gather(-1, lo) * (1 - w)


class Attention(nn.Module):
    """Multi-head causal attention; subclasses supply logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.n_heads, self.head_dim = cfg.n_heads, cfg.head_dim
        d = cfg.d_model
        self.q_proj = nn.Linear(d, d, bias=False)
        self.k_proj = nn.Linear(d, d, bias=False)
        self.v_proj = nn.Linear(d, d, bias=False)
        self.out_proj = nn.Linear(d, d, bias=False)
        self.trace: AttentionTrace | None = None
        self.keep_trace = False
        self.last_values: torch.Tensor | None = None

    def heads(self, x: torch.Tensor) -> torch.Tensor:
        return x.view(*x.shape[:-1], self.n_heads, self.head_dim)

    def qkv(self, x):
        return self.heads(self.q_proj(x)), self.heads(self.k_proj(x)), self.heads(self.v_proj(x))

    def logits(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        # (..., t, h, d) x (..., t, h, d) -> (..., h, t, t)
        return torch.einsum("...ihd,...jhd->...hij", q, k) / math.sqrt(self.head_dim)

    def mix(self, attn: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        out = torch.einsum("...hij,...jhd->...ihd", attn, v)
        return self.out_proj(out.flatten(-2))

    def finish(self, attn: torch.Tensor, v: torch.Tensor, **parts) -> torch.Tensor:
        self.last_values = v.detach()
        if self.keep_trace:
            self.trace = AttentionTrace(attn.detach(), **{k: p.detach() for k, p in parts.items()})
        return self.mix(attn, v)


class RopeAttention(Attention):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.freqs = rope_frequencies(cfg.head_dim // 2, cfg.rope_base, cfg.n_heads)

    def angles(self, t: int, dtype) -> torch.Tensor:
        pos = torch.arange(t, dtype=dtype)
        return pos[:, None, None] * self.freqs.omega.to(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x)
        theta = self.angles(x.shape[-2], x.dtype)
        q, k = apply_rotation(q, theta), apply_rotation(k, theta)
        return self.finish(masked_softmax(self.logits(q, k)), v)


class CopeAttention(Attention):
    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.pmax = cfg.cope_pmax
        self.pos_emb = nn.Parameter(torch.randn(cfg.n_heads, cfg.cope_pmax + 1, cfg.head_dim) * 0.02)
        self.gate_override: float | None = None
        self.last_positions: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x)
        logits = self.logits(q, k)
        if self.gate_override is None:
            gates = torch.sigmoid(logits)
        else:
            gates = torch.full_like(logits, float(self.gate_override))
        pos = cope_positions(gates)
        self.last_positions = pos.detach()
        table = torch.einsum("...ihd,hpd->...hip", q, self.pos_emb) / math.sqrt(self.head_dim)
        logits = logits + cope_interpolate(pos, table)
        return self.finish(masked_softmax(logits), v)


class MapAttention(Attention):
    """Shared rotor plumbing for the path-integrating variants."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.delta_proj = DeltaProjector(
            cfg.d_model, cfg.rank, cfg.n_heads, cfg.n_blocks, cfg.n_gen, nonlinear=cfg.nonlinear_delta
        )
        self.bank: FrequencyBank = init_frequencies(
            cfg.n_blocks, cfg.omega_max, cfg.grid_size_hint, cfg.n_heads, learnable=cfg.learn_omega
        )
        self.basis = SkewBasis.standard(cfg.block_size) if cfg.noncommutative else None
        self.deltas_override: torch.Tensor | None = None
        self.last_deltas: torch.Tensor | None = None
        self.last_theta: torch.Tensor | None = None

    def path(self, x: torch.Tensor):
        """Return cumulative angles (commutative) or block matrices (noncommutative)."""
        deltas = self.delta_proj(x)
        if self.deltas_override is not None:
            deltas = self.deltas_override.to(x.dtype).expand_as(deltas)
        self.last_deltas = deltas.detach()
        if self.basis is None:
            angles = path_integrate(deltas, self.bank)
            self.last_theta = angles.theta.detach()
            return angles
        mats = path_integrate_noncommutative(deltas, self.basis, self.bank.omega)
        self.last_theta = None
        return mats

    def rotate(self, x: torch.Tensor, path) -> torch.Tensor:
        if isinstance(path, PathAngles):
            return apply_rotation(x, path)
        return apply_block_matrices(x, path)


class MapWMAttention(MapAttention):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(x)
        path = self.path(x)
        q, k = self.rotate(q, path), self.rotate(k, path)
        return self.finish(masked_softmax(self.logits(q, k)), v)


class MapEMAttention(MapAttention):
    """Conjunctive attention: softmax(content) * softmax(position), renormalized.

    Renormalizing the product of two row-softmaxes equals a single softmax of the
    summed logits, which is how the combined map is computed.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        self.mode = cfg.variant.rsplit("_", 1)[-1]  # os | s | o
        self.zero = ZeroCoordinate(cfg.n_heads, cfg.head_dim, tied=cfg.tie_zero)

    def positions(self, x: torch.Tensor):
        path = self.path(x)
        k_star, q_star = self.zero.pair()
        shape = (*x.shape[:-1], self.n_heads, self.head_dim)
        k_p = self.rotate(k_star.to(x.dtype).expand(shape), path)
        q_p = self.rotate(q_star.to(x.dtype).expand(shape), path)
        return k_p, q_p

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        v = self.heads(self.v_proj(x))
        content = position = None
        if self.mode in ("os", "o"):
            q, k = self.heads(self.q_proj(x)), self.heads(self.k_proj(x))
            content = self.logits(q, k)
        if self.mode in ("os", "s"):
            k_p, q_p = self.positions(x)
            position = self.logits(q_p, k_p)
        if content is None:
            attn = masked_softmax(position)
        elif position is None:
            attn = masked_softmax(content)
        else:
            attn = masked_softmax(content + position)
        parts = {}
        if self.keep_trace:
            if content is not None:
                parts["A_X"] = masked_softmax(content)
            if position is not None:
                parts["A_P"] = masked_softmax(position)
        return self.finish(attn, v, **parts)


def make_attention(cfg: ModelConfig) -> Attention:
    if cfg.variant == "rope":
        return RopeAttention(cfg)
    if cfg.variant == "cope":
        return CopeAttention(cfg)
    if cfg.variant == "map_wm":
        return MapWMAttention(cfg)
    return MapEMAttention(cfg)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, mixer: nn.Module | None = None):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = mixer if mixer is not None else make_attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.mlp_ratio * cfg.d_model),
            nn.GELU(),
            nn.Linear(cfg.mlp_ratio * cfg.d_model, cfg.d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TokenModel(nn.Module):
    """Embedding -> blocks -> final norm -> untied head. Shared by transformers and SSMs."""

    kind = "base"

    def __init__(self, cfg, blocks: list[nn.Module]):
        super().__init__()
        self.config = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(blocks)
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        tokens = torch.as_tensor(tokens)
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ModelError(f"token id outside vocabulary of size {self.config.vocab_size}")
        x = self.embed(tokens.long()).to(self.head.weight.dtype)
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))


class Model(TokenModel):
    kind = "transformer"

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg, [Block(cfg) for _ in range(cfg.n_layers)])

    @property
    def attentions(self) -> list[Attention]:
        return [b.attn for b in self.blocks]

    def keep_traces(self, flag: bool = True) -> None:
        for a in self.attentions:
            a.keep_trace = flag
            if not flag:
                a.trace = None


def model_forward(model: Model, tokens) -> torch.Tensor:
    """Logits (..., t, vocab) for a token sequence or batch."""
    return model(torch.as_tensor(tokens))


def rope_attention(attn: RopeAttention, x: torch.Tensor) -> torch.Tensor:
    return attn(x)


def cope_attention(attn: CopeAttention, x: torch.Tensor) -> torch.Tensor:
    return attn(x)


def mapwm_attention(attn: MapWMAttention, x: torch.Tensor) -> torch.Tensor:
    return attn(x)


def mapem_attention(attn: MapEMAttention, x: torch.Tensor, variant: str | None = None) -> torch.Tensor:
    if variant is not None:
        attn.mode = variant
    return attn(x)


def linear_rope_ssm_equivalence(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    deltas: torch.Tensor,
    omega: torch.Tensor,
) -> float:
    """Max |difference| between linear rotary attention and its SSM recurrence.

    q, k: (t, d_h); v: (t, d_v); deltas: (t, d_h/2); omega: (d_h/2,).
    (i) rotate q_t and k_s by R(-theta) and take causal q.k-weighted sums of v;
    (ii) run h_t = R(omega*delta_t) h_{t-1} + k_t v_t^T and read out q_t^T h_t.
    """
    theta = torch.cumsum(deltas * omega, dim=0)
    qr = apply_rotation(q, theta, sign=-1)
    kr = apply_rotation(k, theta, sign=-1)
    scores = (qr @ kr.T).tril()
    y_attn = scores @ v

    step = deltas * omega
    h = torch.zeros(q.shape[-1], v.shape[-1], dtype=q.dtype)
    ys = []
    for t in range(q.shape[0]):
        # rotate each 2-row block of the state (columns are the value channels)
        h = apply_rotation(h.T, step[t]).T + torch.outer(k[t], v[t])
        ys.append(q[t] @ h)
    y_ssm = torch.stack(ys)
    return float((y_attn - y_ssm).abs().max())


def em_conjunctive_gram(qx, kx, qp, kp) -> tuple[torch.Tensor, torch.Tensor]:
    """Gram of explicit conjunctive codes vec(x^T p) vs the factorized product.

    Returns (explicit, factorized), both (t, t), without softmax.
    """
    g_q = torch.einsum("ia,ib->iab", qx, qp).flatten(1)
    g_k = torch.einsum("ia,ib->iab", kx, kp).flatten(1)
    explicit = g_q @ g_k.T
    factorized = (qx @ kx.T) * (qp @ kp.T)
    return explicit, factorized
