"""Probes over a trained model: token-role statistics, action geometry, attention maps, torus paths.

All probes read what the attention layers cached during an ordinary forward pass
(``last_deltas``, ``last_theta``, ``last_values``, ``trace``, and the delta
projector's ``last_delta_in``). Output files follow
``{root}/{run_id}/{probe}/{episode_id}.{csv|json}``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .models import MapAttention, MapEMAttention, Model
from .tasks import Episode, Role


class ProbeError(ValueError):
    pass


@dataclass
class ProbeReport:
    roles: dict = field(default_factory=dict)
    action_cosines: list | None = None
    action_labels: list | None = None
    attention: dict | None = None
    torus: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _layer(model: Model, layer: int):
    attn = model.blocks[layer].attn
    return attn


def _rotor_layer(model, layer: int) -> MapAttention:
    if not isinstance(model, Model):
        raise ProbeError("rotor probes need a transformer checkpoint")
    attn = _layer(model, layer)
    if not isinstance(attn, MapAttention):
        raise ProbeError(f"layer {layer} ({model.config.variant}) has no path-integration rotor")
    return attn


@torch.no_grad()
def _run(model, tokens: Sequence[int]):
    model.eval()
    model(torch.as_tensor([list(tokens)]))


def _stats(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "std": None, "count": 0}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "count": int(arr.size)}


@torch.no_grad()
def probe_roles(model: Model, episodes: Sequence[Episode], layer: int = 0) -> dict:
    """Per-role mean/std of ||delta_t||, ||omega * delta_t|| and ||v_t||.

    Delta statistics are reported only for path-integrating models.
    """
    attn = _layer(model, layer)
    has_rotor = isinstance(attn, MapAttention)
    per_role: dict[str, dict[str, list[float]]] = {}
    for ep in episodes:
        _run(model, ep.tokens)
        v = attn.last_values[0]  # (t, h, d)
        v_norm = v.flatten(-2).norm(dim=-1)
        if has_rotor:
            d = attn.last_deltas[0]  # (t, h, nb, K)
            d_norm = d.flatten(1).norm(dim=-1)
            ang = d * attn.bank.omega.to(d.dtype)[..., None]
            a_norm = ang.flatten(1).norm(dim=-1)
        for t, role in enumerate(ep.roles):
            bucket = per_role.setdefault(Role(role).name.lower(), {"delta": [], "angle": [], "value": []})
            bucket["value"].append(float(v_norm[t]))
            if has_rotor:
                bucket["delta"].append(float(d_norm[t]))
                bucket["angle"].append(float(a_norm[t]))
    return {
        role: {k: _stats(vals) for k, vals in b.items() if has_rotor or k == "value"}
        for role, b in sorted(per_role.items())
    }


@torch.no_grad()
def action_cosine_matrix(
    model: Model, action_ids: Sequence[int], layer: int = 0, context: Sequence[int] | None = None
) -> list[list[float | None]]:
    """Cosine similarity of the rank-r action vectors delta_in between every action pair.

    Each action is appended to ``context`` (empty by default) and its delta_in read
    from the rotor cache. Zero vectors give ``None`` entries.
    """
    attn = _rotor_layer(model, layer)
    vecs = []
    for a in action_ids:
        seq = list(context or []) + [int(a)]
        _run(model, seq)
        vecs.append(attn.delta_proj.last_delta_in[0, -1].double())
    out: list[list[float | None]] = []
    for u in vecs:
        row = []
        for w in vecs:
            nu, nw = float(u.norm()), float(w.norm())
            row.append(None if nu == 0.0 or nw == 0.0 else float(u @ w) / (nu * nw))
        out.append(row)
    return out


def recompose(a_x: np.ndarray, a_p: np.ndarray) -> np.ndarray:
    """Row-renormalized elementwise product of two attention maps."""
    prod = a_x * a_p
    return prod / prod.sum(-1, keepdims=True)


def row_entropy(a: np.ndarray) -> np.ndarray:
    p = np.clip(a, 1e-30, None)
    return -(a * np.log(p)).sum(-1)


@torch.no_grad()
def export_attention(
    model: Model, episode: Episode, layer: int = 0, out_dir: str | Path | None = None
) -> dict:
    """Per-head attention maps of one episode, with recall-query rows flagged.

    A query row ``pos - 1`` predicts the target token at ``pos``. When ``out_dir``
    is given, writes ``{name}_head{h}.csv`` and ``flags.json`` there.
    """
    model.keep_traces(True)
    try:
        _run(model, episode.tokens)
        trace = _layer(model, layer).trace
    finally:
        model.keep_traces(False)
    maps = {"A": trace.A[0].double().numpy()}
    if trace.A_X is not None:
        maps["A_X"] = trace.A_X[0].double().numpy()
    if trace.A_P is not None:
        maps["A_P"] = trace.A_P[0].double().numpy()
    flagged = [pos - 1 for pos, _ in episode.targets]
    result = {"maps": maps, "flagged_rows": flagged, "targets": [list(t) for t in episode.targets]}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, arr in maps.items():
            for h in range(arr.shape[0]):
                _write_csv(out / f"{name}_head{h}.csv", arr[h])
        (out / "flags.json").write_text(json.dumps(
            {"flagged_rows": flagged, "targets": result["targets"]}, sort_keys=True))
    return result


@torch.no_grad()
def torus_export(
    model: Model, episode: Episode, freq_indices: tuple[int, int] = (0, 1), head: int = 0, layer: int = 0
) -> np.ndarray:
    """(t, 4) array of (cos a, sin a, cos b, sin b) for two cumulative rotation angles."""
    attn = _rotor_layer(model, layer)
    _run(model, episode.tokens)
    if attn.last_theta is None:
        raise ProbeError("torus export needs commutative 2x2 rotations")
    theta = attn.last_theta[0, :, head, :, 0].double()  # (t, n_b)
    a, b = theta[:, freq_indices[0]], theta[:, freq_indices[1]]
    return torch.stack([a.cos(), a.sin(), b.cos(), b.sin()], dim=-1).numpy()


def _write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in np.atleast_2d(rows):
            w.writerow(["" if x is None else repr(float(x)) for x in row])


def probe_path(root: str | Path, run_id: str, probe: str, episode_id: str, ext: str) -> Path:
    p = Path(root) / run_id / probe / f"{episode_id}.{ext}"
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def write_matrix_csv(path: Path, matrix) -> None:
    _write_csv(path, [[None if x is None else x for x in row] for row in matrix])
