"""Checkpoint archive: named parameter arrays plus the JSON model config."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_TAG = "mapformer-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _model_classes():
    from .mampa import SsmConfig, SsmModel
    from .models import Model, ModelConfig

    return {"transformer": (Model, ModelConfig), "ssm": (SsmModel, SsmConfig)}


def save_checkpoint(path: str | Path, model: torch.nn.Module, extra: dict | None = None) -> Path:
    """Write a zip archive of ``.npy`` tensors and a ``meta.json`` entry.

    Entries carry a fixed timestamp so identical parameters give identical bytes.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT_TAG,
        "kind": model.kind,
        "config": json.loads(model.config.to_json()),
        "dtype": str(next(model.parameters()).dtype).replace("torch.", ""),
        "extra": extra or {},
    }
    state = model.state_dict()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("meta.json", (1980, 1, 1, 0, 0, 0)), json.dumps(meta, sort_keys=True))
        for name in sorted(state):
            buf = io.BytesIO()
            np.save(buf, state[name].detach().cpu().numpy(), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"tensors/{name}.npy", (1980, 1, 1, 0, 0, 0)), buf.getvalue())
    return path


def read_meta(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
    if meta.get("format") != FORMAT_TAG:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format')!r}")
    return meta


def load_checkpoint(path: str | Path) -> torch.nn.Module:
    meta = read_meta(path)
    classes = _model_classes()
    if meta["kind"] not in classes:
        raise CheckpointError(f"unknown model kind {meta['kind']!r}")
    model_cls, cfg_cls = classes[meta["kind"]]
    model = model_cls(cfg_cls.from_dict(meta["config"]))
    model.to(getattr(torch, meta["dtype"]))
    state = {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            if name.startswith("tensors/"):
                arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
                state[name[len("tensors/"):-len(".npy")]] = torch.from_numpy(arr)
    model.load_state_dict(state)
    return model


def parameter_checksum(model: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
