"""Single-epoch training and masked-accuracy evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .tasks import Episode, Role, loss_mask

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.05
    batch_size: int = 128
    n_sequences: int = 200_000
    seed: int = 0
    eval_every: int = 100
    precision: int = 32
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.betas = tuple(self.betas)

    @property
    def total_steps(self) -> int:
        return max(1, math.ceil(self.n_sequences / self.batch_size))


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def linear_decay(step: int, total: int) -> float:
    """Multiplier on the base learning rate: 1 - step/total, clipped at zero."""
    return max(0.0, 1.0 - step / total)


@dataclass
class Batch:
    inputs: torch.Tensor  # (B, T-1)
    targets: torch.Tensor  # (B, T-1)
    loss_w: torch.Tensor
    acc_w: torch.Tensor


def collate(episodes: Sequence[Episode], pad_id: int = 0) -> Batch:
    """Right-pad to the longest episode; position i of the outputs predicts token i+1."""
    t = max(len(e.tokens) for e in episodes)
    tok = np.full((len(episodes), t), pad_id, dtype=np.int64)
    lw = np.zeros((len(episodes), t), dtype=np.float32)
    aw = np.zeros((len(episodes), t), dtype=np.float32)
    for i, ep in enumerate(episodes):
        n = len(ep.tokens)
        tok[i, :n] = ep.tokens
        lw[i, :n], aw[i, :n] = loss_mask(ep)
    tok_t = torch.from_numpy(tok)
    return Batch(tok_t[:, :-1], tok_t[:, 1:], torch.from_numpy(lw[:, 1:]), torch.from_numpy(aw[:, 1:]))


def batch_loss(model, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Masked mean cross-entropy and per-position correctness."""
    logits = model(batch.inputs)
    ce = F.cross_entropy(logits.transpose(1, 2), batch.targets, reduction="none")
    w = batch.loss_w.to(ce.dtype)
    loss = (ce * w).sum() / w.sum().clamp_min(1.0)
    correct = logits.argmax(-1) == batch.targets
    return loss, correct


def batches(episodes: Iterable[Episode], size: int) -> Iterable[list[Episode]]:
    buf: list[Episode] = []
    for ep in episodes:
        buf.append(ep)
        if len(buf) == size:
            yield buf
            buf = []
    if buf:
        yield buf


@torch.no_grad()
def evaluate(model, episodes: Sequence[Episode], batch_size: int = 64) -> dict:
    """Accuracy over recall targets plus mean masked loss.

    ``accuracy`` is None when the dataset has no targets at all.
    """
    model.eval()
    hits = n_targets = 0
    loss_sum = loss_count = 0.0
    for chunk in batches(episodes, batch_size):
        batch = collate(chunk)
        logits = model(batch.inputs)
        ce = F.cross_entropy(logits.float().transpose(1, 2), batch.targets, reduction="none")
        loss_sum += float((ce * batch.loss_w).sum())
        loss_count += float(batch.loss_w.sum())
        correct = (logits.argmax(-1) == batch.targets).float()
        hits += int((correct * batch.acc_w).sum())
        n_targets += int(batch.acc_w.sum())
    model.train()
    return {
        "accuracy": hits / n_targets if n_targets else None,
        "n_targets": n_targets,
        "loss": loss_sum / loss_count if loss_count else None,
    }


def _snapshot(model, step: int, loss: float) -> dict:
    norms = {n: float(p.detach().norm()) for n, p in model.named_parameters()}
    return {"step": step, "loss": loss, "param_norms": norms}


@torch.no_grad()
def angle_norms(model, episodes: Sequence[Episode]) -> dict | None:
    """Per-role mean ||omega * delta_t|| from the first rotor layer's last forward.

    Gives the through-training curve of angle increments for action vs observation
    tokens; None for models without a path-integrating layer.
    """
    for attn in getattr(model, "attentions", []):
        deltas = getattr(attn, "last_deltas", None)
        if deltas is not None and hasattr(attn, "bank"):
            break
    else:
        return None
    ang = deltas * attn.bank.omega.to(deltas.dtype)[..., None]
    norms = ang.flatten(2).norm(dim=-1)  # (B, t)
    sums: dict[str, list[float]] = {}
    for b, ep in enumerate(episodes):
        for t, role in enumerate(ep.roles[: norms.shape[1]]):
            acc = sums.setdefault(Role(role).name.lower(), [0.0, 0])
            acc[0] += float(norms[b, t])
            acc[1] += 1
    return {role: total / n for role, (total, n) in sorted(sums.items())}


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay,
    )


def train(
    model,
    dataset: Iterable[Episode],
    cfg: TrainConfig,
    eval_sets: dict[str, Sequence[Episode]] | None = None,
    metrics_path: str | Path | None = None,
    start_step: int = 0,
    optimizer_state: dict | None = None,
    max_steps: int | None = None,
    on_eval: Callable[[int, dict], None] | None = None,
):
    """One pass of AdamW with linear decay to zero over ``cfg.total_steps``.

    ``dataset`` is consumed in order; when resuming, pass the remaining episodes
    together with ``start_step`` and the saved ``optimizer_state``.
    Returns (model, metrics, optimizer).
    """
    if cfg.precision == 64:
        model.double()
    opt = make_optimizer(model, cfg)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    total = cfg.total_steps
    metrics: list[dict] = []
    sink = open(metrics_path, "a") if metrics_path else None
    t0 = time.time()

    def record(step, split, res):
        row = {"step": step, "split": split, "loss": res.get("loss"),
               "accuracy": res.get("accuracy"), "n_targets": res.get("n_targets"),
               "wallclock": round(time.time() - t0, 3)}
        if "angle_norm" in res:
            row["angle_norm"] = res["angle_norm"]
        metrics.append(row)
        if sink:
            sink.write(json.dumps(row) + "\n")
            sink.flush()
        if on_eval:
            on_eval(step, row)

    step = start_step
    model.train()
    seen_any = False
    try:
        for chunk in batches(dataset, cfg.batch_size):
            seen_any = True
            if step >= total or (max_steps is not None and step - start_step >= max_steps):
                break
            lr = cfg.lr * linear_decay(step, total)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = collate(chunk)
            loss, correct = batch_loss(model, batch)
            if not torch.isfinite(loss):
                snap = _snapshot(model, step, loss.item())
                raise TrainingDiverged(f"non-finite loss at step {step}", snap)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            step += 1
            if cfg.eval_every and step % cfg.eval_every == 0:
                acc_w = batch.acc_w
                n = int(acc_w.sum())
                acc = float((correct.float() * acc_w).sum()) / n if n else None
                record(step, "train", {"loss": loss.item(), "accuracy": acc, "n_targets": n,
                                      "angle_norm": angle_norms(model, chunk)})
                for name, eps in (eval_sets or {}).items():
                    record(step, name, evaluate(model, eps))
                log.info("step %d loss %.4f acc %s", step, loss.item(), acc)
        if not seen_any:
            raise ValueError("training dataset is empty")
    finally:
        if sink:
            sink.close()
    model.train_step = step
    return model, metrics, opt
