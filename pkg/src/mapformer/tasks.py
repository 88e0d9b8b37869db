"""Seedable generators for selective copy and forced navigation episodes.

Token layout of a vocabulary: objects first (ids ``0..K-1``), then actions,
then the blank, then the separator. Every episode carries per-token roles and
``(position, expected_token)`` recall targets.
"""

from __future__ import annotations

import functools
import gzip
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .numerics import SkewBasis


class TaskError(ValueError):
    pass


class Role(IntEnum):
    ACTION = 0
    OBSERVATION = 1
    BLANK = 2
    ANSWER = 3
    SEPARATOR = 4


@dataclass(frozen=True)
class VocabSpec:
    n_objects: int
    n_actions: int
    has_separator: bool = False

    @classmethod
    def navigation(cls, n_objects: int, n_dims: int) -> "VocabSpec":
        return cls(n_objects, 2 * n_dims)

    @classmethod
    def rotation_nav(cls, n_objects: int, block_size: int = 4) -> "VocabSpec":
        return cls(n_objects, block_size * (block_size - 1))

    @classmethod
    def copy(cls, n_symbols: int) -> "VocabSpec":
        return cls(n_symbols, 0, has_separator=True)

    @property
    def object_ids(self) -> range:
        return range(0, self.n_objects)

    @property
    def action_ids(self) -> range:
        return range(self.n_objects, self.n_objects + self.n_actions)

    @property
    def blank_id(self) -> int:
        return self.n_objects + self.n_actions

    @property
    def sep_id(self) -> int | None:
        return self.blank_id + 1 if self.has_separator else None

    @property
    def size(self) -> int:
        return self.n_objects + self.n_actions + 1 + int(self.has_separator)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(size=self.size, blank_id=self.blank_id, sep_id=self.sep_id,
                 action_ids=list(self.action_ids))
        return d


@dataclass(frozen=True)
class NavConfig:
    n_dims: int = 2
    grid_size: int = 64
    steps: int = 128
    p_empty: float = 0.5
    n_objects: int = 10
    wrap: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p_empty <= 1.0:
            raise TaskError("p_empty must lie in [0, 1]")
        if self.grid_size < 2:
            raise TaskError("grid_size must be >= 2")
        if self.n_dims < 1 or self.steps < 1:
            raise TaskError("need n_dims >= 1 and steps >= 1")

    @property
    def vocab(self) -> VocabSpec:
        return VocabSpec.navigation(self.n_objects, self.n_dims)


@dataclass(frozen=True)
class CopyConfig:
    n_copy: int = 128
    n_blank: int = 128
    n_symbols: int = 16

    @property
    def vocab(self) -> VocabSpec:
        return VocabSpec.copy(self.n_symbols)


@dataclass(frozen=True)
class RotationNavConfig:
    steps: int = 16
    m: int = 8
    p_empty: float = 0.5
    n_objects: int = 10
    block_size: int = 4
    quantum: float = 1e-6

    def __post_init__(self):
        if self.m < 3:
            raise TaskError("rotation step 2*pi/m needs m >= 3")

    @property
    def vocab(self) -> VocabSpec:
        return VocabSpec.rotation_nav(self.n_objects, self.block_size)


@dataclass
class Episode:
    tokens: list[int]
    roles: list[int]
    targets: list[tuple[int, int]]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    def to_json(self) -> str:
        return json.dumps(
            {"tokens": self.tokens, "roles": self.roles,
             "targets": [list(t) for t in self.targets], "meta": self.meta},
            sort_keys=True, separators=(",", ":"),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(list(d["tokens"]), list(d["roles"]),
                   [tuple(t) for t in d["targets"]], dict(d.get("meta", {})))


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def gen_selective_copy(
    n_copy: int, n_blank: int, vocab: VocabSpec, seed=None
) -> Episode:
    """Shuffled interleave of symbols and blanks, a separator, then the answer."""
    if n_copy < 1:
        raise TaskError("n_copy must be >= 1")
    if vocab.n_objects < 1 or vocab.sep_id is None:
        raise TaskError("copy vocabulary needs symbols and a separator")
    rng = _rng(seed)
    symbols = rng.integers(0, vocab.n_objects, size=n_copy)
    is_symbol = np.zeros(n_copy + n_blank, dtype=bool)
    is_symbol[rng.choice(n_copy + n_blank, size=n_copy, replace=False)] = True
    inputs, roles = [], []
    it = iter(symbols.tolist())
    for flag in is_symbol:
        if flag:
            inputs.append(next(it))
            roles.append(Role.OBSERVATION)
        else:
            inputs.append(vocab.blank_id)
            roles.append(Role.BLANK)
    return copy_episode_from_inputs(inputs, vocab, roles)


def copy_episode_from_inputs(inputs: list[int], vocab: VocabSpec, roles=None) -> Episode:
    answer = [tok for tok in inputs if tok != vocab.blank_id]
    if roles is None:
        roles = [Role.BLANK if tok == vocab.blank_id else Role.OBSERVATION for tok in inputs]
    start = len(inputs) + 1
    tokens = list(inputs) + [vocab.sep_id] + answer
    all_roles = [int(r) for r in roles] + [int(Role.SEPARATOR)] + [int(Role.ANSWER)] * len(answer)
    targets = [(start + i, tok) for i, tok in enumerate(answer)]
    meta = {"task": "copy", "n_copy": len(answer), "n_blank": len(inputs) - len(answer)}
    return Episode(tokens, all_roles, targets, meta)


def solve_copy_string(s: str, blank: str = "B") -> str:
    """Worked-example form of the copy task on letters."""
    return "".join(ch for ch in s if ch != blank)


def nav_moves(n_dims: int) -> np.ndarray:
    """Unit moves in action-id order: +axis0, -axis0, +axis1, -axis1, ..."""
    moves = np.zeros((2 * n_dims, n_dims), dtype=np.int64)
    for axis in range(n_dims):
        moves[2 * axis, axis] = 1
        moves[2 * axis + 1, axis] = -1
    return moves


class _Draws:
    """Pre-drawn random streams for one episode (actions, blank coins, fresh objects)."""

    def __init__(self, rng: np.random.Generator, steps: int, n_actions: int, n_objects: int, actions=None):
        if actions is None:
            self.actions = rng.integers(0, n_actions, size=steps).tolist()
        else:
            self.actions = [int(a) for a in actions]
        self.coins = rng.random(len(self.actions)).tolist()
        self.objects = rng.integers(0, n_objects, size=len(self.actions)).tolist()


def _observe(loc, memory: dict, coin: float, fresh: int, p_empty: float, vocab: VocabSpec):
    """Observation rule shared by grid and rotation navigation.

    A stored location re-emits its object (a recall target); otherwise the step
    is blank with probability p_empty, else a fresh object is stored there.
    Returns (token, role, is_target).
    """
    if loc in memory:
        return memory[loc], Role.OBSERVATION, True
    if coin < p_empty:
        return vocab.blank_id, Role.BLANK, False
    memory[loc] = fresh
    return fresh, Role.OBSERVATION, False


def gen_navigation(cfg: NavConfig, vocab: VocabSpec | None = None, seed=None, actions=None) -> Episode:
    """(a_1, o_1, ..., a_T, o_T) on a (toroidal) grid with recall targets.

    ``actions`` optionally fixes the action indices (0..2*n_dims-1) instead of
    sampling them uniformly.
    """
    vocab = vocab or cfg.vocab
    draws = _Draws(_rng(seed), cfg.steps, 2 * cfg.n_dims, vocab.n_objects, actions)
    moves = nav_moves(cfg.n_dims).tolist()
    pos = [0] * cfg.n_dims
    memory: dict[tuple, int] = {}
    tokens, roles, targets, trajectory = [], [], [], []
    first_action = vocab.action_ids[0]
    for a, coin, fresh in zip(draws.actions, draws.coins, draws.objects):
        step = moves[a]
        pos = [p + d for p, d in zip(pos, step)]
        if cfg.wrap:
            pos = [p % cfg.grid_size for p in pos]
        tokens.append(first_action + a)
        roles.append(int(Role.ACTION))
        loc = tuple(pos)
        trajectory.append(list(loc))
        tok, role, is_target = _observe(loc, memory, coin, fresh, cfg.p_empty, vocab)
        if is_target:
            targets.append((len(tokens), tok))
        tokens.append(tok)
        roles.append(int(role))
    meta = {"task": "nav", "config": asdict(cfg), "trajectory": trajectory}
    return Episode(tokens, roles, targets, meta)


def _plane_rotation(block_size: int, plane: int, angle: float) -> np.ndarray:
    basis = SkewBasis.standard(block_size)
    i, j = basis.planes[plane]
    r = np.eye(block_size)
    c, s = math.cos(angle), math.sin(angle)
    r[i, i] = r[j, j] = c
    r[i, j], r[j, i] = -s, s
    return r


def rotation_actions(cfg: RotationNavConfig) -> list[np.ndarray]:
    """Action matrices in id order: (+plane0, -plane0, +plane1, -plane1, ...)."""
    return [m.copy() for m in _rotation_actions(cfg.block_size, cfg.m)]


@functools.lru_cache(maxsize=None)
def _rotation_actions(block_size: int, m: int) -> tuple[np.ndarray, ...]:
    n_planes = block_size * (block_size - 1) // 2
    step = 2 * math.pi / m
    out = []
    for p in range(n_planes):
        out.append(_plane_rotation(block_size, p, step))
        out.append(_plane_rotation(block_size, p, -step))
    return tuple(out)


def quantize_state(state: np.ndarray, quantum: float) -> tuple:
    # +0.0 folds -0.0 so equal states hash equally
    return tuple((np.round(state / quantum).astype(np.int64) + 0).ravel().tolist())


def gen_rotation_nav(cfg: RotationNavConfig, seed=None, actions=None) -> Episode:
    """Navigation where each action left-multiplies the state by a 4D plane rotation."""
    vocab = cfg.vocab
    mats = _rotation_actions(cfg.block_size, cfg.m)
    draws = _Draws(_rng(seed), cfg.steps, len(mats), vocab.n_objects, actions)
    state = np.eye(cfg.block_size)
    memory: dict[tuple, int] = {}
    tokens, roles, targets = [], [], []
    for a, coin, fresh in zip(draws.actions, draws.coins, draws.objects):
        state = mats[a] @ state
        tokens.append(vocab.action_ids[a])
        roles.append(int(Role.ACTION))
        loc = quantize_state(state, cfg.quantum)
        tok, role, is_target = _observe(loc, memory, coin, fresh, cfg.p_empty, vocab)
        if is_target:
            targets.append((len(tokens), tok))
        tokens.append(tok)
        roles.append(int(role))
    meta = {"task": "rotation_nav", "config": asdict(cfg), "actions": draws.actions}
    return Episode(tokens, roles, targets, meta)


def loss_mask(episode: Episode) -> tuple[np.ndarray, np.ndarray]:
    """Per-token (loss_weight, accuracy_weight) arrays, indexed by target token position.

    Navigation trains on every observation/blank token and scores recall targets;
    copy trains and scores on the answer region.
    """
    n = len(episode.tokens)
    loss = np.zeros(n, dtype=np.float32)
    acc = np.zeros(n, dtype=np.float32)
    roles = np.asarray(episode.roles)
    if episode.meta.get("task") == "copy":
        loss[roles == Role.ANSWER] = 1.0
    else:
        loss[(roles == Role.OBSERVATION) | (roles == Role.BLANK)] = 1.0
    for pos, _ in episode.targets:
        acc[pos] = 1.0
    return loss, acc


def masked_accuracy(episode: Episode, predictions) -> tuple[float, int]:
    """Accuracy over target positions; no targets gives (1.0, 0)."""
    if not episode.targets:
        return 1.0, 0
    hits = sum(int(predictions[pos] == tok) for pos, tok in episode.targets)
    return hits / len(episode.targets), len(episode.targets)


# -- independent trackers used as oracles -----------------------------------------


def track_navigation_targets(episode: Episode) -> list[tuple[int, int]]:
    """Replay tokens with a plain dict keyed by position; rebuild recall targets."""
    cfg = episode.meta["config"]
    n_dims, size, wrap = cfg["n_dims"], cfg["grid_size"], cfg.get("wrap", True)
    n_objects = cfg["n_objects"]
    blank = n_objects + 2 * n_dims
    pos = [0] * n_dims
    seen: dict[tuple, int] = {}
    found = []
    for i in range(0, len(episode.tokens), 2):
        a = episode.tokens[i] - n_objects
        axis, sign = divmod(a, 2)
        pos[axis] += -1 if sign else 1
        if wrap:
            pos[axis] %= size
        key = tuple(pos)
        obs = episode.tokens[i + 1]
        if key in seen:
            found.append((i + 1, seen[key]))
        elif obs != blank:
            seen[key] = obs
    return found


def track_rotation_targets(episode: Episode) -> list[tuple[int, int]]:
    """Brute-force replay with explicit matrix products, comparing states by allclose."""
    cfg = RotationNavConfig(**episode.meta["config"])
    mats = rotation_actions(cfg)
    blank = cfg.vocab.blank_id
    state = np.eye(cfg.block_size)
    seen: list[tuple[np.ndarray, int]] = []
    found = []
    for i in range(0, len(episode.tokens), 2):
        state = mats[episode.tokens[i] - cfg.n_objects] @ state
        obs = episode.tokens[i + 1]
        hit = next((o for s, o in seen if np.abs(s - state).max() <= 1e-6), None)
        if hit is not None:
            found.append((i + 1, hit))
        elif obs != blank:
            seen.append((state.copy(), obs))
    return found


# -- splits, presets, dataset files -----------------------------------------------


PAPER_SPLITS = {
    "copy": {
        "train": CopyConfig(128, 128),
        "ood_dense": CopyConfig(128, 64),
        "ood_sparse": CopyConfig(128, 256),
    },
    "nav": {
        "train": dict(steps=128, p_empty=0.5, grid_size=64),
        "ood_dense": dict(steps=64, p_empty=0.2, grid_size=32),
        "ood_sparse": dict(steps=512, p_empty=0.8, grid_size=128),
    },
}


def episode_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Per-episode seed derived from the dataset seed, independent of worker count."""
    return np.random.SeedSequence([int(seed), int(index)])


def generate(task: str, cfg, n: int, seed: int) -> list[Episode]:
    """Generate ``n`` episodes of ``task`` in {copy, nav, rotation_nav}."""
    return [generate_one(task, cfg, seed, i) for i in range(n)]


def iter_episodes(task: str, cfg, n: int, seed: int) -> Iterator[Episode]:
    for i in range(n):
        yield generate_one(task, cfg, seed, i)


def generate_one(task: str, cfg, seed: int, index: int) -> Episode:
    s = episode_seed(seed, index)
    if task == "copy":
        return gen_selective_copy(cfg.n_copy, cfg.n_blank, cfg.vocab, s)
    if task == "nav":
        return gen_navigation(cfg, cfg.vocab, s)
    if task == "rotation_nav":
        return gen_rotation_nav(cfg, s)
    raise TaskError(f"unknown task {task!r}")


def task_config(task: str, d: dict):
    if task == "copy":
        return CopyConfig(**d)
    if task == "nav":
        return NavConfig(**d)
    if task == "rotation_nav":
        return RotationNavConfig(**d)
    raise TaskError(f"unknown task {task!r}")


def write_dataset(path: str | Path, episodes: Iterable[Episode], header: dict) -> dict:
    """JSON-lines episodes (gzip when the name ends in .gz) plus a ``.header.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_episodes = n_targets = 0
    # empty name and mtime=0 keep gzip output byte-identical across runs and paths
    raw = open(path, "wb")
    fh = gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) if path.suffix == ".gz" else raw
    try:
        for ep in episodes:
            fh.write(ep.to_json().encode() + b"\n")
            n_episodes += 1
            n_targets += len(ep.targets)
    finally:
        fh.close()
        raw.close()
    header = dict(header, n_episodes=n_episodes, n_targets=n_targets)
    header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True))
    return header


def header_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".header.json")


def read_dataset(path: str | Path) -> tuple[dict, list[Episode]]:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt") as fh:
        episodes = [Episode.from_dict(json.loads(line)) for line in fh if line.strip()]
    hp = header_path(path)
    header = json.loads(hp.read_text()) if hp.exists() else {}
    return header, episodes


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
