"""Gridworld navigation harness: pruning collapse and recovery at desk scale.

A tiny instruction-conditioned policy is behaviour-cloned from BFS-optimal
actions, then evaluated dense, pruned and corrected. Everything is
deterministic for a fixed config.

Observation (per step): the 7x7 obstacle window centred on the agent
(off-grid counts as blocked), the goal offset divided by the grid size, its
absolute values and their mean, a goal-in-window flag and a constant 1 (56
features, so every pruned layer takes 4:8 as well as 2:4). The instruction code is the compass sector of the goal as
seen from the start. An episode is unsafe if the agent ever tries to move
into an obstacle or off the grid; the move is refused and counts as a step.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics
from .errors import NumericError, ValidationError
from .gluecore import RankClampWarning, prime_model
from .pruner import (PruneSpec, collect_calibration_stats, layer_bytes, match_memory_budget,
                     prune_checkpoint)
from .runtime import LowRankLinear, Model, apply_corrections, cost_report
from .weightstore import Checkpoint, LayerRecord, NMSparseMatrix, storage_bytes

log = logging.getLogger(__name__)

# (dx, dy) for up, right, down, left
ACTIONS = np.array([[0, -1], [1, 0], [0, 1], [-1, 0]])
ACTION_NAMES = ("up", "right", "down", "left")
WINDOW = 7
D_OBS = WINDOW * WINDOW + 7


@dataclass(eq=False)
class GridTask:
    task_id: int
    grid: np.ndarray  # (size, size) bool, True = obstacle; indexed [y, x]
    start: tuple[int, int]  # (x, y)
    goal: tuple[int, int]
    instruction: int
    max_steps: int = 64

    @property
    def size(self) -> int:
        return self.grid.shape[0]


@dataclass
class EpisodeResult:
    task_id: int
    success: bool
    unsafe: bool
    path_length: int
    dist_to_goal: int
    positions: list = field(default_factory=list, repr=False)
    actions: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {"task_id": self.task_id, "success": self.success, "unsafe": self.unsafe,
                "path_length": self.path_length, "dist_to_goal": self.dist_to_goal}


@dataclass
class EvalSummary:
    n: int
    success_rate: float
    unsafe_rate: float
    mean_path_length: float
    mean_dist_to_goal: float


# ---------------------------------------------------------------- tasks

def bfs_distances(grid: np.ndarray, goal: tuple[int, int]) -> np.ndarray:
    """Shortest 4-connected step counts to ``goal``; -1 where unreachable."""
    h, w = grid.shape
    dist = np.full((h, w), -1, dtype=np.int64)
    gx, gy = goal
    dist[gy, gx] = 0
    q = deque([(gx, gy)])
    while q:
        x, y = q.popleft()
        for dx, dy in ACTIONS:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and not grid[ny, nx] and dist[ny, nx] < 0:
                dist[ny, nx] = dist[y, x] + 1
                q.append((nx, ny))
    return dist


def instruction_code(start, goal, n_codes: int = 8) -> int:
    """Compass sector of ``goal`` relative to ``start`` (0 = north, clockwise)."""
    dx = goal[0] - start[0]
    dy = start[1] - goal[1]  # y grows downward
    angle = math.atan2(dx, dy) % (2 * math.pi)
    return int(round(angle / (2 * math.pi / n_codes))) % n_codes


def room_of(pos, size: int) -> int:
    half = size // 2
    return (pos[1] >= half) * 2 + (pos[0] >= half)


def generate_tasks(seed: int, count: int, size: int = 16, n_obstacles: int = 4, n_codes: int = 8,
                   max_steps: int = 64, min_dist: int = 6, cluster: int = 4) -> list[GridTask]:
    """Random solvable navigation tasks, deterministic per seed."""
    if count < 1:
        raise ValidationError("count must be >= 1")
    rng = np.random.default_rng(seed)
    tasks = []
    while len(tasks) < count:
        grid = np.zeros((size, size), dtype=bool)
        for _ in range(n_obstacles):
            ch, cw = rng.integers(2, cluster + 1, size=2)
            y0, x0 = rng.integers(0, size - 1, size=2)
            grid[y0:y0 + ch, x0:x0 + cw] = True
        free = np.argwhere(~grid)
        if len(free) < 2:
            continue
        i, j = rng.choice(len(free), size=2, replace=False)
        start = (int(free[i][1]), int(free[i][0]))
        goal = (int(free[j][1]), int(free[j][0]))
        dist = bfs_distances(grid, goal)
        d = dist[start[1], start[0]]
        if d < min_dist or d > max_steps // 2:
            continue
        tasks.append(GridTask(len(tasks), grid, start, goal, instruction_code(start, goal, n_codes), max_steps))
    return tasks


def is_solvable(task: GridTask) -> bool:
    return bfs_distances(task.grid, task.goal)[task.start[1], task.start[0]] >= 0


def expert_actions(grid: np.ndarray, goal, dist: Optional[np.ndarray] = None) -> np.ndarray:
    """BFS-optimal action for every reachable cell (-1 elsewhere and at the goal).

    Among optimal moves the one along the axis with the larger remaining
    offset is preferred, then the fixed order up, right, down, left.
    """
    if dist is None:
        dist = bfs_distances(grid, goal)
    h, w = grid.shape
    out = np.full((h, w), -1, dtype=np.int64)
    for y in range(h):
        for x in range(w):
            d = dist[y, x]
            if d <= 0:
                continue
            best, best_key = -1, None
            for a, (dx, dy) in enumerate(ACTIONS):
                nx, ny = x + dx, y + dy
                if 0 <= nx < w and 0 <= ny < h and dist[ny, nx] == d - 1:
                    along = abs(goal[0] - x) if dx else abs(goal[1] - y)
                    key = (-along, a)
                    if best_key is None or key < best_key:
                        best, best_key = a, key
            out[y, x] = best
    return out


# ---------------------------------------------------------- observations

def _padded(grids: np.ndarray) -> np.ndarray:
    r = WINDOW // 2
    return np.pad(grids, ((0, 0), (r, r), (r, r)), constant_values=True)


_WIN = np.arange(WINDOW)


def observe(padded: np.ndarray, which: np.ndarray, pos: np.ndarray, goal: np.ndarray, size: int) -> np.ndarray:
    """Observation rows for agents at ``pos`` (n, 2) on grids ``padded[which]``."""
    ys = pos[:, 1, None, None] + _WIN[None, :, None]
    xs = pos[:, 0, None, None] + _WIN[None, None, :]
    win = padded[which[:, None, None], ys, xs].reshape(len(pos), -1).astype(np.float64)
    off = (goal - pos) / float(size)
    r = WINDOW // 2
    visible = np.all(np.abs(goal - pos) <= r, axis=1, keepdims=True)
    return np.concatenate([win, off, np.abs(off), np.abs(off).sum(axis=1, keepdims=True) / 2,
                           visible, np.ones((len(pos), 1))], axis=1)


# ---------------------------------------------------------------- policy

COMPONENTS = ("vision", "language", "backbone", "head")


def policy_topology(width: int = 64, emb_dim: Optional[int] = None, n_codes: int = 8,
                    n_actions: int = 4) -> list[LayerRecord]:
    e = emb_dim if emb_dim is not None else width // 4
    return [
        LayerRecord("vision.enc", "linear", D_OBS, width, tag="vision"),
        LayerRecord("vision.act", "nonlinearity", width, width, op="relu", tag="vision"),
        LayerRecord("language.embed", "embedding", width, width + e, tag="language"),
        LayerRecord("backbone.fc1", "linear", width + e, width, tag="backbone"),
        LayerRecord("backbone.act1", "nonlinearity", width, width, op="relu", tag="backbone"),
        LayerRecord("backbone.fc2", "linear", width, width, tag="backbone"),
        LayerRecord("backbone.act2", "nonlinearity", width, width, op="relu", tag="backbone"),
        LayerRecord("head", "linear", width, n_actions, tag="head"),
    ]


def layers_with_tag(ckpt: Checkpoint, *tags: str) -> list[str]:
    return [rec.name for rec in ckpt.linear_layers() if rec.tag in tags]


def expert_dataset(tasks: Sequence[GridTask]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Every reachable non-goal cell of every task, labelled with the expert action."""
    xs, cs, ys = [], [], []
    for t in tasks:
        dist = bfs_distances(t.grid, t.goal)
        act = expert_actions(t.grid, t.goal, dist)
        cells = np.argwhere(act >= 0)  # (y, x)
        pos = cells[:, ::-1]
        which = np.zeros(len(pos), dtype=np.int64)
        xs.append(observe(_padded(t.grid[None]), which, pos, np.array(t.goal), t.size))
        cs.append(np.full(len(pos), t.instruction))
        ys.append(act[cells[:, 0], cells[:, 1]])
    return np.concatenate(xs), np.concatenate(cs), np.concatenate(ys)


@dataclass
class TrainConfig:
    width: int = 64
    epochs: int = 30
    lr: float = 0.1
    batch: int = 128
    n_codes: int = 8


_PARAM_ORDER = ("vision.enc", "vision.enc.bias", "language.embed", "backbone.fc1", "backbone.fc1.bias",
                "backbone.fc2", "backbone.fc2.bias", "head", "head.bias")


def _init_params(rng: np.random.Generator, width: int, emb: int, n_codes: int) -> dict[str, np.ndarray]:
    def he(out, inp):
        return rng.standard_normal((out, inp)) * math.sqrt(2.0 / inp)

    return {
        "vision.enc": he(width, D_OBS), "vision.enc.bias": np.zeros(width),
        "language.embed": rng.standard_normal((n_codes, emb)) * 0.5,
        "backbone.fc1": he(width, width + emb), "backbone.fc1.bias": np.zeros(width),
        "backbone.fc2": he(width, width), "backbone.fc2.bias": np.zeros(width),
        "head": he(4, width) * 0.5, "head.bias": np.zeros(4),
    }


def _loss_and_grads(p: dict, x: np.ndarray, c: np.ndarray, y: np.ndarray, grads: bool = True):
    """Cross-entropy of the policy on a row-major batch, with manual backprop."""
    n = len(y)
    a0 = x @ p["vision.enc"].T + p["vision.enc.bias"]
    h0 = np.maximum(a0, 0.0)
    z = np.concatenate([h0, p["language.embed"][c]], axis=1)
    a1 = z @ p["backbone.fc1"].T + p["backbone.fc1.bias"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ p["backbone.fc2"].T + p["backbone.fc2.bias"]
    h2 = np.maximum(a2, 0.0)
    logits = h2 @ p["head"].T + p["head.bias"]
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(n), y]))
    if not grads:
        return loss, None
    g = np.exp(logits - lse[:, None])
    g[np.arange(n), y] -= 1.0
    g /= n
    out = {"head": g.T @ h2, "head.bias": g.sum(axis=0)}
    g = (g @ p["head"]) * (a2 > 0)
    out["backbone.fc2"] = g.T @ h1
    out["backbone.fc2.bias"] = g.sum(axis=0)
    g = (g @ p["backbone.fc2"]) * (a1 > 0)
    out["backbone.fc1"] = g.T @ z
    out["backbone.fc1.bias"] = g.sum(axis=0)
    gz = g @ p["backbone.fc1"]
    w = h0.shape[1]
    ge = np.zeros_like(p["language.embed"])
    np.add.at(ge, c, gz[:, w:])
    out["language.embed"] = ge
    g = gz[:, :w] * (a0 > 0)
    out["vision.enc"] = g.T @ x
    out["vision.enc.bias"] = g.sum(axis=0)
    return loss, out


def _params_to_checkpoint(p: dict, cfg: TrainConfig, emb: int, meta: dict) -> Checkpoint:
    tensors = {}
    for k in _PARAM_ORDER:
        v = p[k].astype(np.float32)
        tensors[k] = v[None, :] if v.ndim == 1 else v
    return Checkpoint(tensors, policy_topology(cfg.width, emb, cfg.n_codes), meta)


def train_policy(tasks: Sequence[GridTask], seed: int, cfg: Optional[TrainConfig] = None) -> Checkpoint:
    """Behaviour cloning on BFS-optimal actions with plain minibatch SGD.

    The returned checkpoint stores float32 weights; its metadata carries the
    per-epoch training loss (``loss_trace``, first entry at initialisation).

    Raises:
        NumericError: if the loss becomes non-finite.
    """
    if not tasks:
        raise ValidationError("need at least one training task")
    cfg = cfg or TrainConfig()
    emb = cfg.width // 4
    rng = np.random.default_rng(seed)
    p = _init_params(rng, cfg.width, emb, cfg.n_codes)
    x, c, y = expert_dataset(tasks)
    trace = [_loss_and_grads(p, x, c, y, grads=False)[0]]
    n = len(y)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * epoch / cfg.epochs))
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = perm[start:start + cfg.batch]
            loss, g = _loss_and_grads(p, x[idx], c[idx], y[idx])
            if not math.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch}")
            for k in p:
                p[k] = p[k] - lr * g[k]
        trace.append(_loss_and_grads(p, x, c, y, grads=False)[0])
        log.debug("epoch %d loss %.4f", epoch, trace[-1])
    if not all(math.isfinite(v) for v in trace):
        raise NumericError("training loss is non-finite")
    meta = {"model": "tiny-nav-policy", "dtype": "f32", "seed": str(seed), "width": str(cfg.width),
            "epochs": str(cfg.epochs), "samples": str(n), "loss_trace": ",".join(f"{v:.6g}" for v in trace)}
    return _params_to_checkpoint(p, cfg, emb, meta)


def loss_trace(policy: Checkpoint) -> list[float]:
    return [float(v) for v in policy.metadata["loss_trace"].split(",")]


# --------------------------------------------------------------- rollouts

class ExpertPolicy:
    """Acts with the BFS-optimal move; used as a reference policy."""

    def __init__(self, tasks: Sequence[GridTask]):
        self.table = [expert_actions(t.grid, t.goal) for t in tasks]

    def __call__(self, which, obs, codes, pos):
        return np.array([self.table[i][p[1], p[0]] for i, p in zip(which, pos)], dtype=np.int64)


class ModelPolicy:
    """Greedy argmax over a model's action logits (ties go to the lower action)."""

    def __init__(self, model):
        self.model = Model.from_checkpoint(model) if isinstance(model, Checkpoint) else model

    def __call__(self, which, obs, codes, pos):
        logits = self.model.forward(obs.T, codes)
        return np.argmax(logits, axis=0)


def unsafe_from_trajectory(task: GridTask, positions, actions) -> bool:
    """Recompute the safety flag from logged positions and actions."""
    for (x, y), a in zip(positions, actions):
        nx, ny = x + ACTIONS[a][0], y + ACTIONS[a][1]
        if not (0 <= nx < task.size and 0 <= ny < task.size) or task.grid[ny, nx]:
            return True
    return False


def rollout(policy, tasks: Sequence[GridTask], keep_trajectories: bool = True) -> list[EpisodeResult]:
    """Run all tasks in lock-step. ``policy`` is a model, checkpoint or callable.

    A callable receives ``(task_indices, obs_rows, codes, positions)`` for
    the still-active episodes and returns one action per episode.
    """
    if isinstance(policy, (Model, Checkpoint)):
        policy = ModelPolicy(policy)
    sizes = {t.size for t in tasks}
    if len(sizes) != 1:
        raise ValidationError("all tasks in a rollout must share a grid size")
    size = sizes.pop()
    n = len(tasks)
    grids = np.stack([t.grid for t in tasks])
    padded = _padded(grids)
    pos = np.array([t.start for t in tasks], dtype=np.int64)
    goal = np.array([t.goal for t in tasks], dtype=np.int64)
    codes = np.array([t.instruction for t in tasks], dtype=np.int64)
    max_steps = np.array([t.max_steps for t in tasks])
    done = np.all(pos == goal, axis=1)
    steps = np.zeros(n, dtype=np.int64)
    unsafe = np.zeros(n, dtype=bool)
    traj_pos = [[tuple(p)] for p in pos.tolist()]
    traj_act: list[list[int]] = [[] for _ in range(n)]
    for _ in range(int(max_steps.max())):
        active = np.flatnonzero(~done & (steps < max_steps))
        if active.size == 0:
            break
        obs = observe(padded, active, pos[active], goal[active], size)
        act = np.asarray(policy(active, obs, codes[active], pos[active]), dtype=np.int64)
        new = pos[active] + ACTIONS[act]
        inside = np.all((new >= 0) & (new < size), axis=1)
        blocked = ~inside.copy()
        ok = np.flatnonzero(inside)
        blocked[ok] = grids[active[ok], new[ok, 1], new[ok, 0]]
        unsafe[active[blocked]] = True
        moved = active[~blocked]
        pos[moved] = new[~blocked]
        steps[active] += 1
        done[active] = np.all(pos[active] == goal[active], axis=1)
        if keep_trajectories:
            for i, a in zip(active.tolist(), act.tolist()):
                traj_act[i].append(a)
                traj_pos[i].append(tuple(pos[i].tolist()))
    dist = np.abs(pos - goal).sum(axis=1)
    return [EpisodeResult(t.task_id, bool(dist[i] == 0), bool(unsafe[i]), int(steps[i]), int(dist[i]),
                          traj_pos[i] if keep_trajectories else [], traj_act[i] if keep_trajectories else [])
            for i, t in enumerate(tasks)]


def summarize(results: Sequence[EpisodeResult]) -> EvalSummary:
    n = len(results)
    return EvalSummary(n, sum(r.success for r in results) / n, sum(r.unsafe for r in results) / n,
                       sum(r.path_length for r in results) / n, sum(r.dist_to_goal for r in results) / n)


def evaluate(policy, tasks: Sequence[GridTask]) -> tuple[list[EpisodeResult], EvalSummary]:
    results = rollout(policy, tasks)
    return results, summarize(results)


# ------------------------------------------------------------ calibration

@dataclass(eq=False)
class Trajectory:
    task_id: int
    obs: np.ndarray  # (T, D_OBS)
    codes: np.ndarray  # (T,)
    positions: list
    key_event: Optional[int]  # first step that enters the goal's room

    def __len__(self):
        return len(self.codes)


def key_event_index(positions, goal, size: int) -> Optional[int]:
    room = room_of(goal, size)
    for t in range(1, len(positions)):
        if room_of(positions[t], size) == room and room_of(positions[t - 1], size) != room:
            return t
    return None


def expert_trajectories(tasks: Sequence[GridTask]) -> list[Trajectory]:
    """States visited by the expert on each task (goal state excluded)."""
    out = []
    for t, res in zip(tasks, rollout(ExpertPolicy(tasks), tasks)):
        states = np.array(res.positions[:-1] if res.success else res.positions, dtype=np.int64)
        which = np.zeros(len(states), dtype=np.int64)
        obs = observe(_padded(t.grid[None]), which, states, np.array(t.goal), t.size)
        out.append(Trajectory(t.task_id, obs, np.full(len(states), t.instruction), [tuple(s) for s in states],
                              key_event_index([tuple(s) for s in states], t.goal, t.size)))
    return out


def window_bounds(length: int, event: int, fraction: float) -> tuple[int, int]:
    """Inclusive step range kept around ``event``.

    The half-width is ``fraction / 2 * length`` rounded to nearest (ties to
    even); ``fraction == 1`` keeps the whole trajectory.
    """
    if fraction >= 1.0:
        return 0, length - 1
    half = round(fraction / 2 * length)
    return max(0, event - half), min(length - 1, event + half)


def calibration_window(trajectories: Sequence[Trajectory], fraction: float):
    """Select the states near each trajectory's key event.

    Returns ``(obs, codes, skipped)`` where ``skipped`` counts trajectories
    without a key event (only relevant when ``fraction < 1``).
    """
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction {fraction} outside (0, 1]")
    obs, codes, skipped = [], [], 0
    for tr in trajectories:
        if fraction < 1.0 and tr.key_event is None:
            skipped += 1
            continue
        lo, hi = window_bounds(len(tr), tr.key_event or 0, fraction)
        obs.append(tr.obs[lo:hi + 1])
        codes.append(tr.codes[lo:hi + 1])
    if not obs:
        return np.zeros((0, D_OBS)), np.zeros(0, dtype=np.int64), skipped
    return np.concatenate(obs), np.concatenate(codes), skipped


def samples_to_checkpoint(obs: np.ndarray, codes: Optional[np.ndarray] = None) -> Checkpoint:
    tensors = {"inputs": np.asarray(obs, dtype=np.float64)}
    if codes is not None:
        tensors["codes"] = np.asarray(codes, dtype=np.float64).reshape(-1, 1)
    return Checkpoint(tensors, [], {"kind": "calibration", "samples": str(len(obs))})


def samples_from_checkpoint(ckpt: Checkpoint):
    if "inputs" not in ckpt.tensors:
        raise ValidationError("calibration file has no 'inputs' tensor")
    codes = ckpt.tensors.get("codes")
    return np.asarray(ckpt.tensors["inputs"]), None if codes is None else np.asarray(codes).reshape(-1).astype(np.int64)


# ------------------------------------------------------------- experiment

METHODS = ("dense", "full_sparse", "sparse_backbone", "sparse_vision", "memory_matched", "gluestick",
           "gluestick_random", "svd_only", "svd_bytes", "windowed")


@dataclass
class ExperimentConfig:
    seeds: tuple = (0, 1, 2)
    train_seed: int = 0
    grid: int = 16
    obstacles: int = 4
    codes: int = 8
    max_steps: int = 64
    width: int = 64
    train_tasks: int = 400
    eval_tasks: int = 200
    calib_tasks: int = 200
    epochs: int = 30
    lr: float = 0.1
    batch: int = 128
    ranks: tuple = (4, 8, 16, 28, 64)
    recovery_r: int = 28
    methods: tuple = METHODS
    prune_method: str = "wanda"
    nm: str = "2:4"
    calib_fraction: float = 0.05
    output_dir: str = ""

    @property
    def n_keep(self) -> int:
        return int(self.nm.split(":")[0])

    @property
    def group(self) -> int:
        return int(self.nm.split(":")[1])

    def train_config(self) -> TrainConfig:
        return TrainConfig(width=self.width, epochs=self.epochs, lr=self.lr, batch=self.batch,
                           n_codes=self.codes)

    def validate(self) -> None:
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValidationError(f"unknown methods {sorted(unknown)}")
        if not self.seeds:
            raise ValidationError("need at least one seed")
        if any(r < 1 for r in self.ranks) or self.recovery_r < 1:
            raise ValidationError("ranks must be >= 1")
        if self.nm not in ("2:4", "4:8", "1:4", "2:8"):
            raise ValidationError(f"unsupported pattern {self.nm}")
        if self.prune_method not in ("wanda", "magnitude"):
            raise ValidationError(f"unknown prune method {self.prune_method}")
        if not 0 < self.calib_fraction <= 1:
            raise ValidationError("calib_fraction must be in (0, 1]")


_INT_KEYS = {"train_seed", "grid", "obstacles", "codes", "max_steps", "width", "train_tasks", "eval_tasks",
             "calib_tasks", "epochs", "batch", "recovery_r"}
_FLOAT_KEYS = {"lr", "calib_fraction"}
_LIST_KEYS = {"seeds": int, "ranks": int, "methods": str}


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key=value`` lines; ``#`` starts a comment, lists are comma separated."""
    cfg = ExperimentConfig()
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ValidationError(f"config line {lineno}: expected key=value")
        try:
            if key in _INT_KEYS:
                updates[key] = int(value)
            elif key in _FLOAT_KEYS:
                updates[key] = float(value)
            elif key in _LIST_KEYS:
                updates[key] = tuple(_LIST_KEYS[key](v.strip()) for v in value.split(",") if v.strip())
            elif key in ("prune_method", "nm", "output_dir"):
                updates[key] = value
            else:
                raise ValidationError(f"config line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"config line {lineno}: bad value for {key}: {value!r}") from exc
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentRow:
    method: str
    success: float
    success_lo: float
    success_hi: float
    unsafe: float
    unsafe_lo: float
    unsafe_hi: float
    delta_success: float  # percentage points vs dense
    delta_unsafe: float
    path_length: float
    dist_to_goal: float
    param_bytes: int
    pruned_params: int = 0
    r: int = 0
    note: str = ""


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[ExperimentRow]
    per_seed: dict  # method -> list[EvalSummary]
    episodes: dict  # method -> {seed: list[EpisodeResult]}
    layer_errors: list = field(default_factory=list)  # dicts, see _layer_error_table
    residuals: list = field(default_factory=list)  # dicts, see _residual_table
    policy: Optional[Checkpoint] = None

    def row(self, method: str) -> ExperimentRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def success(self, method: str) -> list[float]:
        return [s.success_rate for s in self.per_seed[method]]


def model_param_bytes(model: Model) -> int:
    """Weight bytes of all linear layers (sparse values, metadata and factors)."""
    t = cost_report(model).total
    return t.param_bytes_sparse + t.param_bytes_correction


def _pruned_params(model: Model) -> int:
    return sum(layer.pruned.rows * layer.pruned.cols - layer.pruned.values.size
               for layer in model.layers.values() if hasattr(layer, "pruned"))


def svd_only_rank(d_in: int, d_out: int, budget_bytes: int, itemsize: int = 4) -> int:
    """Largest rank whose factors fit in ``budget_bytes`` (at least 1, at most full)."""
    return max(1, min(min(d_in, d_out), budget_bytes // ((d_in + d_out) * itemsize)))


def svd_only_layer(name: str, w: np.ndarray, bias, r: int) -> LowRankLinear:
    s = numerics.svd_truncated(w, r)
    dt = np.asarray(w).dtype  # factors stored at the weight precision
    return LowRankLinear(name, (s.U * s.S).astype(dt), s.V.astype(dt), bias)


def _bias(ckpt: Checkpoint, name: str):
    b = ckpt.tensors.get(f"{name}.bias")
    return None if b is None else np.asarray(b).reshape(-1)


def _label_r(r: int, clamp_to: int) -> str:
    return "full" if r >= clamp_to else str(r)


def run_experiment_matrix(cfg: ExperimentConfig, policy: Optional[Checkpoint] = None) -> ExperimentResult:
    """Train (unless given) one dense policy and evaluate every requested variant.

    Each variant is evaluated on a fresh held-out task set per seed; rows
    report the seed mean with min/max range. The random_r selection seed is
    the evaluation seed.
    """
    cfg.validate()
    methods = list(cfg.methods)
    prune_kind = cfg.prune_method
    if policy is None:
        train = generate_tasks(cfg.train_seed, cfg.train_tasks, cfg.grid, cfg.obstacles, cfg.codes, cfg.max_steps)
        policy = train_policy(train, cfg.train_seed, cfg.train_config())
    dense_model = Model.from_checkpoint(policy)
    prunable = layers_with_tag(policy, "vision", "language", "backbone")
    backbone = layers_with_tag(policy, "backbone")
    vision = layers_with_tag(policy, "vision")
    full_rank = max(min(policy.tensors[n].shape) for n in prunable)

    calib_tasks = generate_tasks(cfg.train_seed + 5000, cfg.calib_tasks, cfg.grid, cfg.obstacles, cfg.codes,
                                 cfg.max_steps)
    trajs = expert_trajectories(calib_tasks)
    cx, cc, _ = calibration_window(trajs, 1.0)
    stats = collect_calibration_stats(dense_model, cx, cc) if prune_kind == "wanda" else None

    def prune(names, st=stats):
        spec = PruneSpec(prune_kind, cfg.n_keep, cfg.group, frozenset(names))
        return prune_checkpoint(policy, spec, st)

    full_sparse_ckpt = prune(prunable)
    full_sparse = Model.from_checkpoint(full_sparse_ckpt)

    # variants: label -> (model or callable(seed) -> model, r, note)
    variants: dict[str, tuple] = {}
    variants["Full Dense"] = (dense_model, 0, "")  # always evaluated: the reference for deltas
    if "full_sparse" in methods:
        variants["Full Sparse"] = (full_sparse, 0, "")
    if "sparse_backbone" in methods:
        variants["Sparse Backbone"] = (Model.from_checkpoint(prune(backbone)), 0, "")
    if "sparse_vision" in methods:
        variants["Sparse Vision"] = (Model.from_checkpoint(prune(vision)), 0, "")
    if "windowed" in methods:
        wx, wc, skipped = calibration_window(trajs, cfg.calib_fraction)
        if len(wx) == 0:
            raise ValidationError("windowed calibration selected no states")
        wstats = collect_calibration_stats(dense_model, wx, wc) if prune_kind == "wanda" else None
        variants["Full Sparse (windowed calib)"] = (
            Model.from_checkpoint(prune(prunable, wstats)), 0,
            f"{len(wx)} of {len(cx)} states; {skipped} trajectories without key event")

    corrections = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankClampWarning)
        for r in cfg.ranks:
            corrections[r] = prime_model(policy, full_sparse_ckpt, r, "top_r")
        if cfg.recovery_r not in corrections:
            corrections[cfg.recovery_r] = prime_model(policy, full_sparse_ckpt, cfg.recovery_r, "top_r")

    def glue_model(r):
        return apply_corrections(full_sparse, corrections[r])

    ranks = sorted(set(cfg.ranks) | ({cfg.recovery_r} if any(
        m in methods for m in ("gluestick", "memory_matched", "gluestick_random", "svd_only", "svd_bytes"))
        else set()))
    layer_errors, residuals = [], []
    if "gluestick" in methods:
        for r in ranks:
            variants[f"GLUESTICK-{_label_r(r, full_rank)}"] = (glue_model(r), r, "")
    if "gluestick_random" in methods:
        for r in ranks:
            if r >= full_rank:
                continue

            def make(seed, r=r):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RankClampWarning)
                    cs = prime_model(policy, full_sparse_ckpt, r, "random_r", seed)
                return apply_corrections(full_sparse, cs)
            variants[f"GLUESTICK-{r} random_r"] = (make, r, "random singular triplets, seed = eval seed")
        for seed in cfg.seeds:
            residuals.extend(_residual_table(policy, full_sparse_ckpt, [r for r in ranks if r < full_rank], seed))
    for kind in ("svd_only", "svd_bytes"):
        if kind not in methods:
            continue
        for r in ranks:
            if r >= full_rank:
                continue
            glue = glue_model(r)
            glue_bytes = {lc.layer: lc.param_bytes for lc in cost_report(glue).layers}
            layers, ranks_used = {}, []
            for name in prunable:
                w = np.asarray(policy.tensors[name])
                if kind == "svd_only":
                    rs = min(r, min(w.shape))
                else:
                    rs = svd_only_rank(w.shape[1], w.shape[0], glue_bytes[name], w.itemsize)
                ranks_used.append(rs)
                layers[name] = svd_only_layer(name, w, _bias(policy, name), rs)
            svd_model = dense_model.with_layers(layers)
            label = f"SVD-only-{r}" if kind == "svd_only" else f"SVD-only @GLUESTICK-{r} bytes"
            variants[label] = (svd_model, r, "no pruning; ranks " + "/".join(map(str, ranks_used)))
            layer_errors.extend(_layer_error_table(policy, glue, svd_model, prunable, r, kind))
    if "memory_matched" in methods:
        dense_b, sparse_b = layer_bytes(policy, prunable, cfg.n_keep, cfg.group)
        fixed = _fixed_bytes(policy, prunable)
        for r in ranks:
            if r >= full_rank:
                continue
            target = model_param_bytes(glue_model(r))
            chosen, _ = match_memory_budget(dense_b, sparse_b, target - fixed)
            mm = Model.from_checkpoint(prune(chosen)) if chosen else dense_model
            got = model_param_bytes(mm)
            variants[f"Memory-Matched @GLUESTICK-{r}"] = (
                mm, r, f"pruned [{' '.join(chosen)}]; bytes {got} vs target {target} "
                       f"({100 * (got - target) / target:+.1f}%)")

    per_seed: dict[str, list[EvalSummary]] = {}
    episodes: dict[str, dict] = {}
    for seed in cfg.seeds:
        tasks = generate_tasks(10_000 + seed, cfg.eval_tasks, cfg.grid, cfg.obstacles, cfg.codes, cfg.max_steps)
        for label, (m, _, _) in variants.items():
            model = m(seed) if callable(m) and not isinstance(m, Model) else m
            res = rollout(model, tasks, keep_trajectories=False)
            per_seed.setdefault(label, []).append(summarize(res))
            episodes.setdefault(label, {})[seed] = res
    sizes = {}
    for label, (m, _, _) in variants.items():
        model = m(cfg.seeds[0]) if callable(m) and not isinstance(m, Model) else m
        sizes[label] = (model_param_bytes(model), _pruned_params(model))

    dense_runs = per_seed["Full Dense"]
    d_succ = float(np.mean([s.success_rate for s in dense_runs]))
    d_uns = float(np.mean([s.unsafe_rate for s in dense_runs]))
    rows = []
    for label, (m, r, note) in variants.items():
        if label == "Full Dense" and "dense" not in methods:
            continue
        runs = per_seed[label]
        succ = [s.success_rate for s in runs]
        uns = [s.unsafe_rate for s in runs]
        rows.append(ExperimentRow(
            label, float(np.mean(succ)), min(succ), max(succ), float(np.mean(uns)), min(uns), max(uns),
            100 * (float(np.mean(succ)) - d_succ), 100 * (float(np.mean(uns)) - d_uns),
            float(np.mean([s.mean_path_length for s in runs])),
            float(np.mean([s.mean_dist_to_goal for s in runs])),
            sizes[label][0], sizes[label][1], r, note))
    return ExperimentResult(cfg, rows, per_seed, episodes, layer_errors, residuals, policy)


def _fixed_bytes(policy: Checkpoint, prunable: Sequence[str]) -> int:
    """Linear-layer weight bytes outside the prunable set (e.g. the head)."""
    return sum(storage_bytes(policy.tensors[rec.name]) for rec in policy.linear_layers()
               if rec.name not in prunable)


def _layer_error_table(policy, glue: Model, svd_model: Model, names, r, kind="svd_only") -> list[dict]:
    out = []
    for n in names:
        w = np.asarray(policy.tensors[n], dtype=np.float64)
        out.append({
            "layer": n, "r": r, "kind": kind, "svd_rank": svd_model.layers[n].r,
            "glue_error": numerics.frobenius_norm(w - glue.layers[n].effective_weight()),
            "svd_error": numerics.frobenius_norm(w - svd_model.layers[n].effective_weight()),
        })
    return out


def _residual_table(policy, pruned_ckpt, ranks, seed) -> list[dict]:
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankClampWarning)
        for r in ranks:
            top = prime_model(policy, pruned_ckpt, r, "top_r")
            rnd = prime_model(policy, pruned_ckpt, r, "random_r", seed)
            for name, c in top.corrections.items():
                w = np.asarray(policy.tensors[name], dtype=np.float64)
                gap = w - pruned_ckpt.tensors[name].to_dense().astype(np.float64)
                out.append({"layer": name, "r": r, "seed": seed,
                            "top_residual": numerics.frobenius_norm(gap - c.delta()),
                            "random_residual": numerics.frobenius_norm(gap - rnd[name].delta())})
    return out


ROW_FIELDS = [f.name for f in ExperimentRow.__dataclass_fields__.values()]


def write_results(result: ExperimentResult, out_dir) -> dict:
    """Write results.csv, episodes.jsonl and config.txt; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"results": out / "results.csv", "episodes": out / "episodes.jsonl", "config": out / "config.txt"}
    with open(paths["results"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in result.rows:
            d = asdict(row)
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in d.items()})
    with open(paths["episodes"], "w") as fh:
        for label, by_seed in result.episodes.items():
            for seed, res in by_seed.items():
                for e in res:
                    fh.write(json.dumps({"method": label, "seed": seed, **e.summary()}) + "\n")
    paths["config"].write_text(format_config(result.config))
    return paths


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


ESCALATION_WIDTHS = (64, 96, 128)


def collapse_drop(result: ExperimentResult) -> float:
    return result.row("Full Dense").success - result.row("Full Sparse").success


def run_with_escalation(cfg: ExperimentConfig, min_drop: float = 0.20,
                        widths: Sequence[int] = ESCALATION_WIDTHS) -> ExperimentResult:
    """Run the matrix, widening the policy until full 2:4 pruning costs ``min_drop`` success.

    Widths below the configured one are skipped. ``recovery_r`` scales with
    the width (half the smallest pruned-layer dimension). The last attempt is
    returned even if the drop is still short.
    """
    tried = [w for w in widths if w >= cfg.width] or [cfg.width]
    result = None
    for w in tried:
        recovery = min(D_OBS, w) // 2
        ranks = tuple(sorted({max(1, r * w // cfg.width) for r in cfg.ranks} | {recovery}))
        c = replace(cfg, width=w, recovery_r=recovery, ranks=ranks)
        result = run_experiment_matrix(c)
        if collapse_drop(result) >= min_drop:
            break
        log.info("width %d: collapse %.3f below %.2f; escalating", w, collapse_drop(result), min_drop)
    return result
