"""Toy environment families, scripted experts, demo generation and rollouts.

Two families:

* ``gridworld``: an N x N grid with walls and a goal. Observations are
  images with channels (agent, walls, goal). Walls and goal are one-hot;
  the agent is 1 on its cell and 0.5 on the adjacent cells. 5 discrete actions
  (up, down, left, right, stay); reward 1 on reaching the goal. The
  ``heldout`` variant has denser walls and a permuted action order.
* ``pointmass``: a point in [-1, 1]^2 steered by a 2-d action in [-1, 1];
  observation is (x, y, goal_dx, goal_dy); reward is the decrease in
  distance to the goal. A level has a "mud" disc that halves speed.

A level (layout, goal) is fixed by ``level_seed``; the start state is drawn
per episode.
"""

from __future__ import annotations

import functools
import hashlib
from collections import deque
from typing import Callable, Optional, Sequence

import numpy as np

from .core import DemoSet, Demonstration, EnvSpec, Step

FAMILIES = ("gridworld", "pointmass")
VARIANTS = ("base", "heldout")

# (d_row, d_col) per move; action index -> move index goes through the variant's order
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))
ACTION_ORDER = {"base": (0, 1, 2, 3, 4), "heldout": (3, 2, 4, 0, 1)}
WALL_DENSITY = {"base": 0.2, "heldout": 0.3}

GRID_SIZE = 8
# agent channel value on the four cells adjacent to the agent, so that nearby
# positions share pixels and image distances grow with grid distance
SPRITE_ARM = 0.5
GRID_HORIZON = 24
START_RADIUS = 2
PM_HORIZON = 40
PM_STEP = 0.1
PM_GOAL_RADIUS = 0.05

RANDOM_CALIB_EPISODES = 1000
EXPERT_CALIB_EPISODES = 200
CALIB_SEED = 12345
_DEMO_STREAM = 7919


class ContractViolation(RuntimeError):
    pass


class UnreachableGoal(RuntimeError):
    pass


Policy = Callable[[np.ndarray, float], object]


def _level_rng(family: str, variant: str, level_seed: int, attempt: int = 0) -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha256(f"{family}/{variant}".encode()).digest()[:4], "little")
    return np.random.default_rng([tag, level_seed, attempt])


class EnvInstance:
    """One level of a family. Mutable episode state; not shared between threads."""

    def __init__(self, family, level_seed, sticky_p=0.0, variant="base", size=GRID_SIZE, horizon=None,
                 start_radius=START_RADIUS):
        if family not in FAMILIES:
            raise ValueError(f"unknown family {family!r}")
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if not 0.0 <= sticky_p < 1.0:
            raise ValueError(f"sticky_p must lie in [0, 1), got {sticky_p}")
        self.family = family
        self.variant = variant
        self.level_seed = int(level_seed)
        self.sticky_p = float(sticky_p)
        self.size = int(size)
        self.start_radius = start_radius
        if family == "gridworld":
            self.horizon = int(horizon or GRID_HORIZON)
            self._build_grid()
        else:
            self.horizon = int(horizon or PM_HORIZON)
            self._build_pointmass()
        self.t = 0
        self.done = True
        self.prev_action = None

    # ---------------------------------------------------------------- layout

    def _build_grid(self):
        n = self.size
        density = WALL_DENSITY[self.variant]
        for attempt in range(1000):
            rng = _level_rng(self.family, self.variant, self.level_seed, attempt)
            walls = rng.random((n, n)) < density
            free = np.argwhere(~walls)
            goal = tuple(int(v) for v in free[rng.integers(len(free))])
            dist = _bfs(walls, goal)
            reachable = dist[~walls]
            if np.all(reachable >= 0) and reachable.max() < self.horizon // 2 and len(free) > 4:
                break
        else:
            raise UnreachableGoal(f"no valid layout for level {self.level_seed}")
        self.walls = walls
        self.goal = goal
        self.goal_dist = dist
        self.cells = [tuple(int(v) for v in c) for c in free if tuple(c) != goal]
        if self.start_radius is None:
            self.starts = list(self.cells)
        else:
            far = [c for c in self.cells if dist[c] >= dist.max() // 2]
            anchor = far[rng.integers(len(far))]
            self.starts = [
                c for c in self.cells if abs(c[0] - anchor[0]) + abs(c[1] - anchor[1]) <= self.start_radius
            ]
        self.action_order = ACTION_ORDER[self.variant]

    def _build_pointmass(self):
        rng = _level_rng(self.family, self.variant, self.level_seed)
        self.goal_pos = rng.uniform(-0.7, 0.7, size=2)
        self.mud_center = rng.uniform(-0.7, 0.7, size=2)
        self.mud_radius = float(rng.uniform(0.15, 0.35))

    def layout_bytes(self) -> bytes:
        if self.family == "gridworld":
            return self.walls.tobytes() + bytes(self.goal)
        return self.goal_pos.tobytes() + self.mud_center.tobytes() + np.float64(self.mud_radius).tobytes()

    # ------------------------------------------------------------------ spec

    @property
    def obs_dims(self) -> tuple:
        return (self.size, self.size, 3) if self.family == "gridworld" else (4,)

    @property
    def env_id(self) -> str:
        name = self.family if self.variant == "base" else f"{self.family}_{self.variant}"
        return f"{name}-{self.level_seed}"

    @property
    def spec(self) -> EnvSpec:
        rnd, exp = _reference_returns(
            self.family, self.variant, self.level_seed, self.size, self.horizon, self.start_radius
        )
        return self._spec(rnd, exp)

    def _spec(self, random_return, expert_return) -> EnvSpec:
        grid = self.family == "gridworld"
        return EnvSpec(
            env_id=self.env_id,
            obs_kind="image" if grid else "vector",
            obs_dims=self.obs_dims,
            act_kind="discrete" if grid else "continuous",
            act_dims=5 if grid else 2,
            horizon=self.horizon,
            random_return=random_return,
            expert_return=expert_return,
        )

    # --------------------------------------------------------------- episode

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        if self.family == "gridworld":
            self.pos = self.starts[rng.integers(len(self.starts))]
        else:
            while True:
                p = rng.uniform(-1.0, 1.0, size=2)
                if np.linalg.norm(p - self.goal_pos) >= 0.5:
                    break
            self.pos = p
        self.t = 0
        self.done = False
        self.prev_action = None
        return self.observe()

    def set_position(self, pos) -> np.ndarray:
        """Place the agent (used for state enumeration); starts a fresh episode."""
        self.pos = tuple(pos) if self.family == "gridworld" else np.asarray(pos, dtype=np.float64)
        self.t = 0
        self.done = False
        self.prev_action = None
        return self.observe()

    def observe(self) -> np.ndarray:
        if self.family == "gridworld":
            obs = np.zeros((self.size, self.size, 3))
            r, c = self.pos
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                if 0 <= r + dr < self.size and 0 <= c + dc < self.size:
                    obs[r + dr, c + dc, 0] = SPRITE_ARM
            obs[r, c, 0] = 1.0
            obs[..., 1] = self.walls
            obs[self.goal[0], self.goal[1], 2] = 1.0
            return obs
        return np.concatenate([self.pos, self.goal_pos - self.pos])

    def step(self, action, rng: Optional[np.random.Generator] = None):
        """Advance one step. Returns (next_state, reward, done)."""
        if self.done:
            raise ContractViolation("step() called on a finished episode")
        action = self._check_action(action)
        executed = action
        if self.t > 0 and self.sticky_p > 0.0:
            if rng is None:
                raise ValueError("sticky environments need an rng")
            if rng.random() < self.sticky_p:
                executed = self.prev_action
        self.prev_action = executed
        self.last_executed = executed
        if self.family == "gridworld":
            reward, reached = self._grid_move(executed)
        else:
            reward, reached = self._pm_move(executed)
        self.t += 1
        self.done = reached or self.t >= self.horizon
        return self.observe(), reward, self.done

    def _check_action(self, action):
        if self.family == "gridworld":
            if isinstance(action, np.ndarray) and action.ndim > 0:
                raise ContractViolation(f"gridworld expects an integer action, got {action!r}")
            a = int(action)
            if not 0 <= a < 5:
                raise ContractViolation(f"action {a} out of range")
            return a
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise ContractViolation(f"pointmass expects a finite 2-vector, got {action!r}")
        return a

    def _grid_move(self, action):
        dr, dc = MOVES[self.action_order[action]]
        r, c = self.pos[0] + dr, self.pos[1] + dc
        if 0 <= r < self.size and 0 <= c < self.size and not self.walls[r, c]:
            self.pos = (r, c)
        reached = self.pos == self.goal
        return (1.0 if reached else 0.0), reached

    def _pm_move(self, action):
        a = np.clip(action, -1.0, 1.0)
        speed = 0.5 if np.linalg.norm(self.pos - self.mud_center) < self.mud_radius else 1.0
        before = float(np.linalg.norm(self.goal_pos - self.pos))
        self.pos = np.clip(self.pos + PM_STEP * speed * a, -1.0, 1.0)
        after = float(np.linalg.norm(self.goal_pos - self.pos))
        return before - after, after < PM_GOAL_RADIUS

    # ---------------------------------------------------------------- states

    def all_states(self) -> list:
        """Every non-terminal state (gridworld only)."""
        if self.family != "gridworld":
            raise ValueError("state enumeration is only defined for gridworld")
        saved = getattr(self, "pos", None)
        out = [self.set_position(p) for p in self.cells]
        if saved is not None:
            self.pos = saved
        return out

    def sample_states(self, count: int, rng: np.random.Generator) -> list:
        """Uniform positions over the arena (pointmass estimate of the state space)."""
        if self.family != "pointmass":
            raise ValueError("use all_states() for gridworld")
        pos = rng.uniform(-1.0, 1.0, size=(count, 2))
        return [np.concatenate([p, self.goal_pos - p]) for p in pos]


def _bfs(walls: np.ndarray, goal) -> np.ndarray:
    n = walls.shape[0]
    dist = np.full(walls.shape, -1, dtype=np.int64)
    dist[goal] = 0
    q = deque([goal])
    while q:
        r, c = q.popleft()
        for dr, dc in MOVES[:4]:
            rr, cc = r + dr, c + dc
            if 0 <= rr < n and 0 <= cc < n and not walls[rr, cc] and dist[rr, cc] < 0:
                dist[rr, cc] = dist[r, c] + 1
                q.append((rr, cc))
    return dist


def make_env(family: str, level_seed: int, sticky_p: float = 0.0, **overrides) -> EnvInstance:
    """Build a level. ``overrides`` may set ``variant``, ``size`` and ``horizon``."""
    unknown = set(overrides) - {"variant", "size", "horizon", "start_radius"}
    if unknown:
        raise ValueError(f"unknown overrides {sorted(unknown)}")
    return EnvInstance(family, level_seed, sticky_p, **overrides)


def _grid_pos(env: EnvInstance, state: np.ndarray):
    r, c = np.argwhere(state[..., 0] > 0.75)[0]
    return int(r), int(c)


def expert_policy(env: EnvInstance, state: np.ndarray):
    """BFS shortest-path move (gridworld) or clipped proportional control (pointmass)."""
    if env.family == "gridworld":
        r, c = _grid_pos(env, state)
        if env.goal_dist[r, c] < 0:
            raise UnreachableGoal(f"goal unreachable from {(r, c)}")
        best, best_d = None, None
        for a in range(5):
            dr, dc = MOVES[env.action_order[a]]
            rr, cc = r + dr, c + dc
            if not (0 <= rr < env.size and 0 <= cc < env.size) or env.walls[rr, cc]:
                rr, cc = r, c
            d = env.goal_dist[rr, cc]
            if best_d is None or d < best_d:
                best, best_d = a, d
        return best
    offset = np.asarray(state[2:4], dtype=np.float64)
    return np.clip(offset / PM_STEP, -1.0, 1.0)


def random_policy(env: EnvInstance, rng: np.random.Generator) -> Policy:
    if env.family == "gridworld":
        return lambda s, r: int(rng.integers(5))
    return lambda s, r: rng.uniform(-1.0, 1.0, size=2)


def run_episode(env: EnvInstance, policy: Policy, rng: np.random.Generator, record: bool = False):
    """One episode; returns (total_return, steps) with steps recorded on request."""
    state = env.reset(rng)
    prev_r = 0.0
    total = 0.0
    steps = []
    done = False
    while not done:
        action = policy(state, prev_r)
        if record:
            steps.append(Step(state, prev_r, action))
        state, reward, done = env.step(action, rng)
        total += reward
        prev_r = reward
    return total, steps


def episode_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(episode)])


def rollout(env: EnvInstance, policy: Policy, n_episodes: int, seed: int):
    """Mean undiscounted return and per-episode returns over seeded episodes."""
    returns = []
    for i in range(n_episodes):
        total, _ = run_episode(env, policy, episode_rng(seed, i))
        returns.append(total)
    returns = np.asarray(returns)
    return float(returns.mean()), returns


@functools.lru_cache(maxsize=None)
def _reference_returns(family, variant, level_seed, size, horizon, start_radius):
    env = EnvInstance(family, level_seed, 0.0, variant=variant, size=size, horizon=horizon, start_radius=start_radius)
    rng = np.random.default_rng(CALIB_SEED)
    rnd = np.mean([run_episode(env, random_policy(env, rng), rng)[0] for _ in range(RANDOM_CALIB_EPISODES)])
    expert = lambda s, r: expert_policy(env, s)
    exp, _ = rollout(env, expert, EXPERT_CALIB_EPISODES, CALIB_SEED)
    return float(rnd), float(exp)


def demo_rng(level_seed: int, j: int) -> np.random.Generator:
    return np.random.default_rng([_DEMO_STREAM, int(level_seed), int(j)])


def generate_demos(
    family: str,
    level_seeds: Sequence[int],
    per_level: int,
    sticky_p: float = 0.0,
    **overrides,
) -> DemoSet:
    """Expert demonstrations; all demos are designated for retrieval.

    A single level yields that level's spec; several levels are pooled under
    the family name with averaged reference returns.
    """
    if per_level < 1:
        raise ValueError("per_level must be >= 1")
    level_seeds = list(level_seeds)
    if not level_seeds:
        raise ValueError("need at least one level seed")
    demos = []
    specs = []
    for seed in level_seeds:
        env = make_env(family, seed, sticky_p, **overrides)
        specs.append(env.spec)
        expert = lambda s, r, env=env: expert_policy(env, s)
        for j in range(per_level):
            total, steps = run_episode(env, expert, demo_rng(seed, j), record=True)
            demos.append(Demonstration(len(demos), steps, total))
    if len(specs) == 1:
        spec = specs[0]
    else:
        first = specs[0]
        spec = EnvSpec(
            env_id=first.env_id.rsplit("-", 1)[0],
            obs_kind=first.obs_kind,
            obs_dims=first.obs_dims,
            act_kind=first.act_kind,
            act_dims=first.act_dims,
            horizon=first.horizon,
            random_return=float(np.mean([s.random_return for s in specs])),
            expert_return=float(np.mean([s.expert_return for s in specs])),
        )
    return DemoSet(spec, demos, tuple(range(len(demos))))


def replay(env: EnvInstance, demo: Demonstration, start_rng: np.random.Generator):
    """Re-execute a demo's actions from its recorded start; returns (states, rewards)."""
    env.reset(start_rng)
    states, rewards = [env.observe()], []
    for step in demo.steps:
        s, r, _ = env.step(step.action)
        states.append(s)
        rewards.append(r)
    return states, rewards


def normalized_return(raw, spec: EnvSpec):
    span = spec.expert_return - spec.random_return
    if not span != 0:
        raise ValueError(f"{spec.env_id}: expert and random returns coincide")
    return (np.asarray(raw, dtype=np.float64) - spec.random_return) / span
