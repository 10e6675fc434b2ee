"""Domain types shared across the package.

States are float64 numpy arrays (vectors or H x W x C images). Discrete
actions are plain ints, continuous actions are float64 vectors. Every array
held by these types is made read-only on construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

OBS_KINDS = ("vector", "image")
ACT_KINDS = ("discrete", "continuous")

Action = Union[int, np.ndarray]


class ValidationError(ValueError):
    """An invariant of a domain type is violated. ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def frozen_array(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    """Exact equality including signed zeros and NaN payloads."""
    return a.shape == b.shape and a.tobytes() == b.tobytes()


def actions_equal(a: Action, b: Action) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        if not (isinstance(a, np.ndarray) and isinstance(b, np.ndarray)):
            return False
        return same_bits(a, b)
    return int(a) == int(b)


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    obs_kind: str
    obs_dims: tuple
    act_kind: str
    act_dims: int
    horizon: int
    random_return: float
    expert_return: float

    def __post_init__(self):
        object.__setattr__(self, "obs_dims", tuple(int(d) for d in self.obs_dims))
        if not self.env_id:
            raise ValidationError("env_id", "must be non-empty")
        if self.obs_kind not in OBS_KINDS:
            raise ValidationError("obs_kind", f"expected one of {OBS_KINDS}, got {self.obs_kind!r}")
        if not self.obs_dims or any(d < 1 for d in self.obs_dims):
            raise ValidationError("obs_dims", f"must be positive integers, got {self.obs_dims}")
        if self.obs_kind == "vector" and len(self.obs_dims) != 1:
            raise ValidationError("obs_dims", "vector observations take a single length")
        if self.obs_kind == "image" and len(self.obs_dims) != 3:
            raise ValidationError("obs_dims", "image observations take (height, width, channels)")
        if self.act_kind not in ACT_KINDS:
            raise ValidationError("act_kind", f"expected one of {ACT_KINDS}, got {self.act_kind!r}")
        if self.act_dims < 1 or (self.act_kind == "discrete" and self.act_dims < 2):
            raise ValidationError("act_dims", f"invalid for {self.act_kind} actions: {self.act_dims}")
        if self.horizon < 1:
            raise ValidationError("horizon", "must be >= 1")
        if not (math.isfinite(self.random_return) and math.isfinite(self.expert_return)):
            raise ValidationError("expert_return", "reference returns must be finite")
        if not self.expert_return > self.random_return:
            raise ValidationError(
                "expert_return",
                f"must exceed random_return ({self.expert_return} <= {self.random_return})",
            )

    @property
    def obs_size(self) -> int:
        return int(np.prod(self.obs_dims))

    @property
    def is_discrete(self) -> bool:
        return self.act_kind == "discrete"

    def check_state(self, state: np.ndarray, where: str = "state") -> None:
        if state.shape != self.obs_dims:
            raise ValidationError(where, f"shape {state.shape} does not match {self.obs_dims}")

    def check_action(self, action: Action, where: str = "action") -> None:
        if self.is_discrete:
            if isinstance(action, np.ndarray) or not 0 <= int(action) < self.act_dims:
                raise ValidationError(where, f"discrete action {action!r} outside [0, {self.act_dims})")
        else:
            if not isinstance(action, np.ndarray) or action.shape != (self.act_dims,):
                raise ValidationError(where, f"continuous action must have shape ({self.act_dims},)")


@dataclass(frozen=True, eq=False)
class Step:
    """One (state, previous reward, action) tuple."""

    state: np.ndarray
    prev_reward: float
    action: Action

    def __post_init__(self):
        object.__setattr__(self, "state", frozen_array(self.state))
        object.__setattr__(self, "prev_reward", float(self.prev_reward))
        a = self.action
        if isinstance(a, (np.ndarray, list, tuple)):
            object.__setattr__(self, "action", frozen_array(a))
        else:
            object.__setattr__(self, "action", int(a))

    def __eq__(self, other):
        if not isinstance(other, Step):
            return NotImplemented
        return (
            same_bits(self.state, other.state)
            and np.float64(self.prev_reward).tobytes() == np.float64(other.prev_reward).tobytes()
            and actions_equal(self.action, other.action)
        )

    __hash__ = None


@dataclass(frozen=True)
class Demonstration:
    demo_id: int
    steps: tuple
    total_return: float

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "total_return", float(self.total_return))
        if self.demo_id < 0:
            raise ValidationError("demo_id", "must be non-negative")

    def __len__(self):
        return len(self.steps)


@dataclass(frozen=True)
class DemoSet:
    spec: EnvSpec
    demos: tuple
    retrieval_ids: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "demos", tuple(self.demos))
        object.__setattr__(self, "retrieval_ids", tuple(sorted(int(i) for i in self.retrieval_ids)))
        self.validate()

    def validate(self) -> None:
        spec = self.spec
        seen = set()
        for demo in self.demos:
            if demo.demo_id in seen:
                raise ValidationError("demo_id", f"duplicate id {demo.demo_id}")
            seen.add(demo.demo_id)
            if not 1 <= len(demo.steps) <= spec.horizon:
                raise ValidationError(
                    "steps", f"demo {demo.demo_id} has {len(demo.steps)} steps, horizon is {spec.horizon}"
                )
            if demo.steps[0].prev_reward != 0.0:
                raise ValidationError("prev_reward", f"demo {demo.demo_id} does not start with reward 0")
            for i, step in enumerate(demo.steps):
                spec.check_state(step.state, f"state[{demo.demo_id}:{i}]")
                spec.check_action(step.action, f"action[{demo.demo_id}:{i}]")
        if len(set(self.retrieval_ids)) != len(self.retrieval_ids):
            raise ValidationError("retrieval_ids", "duplicates")
        missing = set(self.retrieval_ids) - seen
        if missing:
            raise ValidationError("retrieval_ids", f"unknown demo ids {sorted(missing)}")

    def demo(self, demo_id: int) -> Demonstration:
        for d in self.demos:
            if d.demo_id == demo_id:
                return d
        raise KeyError(demo_id)

    def retrieval_demos(self) -> list:
        ids = set(self.retrieval_ids)
        return [d for d in self.demos if d.demo_id in ids]

    @property
    def n_steps(self) -> int:
        return sum(len(d.steps) for d in self.demos)

    def with_retrieval(self, ids: Sequence[int]) -> "DemoSet":
        return DemoSet(self.spec, self.demos, tuple(ids))

    def subset(self, demo_ids: Sequence[int]) -> "DemoSet":
        """Demos restricted to ``demo_ids``; retrieval designation is intersected."""
        keep = set(demo_ids)
        return DemoSet(
            self.spec,
            tuple(d for d in self.demos if d.demo_id in keep),
            tuple(i for i in self.retrieval_ids if i in keep),
        )


@dataclass(frozen=True, eq=False)
class ContextDatapoint:
    """Retrieved neighbors (closest first) plus the query they were retrieved for.

    ``position_dists`` holds the normalized distance used for each of the
    ``len(neighbors) + 1`` action predictions; its last entry equals
    ``dist_first``. ``neighbor_refs`` and ``query_ref`` record provenance as
    ``(demo_id, step_idx)`` pairs (``query_ref`` is None at deployment).
    """

    env_id: str
    neighbors: tuple
    query_state: np.ndarray
    query_prev_reward: float
    query_action: Optional[Action]
    dist_first: float
    position_dists: tuple = ()
    neighbor_refs: tuple = ()
    query_ref: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "neighbors", tuple(self.neighbors))
        object.__setattr__(self, "query_state", frozen_array(self.query_state))
        object.__setattr__(self, "query_prev_reward", float(self.query_prev_reward))
        object.__setattr__(self, "dist_first", float(self.dist_first))
        qa = self.query_action
        if qa is not None:
            qa = frozen_array(qa) if isinstance(qa, (np.ndarray, list, tuple)) else int(qa)
            object.__setattr__(self, "query_action", qa)
        if not self.position_dists:
            object.__setattr__(self, "position_dists", (0.0,) * len(self.neighbors) + (self.dist_first,))
        object.__setattr__(self, "position_dists", tuple(float(d) for d in self.position_dists))
        object.__setattr__(self, "neighbor_refs", tuple(tuple(int(v) for v in r) for r in self.neighbor_refs))
        if self.query_ref is not None:
            object.__setattr__(self, "query_ref", tuple(int(v) for v in self.query_ref))
        if not self.neighbors:
            raise ValidationError("neighbors", "context needs at least one neighbor")
        if not 0.0 <= self.dist_first <= 1.0:
            raise ValidationError("dist_first", f"{self.dist_first} outside [0, 1]")
        if len(self.position_dists) != len(self.neighbors) + 1:
            raise ValidationError("position_dists", "needs one entry per prediction")
        if self.position_dists[-1] != self.dist_first:
            raise ValidationError("position_dists", "last entry must equal dist_first")
        if any(not 0.0 <= d <= 1.0 for d in self.position_dists):
            raise ValidationError("position_dists", "entries must lie in [0, 1]")
        if self.neighbor_refs and len(self.neighbor_refs) != len(self.neighbors):
            raise ValidationError("neighbor_refs", "one ref per neighbor")

    @property
    def first_action(self) -> Action:
        return self.neighbors[0].action

    def __len__(self):
        return len(self.neighbors)

    def __eq__(self, other):
        if not isinstance(other, ContextDatapoint):
            return NotImplemented
        qa_eq = (self.query_action is None and other.query_action is None) or (
            self.query_action is not None
            and other.query_action is not None
            and actions_equal(self.query_action, other.query_action)
        )
        return (
            self.env_id == other.env_id
            and self.neighbors == other.neighbors
            and same_bits(self.query_state, other.query_state)
            and _f64(self.query_prev_reward) == _f64(other.query_prev_reward)
            and qa_eq
            and _f64(self.dist_first) == _f64(other.dist_first)
            and [_f64(d) for d in self.position_dists] == [_f64(d) for d in other.position_dists]
            and self.neighbor_refs == other.neighbor_refs
            and self.query_ref == other.query_ref
        )

    __hash__ = None


def _f64(x: float) -> bytes:
    return np.float64(x).tobytes()


@dataclass(frozen=True)
class CtxSet:
    """A preprocessed dataset: datapoints plus what produced them."""

    spec: EnvSpec
    normalizer: "object"  # distance.Normalizer; typed loosely to avoid an import cycle
    n: int
    datapoints: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "datapoints", tuple(self.datapoints))
        if self.n < 1:
            raise ValidationError("n", "must be >= 1")

    def __len__(self):
        return len(self.datapoints)

    def __iter__(self) -> Iterator[ContextDatapoint]:
        return iter(self.datapoints)

    def __getitem__(self, i):
        return self.datapoints[i]
