"""Exact nearest-neighbour retrieval over demonstration states and context assembly."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ContextDatapoint, CtxSet, DemoSet, Step
from .distance import Normalizer, calibrate, check_metric, distances_to

log = logging.getLogger(__name__)

DEFAULT_N = 19


class RetrievalError(RuntimeError):
    pass


class PreprocessError(RuntimeError):
    pass


def designate_retrieval_set(demoset: DemoSet, count: int, seed: int) -> DemoSet:
    """Mark a seeded, uniformly random subset of ``count`` demos for retrieval."""
    ids = [d.demo_id for d in demoset.demos]
    if count < 1 or count > len(ids):
        raise ValueError(f"cannot designate {count} of {len(ids)} demonstrations")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(ids), size=count, replace=False)
    return demoset.with_retrieval(sorted(ids[i] for i in chosen))


@dataclass(frozen=True, eq=False)
class StateIndex:
    """Flat exact index. Entries are kept in (demo_id, step_idx) order."""

    states: np.ndarray
    demo_ids: np.ndarray
    step_idx: np.ndarray
    steps: tuple
    metric: str
    normalizer: Normalizer

    def __len__(self):
        return len(self.steps)

    def step(self, demo_id: int, step_idx: int) -> Step:
        pos = np.flatnonzero((self.demo_ids == demo_id) & (self.step_idx == step_idx))
        return self.steps[int(pos[0])]


def build_index(demoset: DemoSet, metric: str, normalizer: Normalizer) -> StateIndex:
    check_metric(metric)
    demos = sorted(demoset.retrieval_demos(), key=lambda d: d.demo_id)
    if not demos:
        raise RetrievalError(f"{demoset.spec.env_id}: retrieval set is empty")
    steps = tuple(s for d in demos for s in d.steps)
    states = np.stack([s.state for s in steps])
    states.setflags(write=False)
    demo_ids = np.array([d.demo_id for d in demos for _ in d.steps], dtype=np.int64)
    step_idx = np.array([i for d in demos for i in range(len(d.steps))], dtype=np.int64)
    return StateIndex(states, demo_ids, step_idx, steps, metric, normalizer)


def knn(index: StateIndex, query, k: int, exclude_demo: Optional[int] = None):
    """The ``k`` closest entries as (demo_id, step_idx, raw_dist), closest first.

    Ties are broken by (demo_id, step_idx). Returns fewer than ``k`` results
    when fewer entries survive the exclusion.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    dist = distances_to(query, index.states, index.metric)
    eligible = np.ones(len(dist), dtype=bool) if exclude_demo is None else index.demo_ids != exclude_demo
    cand = np.flatnonzero(eligible)
    if cand.size == 0:
        raise RetrievalError(f"no eligible entries (excluded demo {exclude_demo})")
    # entries are stored in (demo_id, step_idx) order, so a stable sort on distance breaks ties correctly
    order = cand[np.argsort(dist[cand], kind="stable")[:k]]
    return [(int(index.demo_ids[i]), int(index.step_idx[i]), float(dist[i])) for i in order]


def build_context(
    index: StateIndex,
    query_state,
    query_prev_reward: float,
    n: int = DEFAULT_N,
    exclude_demo: Optional[int] = None,
    query_action=None,
    query_ref=None,
) -> ContextDatapoint:
    """Assemble the closest-first context for one query.

    Each in-context prediction gets the normalized distance from its state
    to the first neighbour, whose action is the retrieved action for every
    position; the query's entry is ``dist_first``.
    """
    hits = knn(index, query_state, n, exclude_demo)
    rows = [int(np.flatnonzero((index.demo_ids == d) & (index.step_idx == t))[0]) for d, t, _ in hits]
    neighbors = [index.steps[r] for r in rows]
    norm = index.normalizer
    dist_first = norm(hits[0][2])
    states = index.states[rows]
    ctx_raw = distances_to(states[0], states, index.metric)
    ctx_dists = [float(v) for v in np.atleast_1d(norm(ctx_raw))]
    return ContextDatapoint(
        env_id=norm.env_id,
        neighbors=neighbors,
        query_state=query_state,
        query_prev_reward=query_prev_reward,
        query_action=query_action,
        dist_first=dist_first,
        position_dists=tuple(ctx_dists) + (dist_first,),
        neighbor_refs=[(d, t) for d, t, _ in hits],
        query_ref=query_ref,
    )


def preprocess(
    demoset: DemoSet,
    metric: str,
    n: int = DEFAULT_N,
    normalizer: Optional[Normalizer] = None,
) -> CtxSet:
    """Turn every step of every demo into a training datapoint.

    Queries from a retrieval demo never see neighbours from that same demo.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if normalizer is None:
        normalizer = calibrate(demoset, metric)
    index = build_index(demoset, metric, normalizer)
    out = []
    for demo in demoset.demos:
        if not np.any(index.demo_ids != demo.demo_id):
            raise PreprocessError(
                f"{demoset.spec.env_id}: demo {demo.demo_id} has no eligible neighbors outside itself"
            )
        for t, step in enumerate(demo.steps):
            out.append(
                build_context(
                    index,
                    step.state,
                    step.prev_reward,
                    n,
                    exclude_demo=demo.demo_id,
                    query_action=step.action,
                    query_ref=(demo.demo_id, t),
                )
            )
    log.debug("preprocessed %s: %d datapoints, scale %.4g", demoset.spec.env_id, len(out), normalizer.scale)
    return CtxSet(demoset.spec, normalizer, n, tuple(out))
