"""Deployable policies: callables mapping (state, previous reward) to an action."""

from __future__ import annotations

from typing import Optional

from .agents import InterpConfig
from .core import DemoSet
from .distance import Normalizer, calibrate
from .retrieval import DEFAULT_N, StateIndex, build_context, build_index, knn
from .seqmodel import SeqModel, regent_act


def deployment_index(demos: DemoSet, metric: str, normalizer: Optional[Normalizer] = None) -> StateIndex:
    """Index over the given demos, calibrated on them unless a normalizer is supplied.

    A single demonstration cannot be calibrated (no cross-demo pairs); it
    gets a unit scale.
    """
    if normalizer is None:
        if len(demos.retrieval_ids) > 1 or len(demos.demos) > len(demos.retrieval_ids):
            normalizer = calibrate(demos, metric)
        else:
            normalizer = Normalizer(demos.spec.env_id, 1.0, metric)
    return build_index(demos, metric, normalizer)


class RnpPolicy:
    """Retrieve and Play: act like the single nearest demonstrated state."""

    def __init__(self, index: StateIndex):
        self.index = index

    def __call__(self, state, prev_reward):
        demo_id, t, _ = knn(self.index, state, 1)[0]
        return self.index.step(demo_id, t).action


class RegentPolicy:
    def __init__(self, model: SeqModel, index: StateIndex, spec, n: int = DEFAULT_N, interp: InterpConfig = InterpConfig()):
        model.cfg.check_spec(spec, n)
        self.model = model
        self.index = index
        self.spec = spec
        self.n = n
        self.interp = interp

    def __call__(self, state, prev_reward):
        ctx = build_context(self.index, state, prev_reward, self.n)
        return regent_act(self.model, ctx, self.spec, self.interp)
