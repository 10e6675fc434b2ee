"""Desk-scale experiment recipes shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .agents import InterpConfig
from .core import CtxSet, DemoSet
from .envs import generate_demos, make_env, normalized_return, rollout
from .policies import RegentPolicy, RnpPolicy, deployment_index
from .retrieval import designate_retrieval_set, preprocess
from .seqmodel import ModelConfig, SeqModel, TrainConfig, finetune, pretrain

METRIC_FOR = {"gridworld": "ssim", "pointmass": "l2"}

# Training levels keep a designated retrieval subset this size out of their
# demos, so most queries see neighbours from other trajectories only.
TRAIN_RETRIEVAL_COUNT = 5

DESK_TRAIN = TrainConfig(batch_size=8, lr_start=1e-3, epochs=3, stop_after_epochs=1)

POLICIES = ("rnp", "regent", "regent_finetuned")


@dataclass
class PretrainSetup:
    family: str = "gridworld"
    train_levels: Sequence[int] = tuple(range(8))
    demos_per_level: int = 20
    retrieval_count: int = TRAIN_RETRIEVAL_COUNT
    n: int = 9
    hidden: int = 64
    train: TrainConfig = DESK_TRAIN
    interp: InterpConfig = field(default_factory=InterpConfig)

    @property
    def metric(self) -> str:
        return METRIC_FOR[self.family]


def contexts_for(demos: DemoSet, family: str, n: int, retrieval_count: Optional[int], seed: int) -> CtxSet:
    """Designate a retrieval subset (unless ``retrieval_count`` is None) and preprocess."""
    if retrieval_count is not None:
        demos = designate_retrieval_set(demos, min(retrieval_count, len(demos.demos)), seed)
    return preprocess(demos, METRIC_FOR[family], n)


def training_corpus(setup: PretrainSetup) -> Dict[str, CtxSet]:
    out = {}
    for lvl in setup.train_levels:
        ds = generate_demos(setup.family, [lvl], setup.demos_per_level)
        cs = contexts_for(ds, setup.family, setup.n, setup.retrieval_count, lvl)
        out[cs.spec.env_id] = cs
    return out


def pretrain_corpus(corpus: Dict[str, CtxSet], n: int, seed: int, hidden=64, train=DESK_TRAIN, interp=InterpConfig(), **model_kw):
    cfg = ModelConfig.for_specs([c.spec for c in corpus.values()], n, seed=seed, hidden=hidden, **model_kw)
    return pretrain(corpus, cfg, replace(train, seed=seed), interp)


def pretrain_desk(setup: PretrainSetup, seed: int, corpus=None):
    """Pretrain one model; returns (model, loss rows, corpus)."""
    corpus = training_corpus(setup) if corpus is None else corpus
    model, rows = pretrain_corpus(corpus, setup.n, seed, setup.hidden, setup.train, setup.interp)
    return model, rows, corpus


def finetune_on(model: SeqModel, demos: DemoSet, family: str, n: int, seed: int, train=DESK_TRAIN, interp=InterpConfig()):
    """Finetune on a held-out level's own demos (every demo is both query and retrieval source).

    A single demo yields no datapoint with a neighbour outside its own
    trajectory, so the model comes back unchanged.
    """
    if len(demos.demos) < 2:
        return model.clone()
    ctx = contexts_for(demos, family, n, None, seed)
    tuned, _ = finetune(model, ctx, replace(train, seed=seed), interp)
    return tuned


@dataclass
class EvalRow:
    policy: str
    env_id: str
    n_demos: int
    seed: int
    normalized: float


def evaluate_policy(
    name: str,
    model: Optional[SeqModel],
    demos: DemoSet,
    family: str,
    level: int,
    sticky_p: float,
    episodes: int,
    seed: int,
    n: int = 9,
    interp: InterpConfig = InterpConfig(),
    variant: str = "base",
) -> EvalRow:
    """Normalized return of one policy, deployed with ``demos`` as its retrieval set."""
    if not demos.demos:
        raise ValueError("R&P is undefined without demonstrations")
    index = deployment_index(demos, METRIC_FOR[family])
    if name == "rnp":
        pol = RnpPolicy(index)
    elif name in ("regent", "regent_finetuned"):
        if model is None:
            raise ValueError(f"{name} needs a model")
        pol = RegentPolicy(model, index, demos.spec, n, interp)
    else:
        raise ValueError(f"unknown policy {name!r}")
    env = make_env(family, level, sticky_p, variant=variant)
    mean, _ = rollout(env, pol, episodes, seed)
    return EvalRow(name, demos.spec.env_id, len(demos.demos), seed, float(normalized_return(mean, demos.spec)))


def evaluate_level(
    model: SeqModel,
    family: str,
    level: int,
    n_demos: int,
    sticky_p: float,
    episodes: int,
    seed: int,
    setup: PretrainSetup,
    policies: Sequence[str] = ("rnp", "regent"),
) -> List[EvalRow]:
    """Generate ``n_demos`` on a held-out level and score each requested policy."""
    demos = generate_demos(family, [level], n_demos)
    rows = []
    for name in policies:
        m = model
        if name == "regent_finetuned":
            m = finetune_on(model, demos, family, setup.n, seed, setup.train, setup.interp)
        rows.append(evaluate_policy(name, m, demos, family, level, sticky_p, episodes, seed, setup.n, setup.interp))
    return rows


def summarize(rows: Sequence[EvalRow]):
    """(policy, env_id, n_demos) -> (mean, std, count) over seeds."""
    groups: Dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r.policy, r.env_id, r.n_demos), []).append(r.normalized)
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in sorted(groups.items())}
