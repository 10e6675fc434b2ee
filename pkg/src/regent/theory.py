"""Numerical checks of the coverage quantity d^I and the bounds built on it.

``d^I`` is the largest normalized distance from any state of the environment
to its closest retrieval state. The total-variation lemma says two REGENT
policies sharing a context differ by at most ``1 - exp(-lambda d)``; the
sub-optimality bound turns the worst-case ``d^I`` into
``min(H, H^2 (1 - exp(-lambda d^I)))``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .agents import InterpConfig, regent_discrete
from .core import ContextDatapoint, DemoSet, EnvSpec
from .distance import Normalizer, calibrate, distances_to
from .envs import EnvInstance, episode_rng, expert_policy, generate_demos, make_env, run_episode
from .retrieval import build_index
from .seqmodel import SeqModel, predict_raw

log = logging.getLogger(__name__)

TV_TOLERANCE = 1e-12
PM_STATE_SAMPLES = 100_000


class BoundViolation(AssertionError):
    pass


@dataclass(frozen=True)
class BoundReport:
    env_id: str
    d_isolated: float
    lam: float
    horizon: int
    bound: float
    empirical_gap: float
    n_demos: int
    gap_se: float = 0.0
    d_is_estimate: bool = False

    def __post_init__(self):
        expected = suboptimality_bound(self.horizon, self.lam, self.d_isolated)
        if not math.isclose(self.bound, expected, rel_tol=0, abs_tol=1e-12):
            raise ValueError(f"bound {self.bound} inconsistent with d_isolated (expected {expected})")

    @property
    def within_bound(self) -> bool:
        return self.empirical_gap <= self.bound + 2.0 * self.gap_se


def most_isolated_distance(demoset: DemoSet, state_sample, metric: str, normalizer: Normalizer) -> float:
    """max over sampled states of the normalized distance to the nearest retrieval state."""
    if not demoset.retrieval_ids:
        raise ValueError("empty retrieval set")
    state_sample = list(state_sample)
    if not state_sample:
        raise ValueError("empty state sample")
    stack = np.stack([s.state for d in demoset.retrieval_demos() for s in d.steps])
    worst = 0.0
    for state in state_sample:
        nearest = float(distances_to(state, stack, metric).min())
        worst = max(worst, float(normalizer(nearest)))
    return worst


def suboptimality_bound(H: int, lam: float, d_isolated: float) -> float:
    if int(H) != H or H < 1:
        raise ValueError(f"horizon must be a positive integer, got {H}")
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if not 0.0 <= d_isolated <= 1.0:
        raise ValueError(f"d_isolated {d_isolated} outside [0, 1]")
    return min(float(H), H * H * (1.0 - math.exp(-lam * d_isolated)))


def total_variation(p, q) -> float:
    """Half the L1 distance, i.e. the largest disagreement over any event."""
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def tv_bound_check(
    model_a: SeqModel,
    model_b: SeqModel,
    contexts: Sequence[ContextDatapoint],
    spec: EnvSpec,
    cfg: InterpConfig = InterpConfig(),
):
    """Largest TV between the two interpolated policies, and the bound per context.

    Raises BoundViolation if any context exceeds its bound by more than 1e-12.
    """
    # the init seed is the only field allowed to differ
    if replace(model_a.cfg, seed=0) != replace(model_b.cfg, seed=0):
        raise ValueError("models must share a configuration")
    if not spec.is_discrete:
        raise ValueError("the total-variation check covers discrete action spaces only")
    tvs, bounds = [], []
    for ctx in contexts:
        pa = regent_discrete(predict_raw(model_a, ctx, spec), ctx, cfg, spec.act_dims)
        pb = regent_discrete(predict_raw(model_b, ctx, spec), ctx, cfg, spec.act_dims)
        tvs.append(total_variation(pa, pb))
        bounds.append(1.0 - math.exp(-cfg.lam * ctx.dist_first))
    tvs, bounds = np.asarray(tvs), np.asarray(bounds)
    excess = tvs - bounds
    if len(excess) and excess.max() > TV_TOLERANCE:
        i = int(excess.argmax())
        raise BoundViolation(f"context {i}: TV {tvs[i]:.3g} exceeds bound {bounds[i]:.3g}")
    return (float(tvs.max()) if len(tvs) else 0.0), bounds


PolicyBuilder = Callable[[EnvInstance, DemoSet, Normalizer], Callable]


def state_space(env: EnvInstance, seed: int, samples: int = PM_STATE_SAMPLES):
    """All gridworld states, or a uniform sample for pointmass. Second value flags an estimate."""
    if env.family == "gridworld":
        return env.all_states(), False
    return env.sample_states(samples, np.random.default_rng(seed)), True


def paired_gap(env: EnvInstance, policy, n_episodes: int, seed: int):
    """Mean and standard error of J(expert) - J(policy) over episodes sharing start states."""
    expert = lambda s, r: expert_policy(env, s)
    diffs = np.empty(n_episodes)
    for i in range(n_episodes):
        j_star, _ = run_episode(env, expert, episode_rng(seed, i))
        j_pol, _ = run_episode(env, policy, episode_rng(seed, i))
        diffs[i] = j_star - j_pol
    se = float(diffs.std(ddof=1) / math.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    return float(diffs.mean()), se


def bound_experiment(
    env_family: str,
    demo_counts: Sequence[int],
    policy_builder: PolicyBuilder,
    seed: int,
    level: int = 0,
    n_episodes: int = 500,
    metric: Optional[str] = None,
    lam: float = InterpConfig().lam,
    sticky_p: float = 0.0,
    check: bool = True,
    state_samples: int = PM_STATE_SAMPLES,
) -> List[BoundReport]:
    """Gap versus bound for nested demo sets of growing size on one level.

    One normalizer, calibrated on the largest set, is shared by every count so
    that d^I values are comparable across counts. The bound is asserted only at
    sticky_p = 0; sticky runs are reported without the check.
    """
    counts = list(demo_counts)
    if not counts or any(b <= a for a, b in zip(counts, counts[1:])) or counts[0] < 1:
        raise ValueError("demo_counts must be positive and strictly increasing")
    metric = metric or ("ssim" if env_family == "gridworld" else "l2")
    full = generate_demos(env_family, [level], counts[-1])
    normalizer = calibrate(full, metric) if counts[-1] > 1 else Normalizer(full.spec.env_id, 1.0, metric)
    env = make_env(env_family, level, sticky_p)
    states, estimate = state_space(env, seed, state_samples)
    reports = []
    for count in counts:
        demos = full.subset(range(count))
        d_iso = most_isolated_distance(demos, states, metric, normalizer)
        policy = policy_builder(env, demos, normalizer)
        gap, se = paired_gap(env, policy, n_episodes, seed)
        H = env.spec.horizon
        rep = BoundReport(
            env_id=env.spec.env_id,
            d_isolated=d_iso,
            lam=lam,
            horizon=H,
            bound=suboptimality_bound(H, lam, d_iso),
            empirical_gap=gap,
            n_demos=count,
            gap_se=se,
            d_is_estimate=estimate,
        )
        log.info("%s demos=%d d_I=%.4f gap=%.4f±%.4f bound=%.4f", rep.env_id, count, d_iso, gap, se, rep.bound)
        if check and sticky_p == 0.0 and not rep.within_bound:
            raise BoundViolation(f"{count} demos: gap {gap:.4f} exceeds bound {rep.bound:.4f} + 2 SE")
        reports.append(rep)
    return reports


def rnp_builder(env: EnvInstance, demos: DemoSet, normalizer: Normalizer):
    from .policies import RnpPolicy

    return RnpPolicy(build_index(demos, normalizer.metric, normalizer))


def expert_builder(env: EnvInstance, demos: DemoSet, normalizer: Normalizer):
    return lambda s, r: expert_policy(env, s)


REPORT_FIELDS = [f.name for f in fields(BoundReport)] + ["within_bound"]


def write_reports(reports: Sequence[BoundReport], path, extra: Optional[dict] = None) -> None:
    extra = extra or {}
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_FIELDS + list(extra))
        w.writeheader()
        for rep in reports:
            w.writerow({**asdict(rep), "within_bound": rep.within_bound, **extra})
