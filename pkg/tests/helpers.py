"""Small builders shared by the test modules."""

from regent.core import ContextDatapoint, Demonstration, DemoSet, EnvSpec, Step


def vec_spec(kind="discrete", obs=3, act=None, horizon=10, env_id="toy"):
    act = act if act is not None else (5 if kind == "discrete" else 2)
    return EnvSpec(env_id, "vector", (obs,), kind, act, horizon, 0.0, 1.0)


def random_action(rng, spec):
    if spec.is_discrete:
        return int(rng.integers(spec.act_dims))
    return rng.uniform(-1.0, 1.0, spec.act_dims)


def random_demoset(rng, spec, n_demos, max_len=None, retrieval=None):
    max_len = max_len or spec.horizon
    demos = []
    for i in range(n_demos):
        length = int(rng.integers(1, max_len + 1))
        steps = [
            Step(rng.normal(size=spec.obs_dims), 0.0 if t == 0 else float(rng.normal()), random_action(rng, spec))
            for t in range(length)
        ]
        demos.append(Demonstration(i, steps, float(rng.normal())))
    ids = tuple(range(n_demos)) if retrieval is None else tuple(retrieval)
    return DemoSet(spec, demos, ids)


def random_context(rng, spec, n_neighbors, dist_first=None, position_dists=None):
    nb = [Step(rng.normal(size=spec.obs_dims), float(rng.normal()), random_action(rng, spec)) for _ in range(n_neighbors)]
    d = float(rng.uniform()) if dist_first is None else float(dist_first)
    pd = tuple(rng.uniform(size=n_neighbors)) if position_dists is None else tuple(position_dists)
    return ContextDatapoint(
        spec.env_id, nb, rng.normal(size=spec.obs_dims), float(rng.normal()), random_action(rng, spec), d, pd + (d,)
    )
