import numpy as np
import pytest

from helpers import random_demoset, vec_spec
from regent.core import Demonstration, DemoSet, EnvSpec, Step
from regent.distance import Normalizer, distances_to
from regent.envs import generate_demos
from regent.retrieval import (
    PreprocessError,
    RetrievalError,
    build_context,
    build_index,
    designate_retrieval_set,
    knn,
    preprocess,
)


def line_demoset(values, per_demo=1):
    """1-D states; demo i holds values[i*per_demo:(i+1)*per_demo]."""
    spec = EnvSpec("line", "vector", (1,), "discrete", 3, 10, 0.0, 1.0)
    demos = []
    for i in range(0, len(values), per_demo):
        steps = [Step([v], 0.0 if j == 0 else 0.5, j % 3) for j, v in enumerate(values[i : i + per_demo])]
        demos.append(Demonstration(i // per_demo, steps, 0.0))
    return DemoSet(spec, demos, tuple(range(len(demos))))


def naive_knn(index, query, k, exclude=None):
    rows = []
    for i in range(len(index)):
        if exclude is not None and index.demo_ids[i] == exclude:
            continue
        d = float(distances_to(query, index.states[i : i + 1], index.metric)[0])
        rows.append((d, int(index.demo_ids[i]), int(index.step_idx[i])))
    rows.sort()
    return [(dm, t, d) for d, dm, t in rows[:k]]


class TestDesignation:
    def test_full(self):
        ds = random_demoset(np.random.default_rng(0), vec_spec(), 6)
        assert designate_retrieval_set(ds, 6, 0).retrieval_ids == tuple(range(6))

    def test_deterministic(self):
        ds = random_demoset(np.random.default_rng(0), vec_spec(), 10)
        assert designate_retrieval_set(ds, 3, 7).retrieval_ids == designate_retrieval_set(ds, 3, 7).retrieval_ids

    def test_seeds_differ(self):
        ds = random_demoset(np.random.default_rng(0), vec_spec(), 10)
        differs = [
            designate_retrieval_set(ds, 3, s).retrieval_ids != designate_retrieval_set(ds, 3, s + 1).retrieval_ids
            for s in range(100)
        ]
        assert any(differs)

    def test_bad_count(self):
        ds = random_demoset(np.random.default_rng(0), vec_spec(), 3)
        with pytest.raises(ValueError):
            designate_retrieval_set(ds, 4, 0)


class TestIndex:
    def test_counts(self):
        ds = line_demoset([0, 1, 2, 3, 4, 5], per_demo=3)
        assert len(build_index(ds, "l2", Normalizer("line", 1.0, "l2"))) == 6

    def test_designation(self):
        ds = generate_demos("gridworld", [2], 6)
        ds = ds.with_retrieval((1, 4))
        idx = build_index(ds, "ssim", Normalizer(ds.spec.env_id, 1.0, "ssim"))
        assert len(idx) == len(ds.demo(1).steps) + len(ds.demo(4).steps)
        assert set(idx.demo_ids.tolist()) == {1, 4}

    def test_empty_retrieval(self):
        ds = line_demoset([0, 1]).with_retrieval(())
        with pytest.raises(RetrievalError):
            build_index(ds, "l2", Normalizer("line", 1.0, "l2"))


class TestKnn:
    def test_hand_example(self):
        idx = build_index(line_demoset([0, 1, 5]), "l2", Normalizer("line", 1.0, "l2"))
        hits = knn(idx, np.array([0.9]), 2)
        assert [(d, t) for d, t, _ in hits] == [(1, 0), (0, 0)]
        np.testing.assert_allclose([h[2] for h in hits], [0.1, 0.9], atol=1e-15)

    def test_identity_first(self):
        idx = build_index(line_demoset([3, 1, 2]), "l2", Normalizer("line", 1.0, "l2"))
        assert knn(idx, np.array([2.0]), 1)[0] == (2, 0, 0.0)

    def test_ties_by_provenance(self):
        idx = build_index(line_demoset([1, 3, 1, 3], per_demo=2), "l2", Normalizer("line", 1.0, "l2"))
        hits = knn(idx, np.array([2.0]), 4)
        assert [(d, t) for d, t, _ in hits] == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_against_naive(self):
        rng = np.random.default_rng(11)
        for trial in range(50):
            vals = rng.integers(0, 30, size=200).astype(float)  # integer grid forces ties
            ds = line_demoset(list(vals), per_demo=10)
            idx = build_index(ds, "l2", Normalizer("line", 1.0, "l2"))
            q = np.array([rng.uniform(0, 30)])
            ex = int(rng.integers(20)) if trial % 2 else None
            assert knn(idx, q, 19, ex) == naive_knn(idx, q, 19, ex)

    def test_all_excluded(self):
        idx = build_index(line_demoset([0, 1], per_demo=2), "l2", Normalizer("line", 1.0, "l2"))
        with pytest.raises(RetrievalError):
            knn(idx, np.array([0.0]), 1, exclude_demo=0)


class TestContext:
    def test_exact_match(self):
        idx = build_index(line_demoset([0, 4, 9]), "l2", Normalizer("line", 10.0, "l2"))
        ctx = build_context(idx, np.array([4.0]), 0.0, 3)
        assert ctx.dist_first == 0.0
        assert [r[0] for r in ctx.neighbor_refs] == [1, 0, 2]

    def test_short_context(self):
        idx = build_index(line_demoset(list(range(12))), "l2", Normalizer("line", 1.0, "l2"))
        assert len(build_context(idx, np.array([0.5]), 0.0, 19)) == 12

    def test_sorted_and_normalized(self):
        rng = np.random.default_rng(0)
        idx = build_index(line_demoset(list(rng.normal(size=40))), "l2", Normalizer("line", 0.5, "l2"))
        ctx = build_context(idx, np.array([0.1]), 0.0, 19)
        d = [abs(s.state[0] - 0.1) for s in ctx.neighbors]
        assert all(a <= b for a, b in zip(d, d[1:]))
        assert ctx.dist_first == pytest.approx(min(d[0] / 0.5, 1.0), abs=1e-15)
        assert ctx.position_dists[0] == 0.0


class TestPreprocess:
    def test_hygiene(self):
        rng = np.random.default_rng(0)
        spec = vec_spec(horizon=5)
        demos = [
            Demonstration(i, [Step(rng.normal(size=3), 0.0 if t == 0 else 1.0, t % 5) for t in range(5)], 0.0)
            for i in range(3)
        ]
        cs = preprocess(DemoSet(spec, demos, (0, 1, 2)), "l2", 4)
        assert len(cs) == 15
        for dp in cs:
            assert all(ref[0] != dp.query_ref[0] for ref in dp.neighbor_refs)
            assert 0.0 <= dp.dist_first <= 1.0

    def test_held_out_queries_see_designated_only(self):
        ds = line_demoset([0, 1, 2, 3, 4, 5], per_demo=2).with_retrieval((0, 1))
        cs = preprocess(ds, "l2", 3, Normalizer("line", 1.0, "l2"))
        assert len(cs) == 6
        for dp in cs:
            if dp.query_ref[0] == 2:
                assert {r[0] for r in dp.neighbor_refs} <= {0, 1}

    def test_lone_designated_demo_is_an_error(self):
        ds = line_demoset([0, 1, 2, 3], per_demo=2).with_retrieval((0,))
        with pytest.raises(PreprocessError, match="demo 0"):
            preprocess(ds, "l2", 2, Normalizer("line", 1.0, "l2"))
