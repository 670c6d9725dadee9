import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mopjci.conformal import IteBands
from mopjci.metrics import (MetricsReport, aggregate, coverage_joint, evaluate, pehe, split_accuracy,
                            summary_csv, table_columns, v_across, v_within)
from mopjci.partition import GroupCriterion, Leaf, PartitionTree, Split

finite = st.floats(-1e3, 1e3, allow_nan=False)


def _leaf(g):
    return Leaf(g, np.array([g]), GroupCriterion((0.0,), (0.0,), 0.0, 1, 1.0), (0.0,))


def _tree(splits, names=()):
    """Right-leaning tree over ``[(covariate, threshold), ...]``."""
    p = len(names) or 10
    if not splits:
        return PartitionTree(_leaf(0), p, tuple(names))
    node = _leaf(len(splits))
    for i, (j, v) in reversed(list(enumerate(splits))):
        node = Split(j, v, _leaf(i), node, 1.0, 1.0)
    return PartitionTree(node, p, tuple(names))


def test_v_across_examples():
    assert v_across([[1.0, 1.0], [1.0]]) == 0.0
    assert v_across([[-10.0], [10.0]]) == 200.0
    assert v_across([[1.0, 5.0, 9.0]]) == 0.0
    assert v_across([[-10.0], [], [10.0]]) == 200.0


def test_v_within_examples():
    assert v_within([[3.0, 3.0], [1.0, 1.0, 1.0]]) == 0.0
    assert v_within([[0.0, 2.0]]) == 2.0
    assert v_within([[0.0, 2.0], [0.0, 2.0 * np.sqrt(2.0)]]) == pytest.approx(3.0)
    assert v_within([[5.0], [0.0, 2.0]]) == 1.0


def test_pehe_examples():
    tau = np.array([1.0, -2.0, 3.0])
    assert pehe(tau, tau) == 0.0
    assert pehe(tau, tau + 1) == pytest.approx(1.0)
    assert pehe([0.0, 0.0], [0.0, 2.0]) == pytest.approx(np.sqrt(2.0))
    with pytest.raises(ValueError):
        pehe([1.0], [1.0, 2.0])


def test_coverage_examples():
    tau = np.random.default_rng(0).normal(size=(20, 2))
    assert coverage_joint(tau, tau - 1e300, tau + 1e300) == 1.0
    lo = np.column_stack([tau[:, 0] - 1, tau[:, 1] + 1])
    hi = lo + 0.5
    hi[:, 0] = tau[:, 0] + 1
    assert coverage_joint(tau, lo, hi) == 0.0
    one = tau[:, :1]
    assert coverage_joint(one, one - 1, one + np.where(np.arange(20) < 5, 1, -2)[:, None]) == 0.25
    with pytest.raises(ValueError):
        coverage_joint(tau, lo[:, :1], hi[:, :1])


def test_split_accuracy_examples():
    names = ["age", "WBC", "time", "ALT"]
    expected, unexpected = ["time", "ALT"], ["age", "WBC"]
    assert split_accuracy(_tree([(2, 1.0), (3, 2.0)], names), expected, unexpected) == (1, 0)
    assert split_accuracy(_tree([], names), expected, unexpected) == (0, 0)
    assert split_accuracy(_tree([(2, 1.0), (0, 2.0)], names), expected, unexpected) == (0, 1)
    assert split_accuracy(_tree([(2, 1.0)]), [2], [0, 1]) == (1, 0)
    with pytest.raises(ValueError):
        split_accuracy(_tree([]), ["a"], ["a"])


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(2, 40), elements=finite), st.integers(1, 5), st.integers(0, 10_000))
def test_merging_groups_decomposition(values, G, seed):
    labels = np.random.default_rng(seed).integers(0, G, values.size)
    groups = [values[labels == g] for g in range(G)]
    assert v_across([values]) == 0.0
    assert v_within([values]) == pytest.approx(np.var(values, ddof=1), rel=1e-12, abs=1e-9)
    assert v_within(groups) >= 0 and v_across(groups) >= 0


@settings(max_examples=50)
@given(arrays(np.float64, (15, 3), elements=finite), arrays(np.float64, (15, 3), elements=finite),
       arrays(np.float64, (15, 3), elements=st.floats(0, 100)))
def test_joint_coverage_bounded_by_marginals(tau, center, half):
    lo, hi = center - half, center + half
    joint = coverage_joint(tau, lo, hi)
    assert 0.0 <= joint <= min(coverage_joint(tau[:, k], lo[:, k], hi[:, k]) for k in range(3))


@settings(max_examples=50)
@given(arrays(np.float64, 12, elements=finite), arrays(np.float64, 12, elements=finite), st.randoms())
def test_pehe_permutation_invariant(a, b, rnd):
    perm = list(range(12))
    rnd.shuffle(perm)
    assert pehe(a[perm], b[perm]) == pytest.approx(pehe(a, b), rel=1e-12, abs=1e-12)


def test_evaluate_and_aggregate():
    X = np.array([[0.0], [1.0], [2.0], [3.0]])
    tree = _tree([(0, 1.0)], ["x"])
    tau = np.array([[0.0, 1.0], [2.0, 1.0], [5.0, 1.0], [5.0, 3.0]])
    bands = IteBands(tau[:, :1] + 1, tau[:, :1] - 2, tau[:, :1] + 2, tau[:, :1], tau[:, :1])
    r = evaluate(tree, X, tau, bands, expected=["x"], band_outcomes=[0])
    assert r.num_groups == 2 and r.v_within == [1.0, 1.0]
    assert r.v_across == [pytest.approx(((1 - 5) ** 2) / 2), 0.5]
    assert r.pehe == [1.0, None] and r.ci_width == [4.0, None]
    assert (r.cov_joint, r.split_acc, r.split_err) == (1.0, 1, 0)
    assert json.loads(r.to_json())["pehe"] == [1.0, None]

    r2 = MetricsReport(4, [0.0, 0.0], [2.0, 0.0], [3.0, None], [1.0, None], 0.5, 0, 1)
    agg = aggregate([r, r2])
    assert agg.mean["num_groups"] == 3.0
    assert agg.sd["num_groups"] == pytest.approx(np.sqrt(2.0))
    assert agg.mean["split_acc"] == 50.0 and agg.mean["split_err"] == 50.0
    assert "pehe_1" not in agg.mean
    text = summary_csv({"m": agg}, 2)
    header, row = text.strip().split("\n")
    assert header.split(",")[1:] == [f"{c}_{s}" for c in table_columns(2) for s in ("mean", "sd")]
    assert row.startswith("m,3.0,")
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_mean_is_arithmetic_mean():
    gen = np.random.default_rng(0)
    reps = [MetricsReport(int(g), [float(a)], [float(b)], [float(c)], [1.0], float(cv), 1, 0)
            for g, a, b, c, cv in zip(gen.integers(1, 8, 30), *gen.uniform(0, 50, (4, 30)))]
    agg = aggregate(reps)
    for key in ("num_groups", "v_across_0", "pehe_0", "cov"):
        vals = [r.row()[key] for r in reps]
        assert abs(agg.mean[key] - np.mean(vals)) <= 1e-12 * max(1, abs(np.mean(vals)))
        assert agg.sd[key] == pytest.approx(np.std(vals, ddof=1), rel=1e-12)
