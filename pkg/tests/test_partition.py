import json

import numpy as np
import pytest

from mopjci.conformal import IteBands, fit_and_band
from mopjci.core import ExperimentConfig, Interval, TrialDataset
from mopjci.forest import ForestHyperparams
from mopjci.partition import (GroupCriterion, Leaf, PartitionTree, Split, assign_group, assign_groups,
                              best_split, group_criterion, partition, sample_deviation)

from oracles import brute_force_split, random_fixture


def _bands(point, hw=1.0, hv=0.5):
    point = np.asarray(point, dtype=float)
    if point.ndim == 1:
        point = point[:, None]
    return IteBands(point, point - hw, point + hw, point - hv, point + hv)


def test_sample_deviation():
    assert sample_deviation(Interval(1, 4), 5) == 1
    assert sample_deviation(Interval(4, 6), 5) == 0
    assert sample_deviation(Interval(3, 6), 2) == 1


def test_group_criterion_examples():
    cfg = ExperimentConfig(lambda_=1.0, outcome_weights=(1.0, 0.0))
    b = IteBands(np.zeros((3, 2)), np.full((3, 2), -1.5), np.full((3, 2), 1.5),
                 np.full((3, 2), -1.0), np.full((3, 2), 1.0))
    c = group_criterion([0, 1, 2], b, cfg)
    assert c.V == (0.0, 0.0)
    assert c.objective == pytest.approx(3.0)
    # deviations 1 and 3 -> V = 2
    b = IteBands(np.array([[0.0], [4.0]]), np.array([[-9.0], [-9.0]]), np.array([[9.0], [9.0]]),
                 np.array([[3.0], [-1.0]]), np.array([[4.0], [-1.0]]))
    c = group_criterion([0, 1], b, ExperimentConfig(lambda_=0.0, outcome_weights=(1.0,)))
    assert c.V == (2.0,)
    with pytest.raises(ValueError, match="empty"):
        group_criterion([], b, ExperimentConfig(outcome_weights=(1.0,)))


def test_scqr_objective_is_scr_at_lambda_zero():
    X, bands, _, _ = random_fixture(0)
    scqr = group_criterion(np.arange(bands.n), bands, ExperimentConfig(estimator="qrf_scqr", lambda_=0.7))
    scr = group_criterion(np.arange(bands.n), bands, ExperimentConfig(lambda_=0.0))
    assert scqr.objective == scr.objective


def test_best_split_separating_binary_covariate():
    X = np.array([[0, 5.0], [0, 1.0], [0, 3.0], [1, 2.0], [1, 4.0], [1, 0.0]])
    point = np.where(X[:, 0] == 1, 10.0, 0.0) + np.array([0, .1, -.1, 0, .1, -.1])
    cfg = ExperimentConfig(lambda_=0.0, gamma=0.0, min_leaf=1, min_arm=0, outcome_weights=(1.0,))
    j, v, gain = best_split(X, np.arange(6), _bands(point), cfg)
    assert (j, v) == (0, 0.0) and gain > 0


def test_best_split_none_for_identical_rows():
    cfg = ExperimentConfig(gamma=0.0, min_leaf=1, min_arm=0, outcome_weights=(1.0,))
    assert best_split(np.ones((5, 2)), np.arange(5), _bands(np.arange(5.0)), cfg) is None


def test_tie_prefers_lowest_covariate():
    # covariates 0 and 1 induce the same partition
    X = np.array([[0, 0, 9.0], [0, 0, 8.0], [1, 1, 7.0], [1, 1, 6.0]])
    cfg = ExperimentConfig(lambda_=0.0, gamma=0.0, min_leaf=1, min_arm=0, outcome_weights=(1.0,))
    j, v, _ = best_split(X, np.arange(4), _bands([0.0, 0.0, 5.0, 5.0]), cfg)
    assert (j, v) == (0, 0.0)


@pytest.mark.parametrize("seed", range(25))
def test_best_split_matches_brute_force(seed):
    X, bands, cfg, calib = random_fixture(seed)
    members = np.arange(bands.n)
    got = best_split(X, members, bands, cfg, calib)
    want = brute_force_split(X, members, bands, cfg, calib)
    if want is None:
        assert got is None
    else:
        assert got[:2] == want[:2]
        assert abs(got[2] - want[2]) <= 1e-12


def test_huge_gamma_single_leaf():
    X, bands, cfg, calib = random_fixture(3)
    tree = partition(X, bands, cfg.replace(gamma=1e6), calib)
    assert tree.num_groups == 1 and isinstance(tree.root, Leaf)
    assert assign_group(tree, X[0]) == 0


def test_two_informative_binary_covariates():
    gen = np.random.default_rng(0)
    x0 = np.array([0, 1] * 6, dtype=float)
    x1 = np.array([0, 0, 1, 1] * 3, dtype=float)
    X = np.column_stack([x0, x1, gen.normal(size=12)])
    point = np.column_stack([10 * x0, -8 * x1]) + gen.normal(scale=0.01, size=(12, 2))
    cfg = ExperimentConfig(lambda_=0.0, gamma=0.05, min_leaf=1, min_arm=0)
    tree = partition(X, _bands(point, hw=0.5, hv=0.1), cfg)
    assert tree.split_covariates() == {0, 1}
    assert tree.num_groups == 4


def _check_tree_invariants(tree, n, min_leaf):
    leaves = tree.leaves
    assert [leaf.group for leaf in leaves] == list(range(len(leaves)))
    allm = np.concatenate([leaf.members for leaf in leaves])
    assert np.array_equal(np.sort(allm), np.arange(n))
    assert all(leaf.members.size >= min_leaf for leaf in leaves)


def _trial(n=160, seed=0):
    gen = np.random.default_rng(seed)
    X = gen.uniform(0, 1, size=(n, 3))
    t = np.tile([0.0, 1.0], n // 2)
    tau = np.column_stack([5 * (X[:, 0] > 0.5), 3 * (X[:, 1] > 0.3)])
    Y = t[:, None] * tau + 0.1 * gen.normal(size=(n, 2))
    return TrialDataset(X, ("a", "b", "c"), t, Y, ("y0", "y1"), tau)


@pytest.mark.parametrize("estimator", ["rf_scr", "qrf_scqr"])
def test_partition_on_fitted_bands(estimator):
    ds = _trial()
    cfg = ExperimentConfig(estimator=estimator)
    hp = ForestHyperparams(n_estimators=30)
    calib, bands, val = fit_and_band(ds, cfg, 0, hp, hp)
    X = ds.covariates[val]
    tree = partition(X, bands, cfg, calib, ds.covariate_names)
    _check_tree_invariants(tree, val.size, cfg.min_leaf)
    for leaf in tree.leaves:
        assert min((calib.val_treatment[leaf.members] == a).sum() for a in (0, 1)) >= cfg.min_arm
    assert 0 in tree.split_covariates()
    assert np.array_equal(assign_groups(tree, X), np.concatenate(
        [np.full(leaf.members.size, leaf.group) for leaf in tree.leaves])[np.argsort(
            np.concatenate([leaf.members for leaf in tree.leaves]))])
    for node in _internal(tree.root):
        assert node.gain > cfg.gamma * node.value >= 0


def _internal(node):
    if isinstance(node, Split):
        yield node
        yield from _internal(node.left)
        yield from _internal(node.right)


def test_single_outcome_weights_reproduce_baseline_tree():
    ds = _trial(seed=1)
    hp = ForestHyperparams(n_estimators=30)
    cfg = ExperimentConfig(outcome_weights=(1.0, 0.0))
    calib, bands, val = fit_and_band(ds, cfg, 0, hp)
    X = ds.covariates[val]
    joint = partition(X, bands, cfg, calib)
    single = partition(X, bands.select_outcomes([0]), cfg.replace(outcome_weights=(1.0,)),
                       calib.select_outcomes([0]))
    assert joint.splits() == single.splits()
    assert [n.gain for n in _internal(joint.root)] == [n.gain for n in _internal(single.root)]


def test_assign_group_boundary_and_errors():
    crit = GroupCriterion((0.0,), (0.0,), 0.0, 1, 0.5)
    tree = PartitionTree(Split(0, 3.0, Leaf(0, np.array([0]), crit, (0.0,)),
                               Leaf(1, np.array([1]), crit, (1.0,)), 1.0, 1.0), 2)
    assert assign_group(tree, [3.0, 0.0]) == 0
    assert assign_group(tree, [3.1, 0.0]) == 1
    with pytest.raises(ValueError):
        assign_group(tree, [1.0])
    assert PartitionTree(Leaf(0, np.array([0]), crit, (0.0,)), 2).num_groups == 1


def test_tree_json_round_trip():
    X, bands, cfg, calib = random_fixture(5, recal=False)
    tree = partition(X, bands, cfg, calib, tuple(f"x{j}" for j in range(X.shape[1])))
    back = PartitionTree.from_json(tree.to_json())
    assert back.splits() == tree.splits()
    assert np.array_equal(assign_groups(back, X), assign_groups(tree, X))
    assert json.loads(back.to_json()) == json.loads(tree.to_json())


def test_partition_needs_enough_samples():
    with pytest.raises(ValueError, match="min_leaf"):
        partition(np.zeros((5, 1)), _bands(np.zeros(5)), ExperimentConfig(outcome_weights=(1.0,)))
