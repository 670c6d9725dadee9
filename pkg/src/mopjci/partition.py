"""Recursive partitioning of validation samples on joint ITE bands.

A group's criterion combines, per outcome, the mean W-band width and the mean
deviation of the group-mean effect outside each member's V band.  Group
values entering the objective are weighted by the group's share of the
validation set, so the objective of a partition is an expectation over the
whole population and a split is comparable with its parent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .conformal import SCQR, SCR, ConformalCalibration, IteBands, recalibrate_subgroup
from .core import ExperimentConfig, Interval

# relative slack below which gains count as ties / rounding noise
TIE_TOL = 1e-12


def sample_deviation(band: Interval, group_mean: float) -> float:
    """Distance of ``group_mean`` outside ``band`` (0 when covered)."""
    if group_mean > band.hi:
        return group_mean - band.hi
    if group_mean < band.lo:
        return band.lo - group_mean
    return 0.0


def deviations(lo, hi, group_mean):
    """Vectorized :func:`sample_deviation`."""
    return np.where(group_mean > hi, group_mean - hi, np.where(group_mean < lo, lo - group_mean, 0.0))


@dataclass(frozen=True)
class GroupCriterion:
    W: tuple
    V: tuple
    objective: float
    size: int
    share: float

    @property
    def weighted(self) -> float:
        """Contribution to the partition objective: ``share * objective``."""
        return self.share * self.objective


@dataclass(frozen=True)
class _Problem:
    """Arrays the criterion reads, indexed by validation row."""

    point: np.ndarray
    v_lo: np.ndarray
    v_hi: np.ndarray
    w_width: np.ndarray
    score_w: np.ndarray
    score_v: np.ndarray
    treatment: np.ndarray
    recalibrate: bool
    level_w: float
    level_v: float
    lam: float
    tau: np.ndarray
    n_total: int


def _problem(bands: IteBands, cfg: ExperimentConfig, calib: ConformalCalibration | None) -> _Problem:
    d = bands.d
    tau = np.asarray(cfg.outcome_weights, dtype=np.float64)
    if tau.shape[0] != d:
        raise ValueError(f"{tau.shape[0]} outcome weights for {d} outcomes")
    method = cfg.method if calib is None else calib.method
    recal = calib is not None and calib.method == SCR
    empty = np.zeros((bands.n, d))
    if calib is not None and calib.val_treatment.shape[0] != bands.n:
        raise ValueError("calibration and bands cover different validation sets")
    return _Problem(
        point=np.ascontiguousarray(bands.point),
        v_lo=np.ascontiguousarray(bands.v_lo),
        v_hi=np.ascontiguousarray(bands.v_hi),
        w_width=np.ascontiguousarray(bands.w_hi - bands.w_lo),
        score_w=np.ascontiguousarray(calib.val_scores["w"]) if recal else empty,
        score_v=np.ascontiguousarray(calib.val_scores["v"]) if recal else empty,
        treatment=(calib.val_treatment.astype(np.int64) if calib is not None
                   else np.zeros(bands.n, dtype=np.int64)),
        recalibrate=recal,
        level_w=calib.levels["w"] if recal else 0.0,
        level_v=calib.levels["v"] if recal else 0.0,
        lam=0.0 if method == SCQR else float(cfg.lambda_),
        tau=tau,
        n_total=bands.n,
    )


def group_criterion(members, bands: IteBands, cfg: ExperimentConfig,
                    calib: ConformalCalibration | None = None, n_total: int | None = None) -> GroupCriterion:
    """W, V and objective of one group of validation samples.

    With an SCR calibration the members' bands are rebuilt from offsets
    recalibrated on the members alone.  SCQR groups use the bands as given
    and an objective with ``lambda = 0``.
    """
    members = np.sort(np.asarray(members, dtype=np.int64))
    if members.size == 0:
        raise ValueError("empty group")
    pb = _problem(bands, cfg, calib)
    n_total = pb.n_total if n_total is None else n_total
    if pb.recalibrate:
        Q = recalibrate_subgroup(calib, members)
    W, V = [], []
    objective = 0.0
    for k in range(bands.d):
        pts = pb.point[members, k]
        mean = pts.sum() / members.size
        if pb.recalibrate:
            hw = Q[(k, 1, "w")] + Q[(k, 0, "w")]
            hv = Q[(k, 1, "v")] + Q[(k, 0, "v")]
            W_k = 2.0 * hw
            dev = deviations(pts - hv, pts + hv, mean)
        else:
            W_k = pb.w_width[members, k].sum() / members.size
            dev = deviations(pb.v_lo[members, k], pb.v_hi[members, k], mean)
        V_k = dev.sum() / members.size
        W.append(float(W_k))
        V.append(float(V_k))
        objective += pb.tau[k] * (pb.lam * W_k + (1.0 - pb.lam) * V_k)
    return GroupCriterion(tuple(W), tuple(V), float(objective), int(members.size), members.size / n_total)


# -- compiled split scan -----------------------------------------------------------

@njit(cache=True)
def _rank(n, level):
    k = math.ceil((1.0 - level) * (1.0 + 1.0 / n) * n - 1e-9)
    if k > n:
        k = n
    if k < 1:
        k = 1
    return k


@njit(cache=True)
def _arm_offset(idx, treatment, arm, scores, k, level):
    m = 0
    for i in idx:
        if treatment[i] == arm:
            m += 1
    buf = np.empty(m)
    j = 0
    for i in idx:
        if treatment[i] == arm:
            buf[j] = scores[i, k]
            j += 1
    buf.sort()
    return buf[_rank(m, level) - 1]


@njit(cache=True)
def _group_value(idx, point, v_lo, v_hi, w_width, score_w, score_v, treatment,
                 recal, level_w, level_v, lam, tau, n_total):
    """Share-weighted objective of the group ``idx`` (ascending validation rows)."""
    m = idx.shape[0]
    d = point.shape[1]
    obj = 0.0
    for k in range(d):
        s = 0.0
        for i in idx:
            s += point[i, k]
        mean = s / m
        dev = 0.0
        if recal:
            hw = _arm_offset(idx, treatment, 1, score_w, k, level_w) + _arm_offset(idx, treatment, 0, score_w, k, level_w)
            hv = _arm_offset(idx, treatment, 1, score_v, k, level_v) + _arm_offset(idx, treatment, 0, score_v, k, level_v)
            W = 2.0 * hw
            for i in idx:
                lo = point[i, k] - hv
                hi = point[i, k] + hv
                if mean > hi:
                    dev += mean - hi
                elif mean < lo:
                    dev += lo - mean
        else:
            ws = 0.0
            for i in idx:
                ws += w_width[i, k]
                if mean > v_hi[i, k]:
                    dev += mean - v_hi[i, k]
                elif mean < v_lo[i, k]:
                    dev += v_lo[i, k] - mean
            W = ws / m
        V = dev / m
        obj += tau[k] * (lam * W + (1.0 - lam) * V)
    return obj * (m / n_total)


@njit(cache=True)
def _scan_covariate(members, x, g_node, min_leaf, min_arm, point, v_lo, v_hi, w_width,
                    score_w, score_v, treatment, recal, level_w, level_v, lam, tau, n_total):
    """Gains of every threshold ``x <= v`` over the unique member values of one covariate.

    Inadmissible thresholds get gain ``-inf``.
    """
    vals = np.unique(x[members])
    n_cand = vals.shape[0] - 1
    thresholds = vals[:n_cand].copy()
    gains = np.full(n_cand, -np.inf)
    m = members.shape[0]
    for c in range(n_cand):
        v = thresholds[c]
        nl = 0
        for i in members:
            if x[i] <= v:
                nl += 1
        nr = m - nl
        if nl < min_leaf or nr < min_leaf:
            continue
        left = np.empty(nl, dtype=np.int64)
        right = np.empty(nr, dtype=np.int64)
        a = 0
        b = 0
        tl = 0
        tr = 0
        for i in members:
            if x[i] <= v:
                left[a] = i
                a += 1
                tl += treatment[i]
            else:
                right[b] = i
                b += 1
                tr += treatment[i]
        if tl < min_arm or nl - tl < min_arm or tr < min_arm or nr - tr < min_arm:
            continue
        gl = _group_value(left, point, v_lo, v_hi, w_width, score_w, score_v, treatment,
                          recal, level_w, level_v, lam, tau, n_total)
        gr = _group_value(right, point, v_lo, v_hi, w_width, score_w, score_v, treatment,
                          recal, level_w, level_v, lam, tau, n_total)
        gains[c] = g_node - (gl + gr)
    return thresholds, gains


def _node_value(pb: _Problem, members) -> float:
    return _group_value(members, pb.point, pb.v_lo, pb.v_hi, pb.w_width, pb.score_w, pb.score_v,
                        pb.treatment, pb.recalibrate, pb.level_w, pb.level_v, pb.lam, pb.tau, pb.n_total)


def _best_split(X, members, pb: _Problem, g_node: float, min_leaf: int, min_arm: int):
    # recalibration needs residuals from both arm regressors
    min_arm = max(min_arm, 1) if pb.recalibrate else min_arm
    best = None
    cands = []
    for j in range(X.shape[1]):
        thr, gains = _scan_covariate(members, np.ascontiguousarray(X[:, j]), g_node, min_leaf, min_arm,
                                     pb.point, pb.v_lo, pb.v_hi, pb.w_width, pb.score_w, pb.score_v,
                                     pb.treatment, pb.recalibrate, pb.level_w, pb.level_v, pb.lam, pb.tau,
                                     pb.n_total)
        ok = np.isfinite(gains)
        if ok.any():
            cands.append((j, thr[ok], gains[ok]))
    if not cands:
        return None
    top = max(float(g.max()) for _, _, g in cands)
    cutoff = top - TIE_TOL * max(1.0, abs(top))
    for j, thr, gains in cands:
        hit = np.flatnonzero(gains >= cutoff)
        if hit.size:
            c = hit[0]
            best = (j, float(thr[c]), float(gains[c]))
            break
    return best


def best_split(X, members, bands: IteBands, cfg: ExperimentConfig, calib: ConformalCalibration | None = None,
               g_node: float | None = None):
    """Best admissible ``(covariate, threshold, gain)`` for a node, or ``None``.

    Every covariate and every unique member value is tried with rule
    ``x_j <= v``.  Branches need ``cfg.min_leaf`` members and ``cfg.min_arm``
    members of each treatment arm (at least one each under SCR recalibration).  Gains within a relative ``TIE_TOL``
    of the best are ties, resolved by lowest covariate then lowest threshold.
    """
    X = np.asarray(X, dtype=np.float64)
    members = np.sort(np.asarray(members, dtype=np.int64))
    pb = _problem(bands, cfg, calib)
    if g_node is None:
        g_node = _node_value(pb, members)
    return _best_split(X, members, pb, g_node, int(cfg.min_leaf), int(cfg.min_arm))


# -- tree ------------------------------------------------------------------------------

@dataclass(eq=False)
class Leaf:
    group: int
    members: np.ndarray
    criterion: GroupCriterion
    means: tuple

    def to_dict(self, names=None):
        c = self.criterion
        return {"group": self.group, "size": self.criterion.size, "means": list(self.means),
                "criterion": {"W": list(c.W), "V": list(c.V), "objective": c.objective, "share": c.share},
                "members": self.members.tolist()}


@dataclass(eq=False)
class Split:
    covariate: int
    threshold: float
    left: "Leaf | Split"
    right: "Leaf | Split"
    gain: float
    value: float

    def to_dict(self, names=None):
        return {"covariate": names[self.covariate] if names else self.covariate,
                "covariate_index": self.covariate, "threshold": self.threshold,
                "gain": self.gain, "value": self.value, "left": self.left.to_dict(names), "right": self.right.to_dict(names)}


@dataclass(eq=False)
class PartitionTree:
    root: "Leaf | Split"
    n_features: int
    covariate_names: tuple = field(default=())

    @property
    def leaves(self) -> list:
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Leaf):
                out.append(node)
            else:
                stack.extend((node.right, node.left))
        return out

    @property
    def num_groups(self) -> int:
        return len(self.leaves)

    def split_covariates(self) -> set:
        out, stack = set(), [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Split):
                out.add(node.covariate)
                stack.extend((node.left, node.right))
        return out

    def splits(self) -> list:
        """``(covariate, threshold)`` of every internal node in preorder."""
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Split):
                out.append((node.covariate, node.threshold))
                stack.extend((node.right, node.left))
        return out

    def to_dict(self) -> dict:
        return {"n_features": self.n_features, "covariate_names": list(self.covariate_names),
                "root": self.root.to_dict(list(self.covariate_names) or None)}

    @classmethod
    def from_dict(cls, data: dict) -> "PartitionTree":
        """Inverse of :meth:`to_dict`."""
        def node(d):
            if "group" in d:
                c = d["criterion"]
                crit = GroupCriterion(tuple(c["W"]), tuple(c["V"]), c["objective"], d["size"], c["share"])
                members = np.asarray(d.get("members", ()), dtype=np.int64)
                return Leaf(d["group"], members, crit, tuple(d["means"]))
            return Split(d["covariate_index"], d["threshold"], node(d["left"]), node(d["right"]),
                         d["gain"], d.get("value", float("nan")))
        return cls(node(data["root"]), data["n_features"], tuple(data.get("covariate_names", ())))

    @classmethod
    def from_json(cls, text: str) -> "PartitionTree":
        return cls.from_dict(json.loads(text))

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def partition(X, bands: IteBands, cfg: ExperimentConfig, calib: ConformalCalibration | None = None,
              covariate_names=()) -> PartitionTree:
    """Greedy recursive partition of the validation samples.

    A node is split on its best candidate when the gain exceeds
    ``cfg.gamma`` times the node's own objective value; each child then
    recurses with its own value.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != bands.n:
        raise ValueError(f"X has {X.shape[0]} rows for {bands.n} banded samples")
    if bands.n < 2 * cfg.min_leaf:
        raise ValueError(f"need at least 2*min_leaf={2 * cfg.min_leaf} validation samples, got {bands.n}")
    pb = _problem(bands, cfg, calib)
    min_leaf, min_arm = int(cfg.min_leaf), int(cfg.min_arm)
    counter = [0]

    def make_leaf(members):
        crit = group_criterion(members, bands, cfg, calib)
        means = tuple(float(bands.point[members, k].sum() / members.size) for k in range(bands.d))
        leaf = Leaf(counter[0], members, crit, means)
        counter[0] += 1
        return leaf

    def grow(members, g_node):
        found = _best_split(X, members, pb, g_node, min_leaf, min_arm)
        # gains at rounding-noise level are not real improvements
        noise = TIE_TOL * max(1.0, abs(g_node))
        if found is None or not found[2] > cfg.gamma * g_node + noise:
            return make_leaf(members)
        j, v, gain = found
        go_left = X[members, j] <= v
        lm, rm = members[go_left], members[~go_left]
        left = grow(lm, _node_value(pb, lm))
        right = grow(rm, _node_value(pb, rm))
        return Split(j, v, left, right, gain, g_node)

    root_members = np.arange(bands.n, dtype=np.int64)
    root = grow(root_members, _node_value(pb, root_members))
    return PartitionTree(root, X.shape[1], tuple(covariate_names))


def assign_group(tree: PartitionTree, x) -> int:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != tree.n_features:
        raise ValueError(f"feature vector has length {x.shape[0]}, tree expects {tree.n_features}")
    node = tree.root
    while isinstance(node, Split):
        node = node.left if x[node.covariate] <= node.threshold else node.right
    return node.group


def assign_groups(tree: PartitionTree, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != tree.n_features:
        raise ValueError(f"X must have shape (n, {tree.n_features})")
    return np.array([assign_group(tree, row) for row in X], dtype=np.int64)
