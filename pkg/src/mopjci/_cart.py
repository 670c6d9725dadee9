# Compiled kernels for CART growth, traversal and weighted leaf quantiles.
import numpy as np
from numba import njit


@njit(cache=True)
def _choose_features(p, k):
    feats = np.arange(p)
    if k >= p:
        return feats
    for i in range(k):
        j = i + np.random.randint(p - i)
        tmp = feats[i]
        feats[i] = feats[j]
        feats[j] = tmp
    return np.sort(feats[:k])


@njit(cache=True)
def build_tree(X, y, rows, max_depth, min_samples_split, min_samples_leaf, max_features, seed):
    """Grow one variance-reduction CART tree on ``X[rows]``.

    Candidate thresholds are midpoints between consecutive distinct values;
    rows with ``x <= threshold`` go left.  Among equal scores the first
    candidate wins, i.e. the lowest feature index, then the lowest threshold.
    Returns node arrays plus ``order``; leaf ``i`` owns
    ``order[leaf_start[i]:leaf_end[i]]``.
    """
    np.random.seed(seed)
    n_rows = rows.shape[0]
    p = X.shape[1]
    cap = 2 * n_rows + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    leaf_start = np.zeros(cap, dtype=np.int64)
    leaf_end = np.zeros(cap, dtype=np.int64)
    depth_of = np.zeros(cap, dtype=np.int64)

    order = rows.copy()
    buf = np.empty(n_rows, dtype=np.int64)

    stack_node = np.empty(cap, dtype=np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    sp = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n_rows
    sp = 1
    count = 1

    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        start = stack_start[sp]
        end = stack_end[sp]
        n = end - start
        depth = depth_of[node]

        total = 0.0
        ymin = np.inf
        ymax = -np.inf
        for i in range(start, end):
            v = y[order[i]]
            total += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        value[node] = total / n
        leaf_start[node] = start
        leaf_end[node] = end

        if (max_depth >= 0 and depth >= max_depth) or n < min_samples_split \
                or n < 2 * min_samples_leaf or ymin == ymax:
            continue

        feats = _choose_features(p, max_features)
        best_score = -np.inf
        best_f = -1
        best_thr = 0.0
        xs = np.empty(n)
        ys = np.empty(n)
        for fi in range(feats.shape[0]):
            f = feats[fi]
            for i in range(n):
                xs[i] = X[order[start + i], f]
            perm = np.argsort(xs, kind="mergesort")
            for i in range(n):
                ys[i] = y[order[start + perm[i]]]
            s_left = 0.0
            for i in range(1, n):
                s_left += ys[i - 1]
                if i < min_samples_leaf or n - i < min_samples_leaf:
                    continue
                a = xs[perm[i - 1]]
                b = xs[perm[i]]
                if not a < b:
                    continue
                s_right = total - s_left
                score = s_left * s_left / i + s_right * s_right / (n - i)
                if score > best_score:
                    best_score = score
                    best_f = f
                    thr = 0.5 * (a + b)
                    if not thr < b:
                        thr = a
                    best_thr = thr

        if best_f < 0:
            continue

        # stable partition of order[start:end]
        nl = 0
        for i in range(start, end):
            if X[order[i], best_f] <= best_thr:
                buf[nl] = order[i]
                nl += 1
        k = nl
        for i in range(start, end):
            if not X[order[i], best_f] <= best_thr:
                buf[k] = order[i]
                k += 1
        for i in range(n):
            order[start + i] = buf[i]

        feature[node] = best_f
        threshold[node] = best_thr
        lnode = count
        rnode = count + 1
        count += 2
        left[node] = lnode
        right[node] = rnode
        depth_of[lnode] = depth + 1
        depth_of[rnode] = depth + 1
        # push right first so the left subtree is expanded first
        stack_node[sp] = rnode
        stack_start[sp] = start + nl
        stack_end[sp] = end
        sp += 1
        stack_node[sp] = lnode
        stack_start[sp] = start
        stack_end[sp] = start + nl
        sp += 1

    return (feature[:count], threshold[:count], left[:count], right[:count],
            value[:count], leaf_start[:count], leaf_end[:count], order)


@njit(cache=True)
def apply_forest(X, roots, feature, threshold, left, right):
    """Global leaf node index reached by every row of ``X`` in every tree."""
    n = X.shape[0]
    T = roots.shape[0]
    out = np.empty((n, T), dtype=np.int64)
    for i in range(n):
        for t in range(T):
            node = roots[t]
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i, t] = node
    return out


@njit(cache=True)
def weighted_quantiles(values, weights, qs):
    """Quantiles of a weighted sample by interpolating the midpoint CDF.

    Each sorted value sits at cumulative position ``C_{i-1} + w_i / 2`` of the
    normalized weights; quantiles interpolate linearly between positions and
    clamp to the extreme values outside them.
    """
    perm = np.argsort(values, kind="mergesort")
    v = values[perm]
    w = weights[perm]
    w = w / w.sum()
    m = v.shape[0]
    pos = np.empty(m)
    acc = 0.0
    for i in range(m):
        pos[i] = acc + 0.5 * w[i]
        acc += w[i]
    out = np.empty(qs.shape[0])
    for j in range(qs.shape[0]):
        q = qs[j]
        if q <= pos[0]:
            out[j] = v[0]
        elif q >= pos[m - 1]:
            out[j] = v[m - 1]
        else:
            i = np.searchsorted(pos, q, side="right") - 1
            frac = (q - pos[i]) / (pos[i + 1] - pos[i])
            out[j] = v[i] + frac * (v[i + 1] - v[i])
    return out


@njit(cache=True)
def forest_quantiles(leaves, leaf_start, leaf_end, targets, qs):
    """QRF quantiles: tree ``t`` gives each target in the reached leaf weight 1/(T*leaf size)."""
    n, T = leaves.shape
    out = np.empty((n, qs.shape[0]))
    for i in range(n):
        m = 0
        for t in range(T):
            node = leaves[i, t]
            m += leaf_end[node] - leaf_start[node]
        vals = np.empty(m)
        wts = np.empty(m)
        k = 0
        for t in range(T):
            node = leaves[i, t]
            size = leaf_end[node] - leaf_start[node]
            for j in range(leaf_start[node], leaf_end[node]):
                vals[k] = targets[j]
                wts[k] = 1.0 / (T * size)
                k += 1
        out[i] = weighted_quantiles(vals, wts, qs)
    return out
