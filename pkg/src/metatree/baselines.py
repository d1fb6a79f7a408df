"""Decision-stump CART trees and the local / global / kNN-augmented baselines."""

from __future__ import annotations

import numpy as np


class CartLeaf:
    __slots__ = ("value", "n_samples")

    def __init__(self, value, n_samples):
        self.value = float(value)
        self.n_samples = n_samples


class CartNode:
    """Route right iff x[feature] >= threshold."""
    __slots__ = ("feature", "threshold", "left", "right")

    def __init__(self, feature, threshold, left, right):
        self.feature = feature
        self.threshold = threshold
        self.left = left
        self.right = right


class CartTree:
    def __init__(self, root, mode: str):
        self.root = root
        self.mode = mode

    def predict_one(self, x):
        node = self.root
        while isinstance(node, CartNode):
            node = node.right if x[node.feature] >= node.threshold else node.left
        return node.value

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        return np.array([self.predict_one(x) for x in X])

    def stump_features(self):
        """Feature indices in preorder (root first)."""
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, CartNode):
                out.append(node.feature)
                stack.append(node.right)
                stack.append(node.left)
        return out


def _leaf_value(y, mode):
    if mode == "regression":
        return y.mean()
    # majority class; ties go to the lower label for determinism
    values, counts = np.unique(y, return_counts=True)
    return values[np.argmax(counts)]


def _impurity(y, mode):
    if len(y) == 0:
        return 0.0
    if mode == "regression":
        return float(np.var(y)) * len(y)
    _, counts = np.unique(y, return_counts=True)
    p = counts / counts.sum()
    return float(1.0 - (p * p).sum()) * len(y)


def best_split(X, y, mode):
    """Best (feature, threshold, gain) by variance reduction or Gini.

    Thresholds are midpoints of adjacent distinct sorted values. Ties break to
    the lowest feature index, then the lowest threshold. Returns None when no
    split separates the data. Candidate impurities come from prefix sums, so
    a feature costs O(n log n) rather than O(n^2)."""
    n, d = X.shape
    parent = _impurity(y, mode)
    if mode != "regression":
        classes = np.unique(y)
        onehot = (y[:, None] == classes[None, :]).astype(np.float64)
    best = None
    for j in range(d):
        order = np.argsort(X[:, j], kind="stable")
        xs, ys = X[order, j], y[order]
        cuts = np.nonzero(np.diff(xs))[0]
        if cuts.size == 0:
            continue
        n_left = cuts + 1.0
        n_right = n - n_left
        if mode == "regression":
            csum = np.cumsum(ys)[cuts]
            csum_sq = np.cumsum(ys * ys)[cuts]
            # n * variance = sum of squares - square of sums / n
            left = csum_sq - csum * csum / n_left
            total, total_sq = ys.sum(), (ys * ys).sum()
            right = (total_sq - csum_sq) - (total - csum) ** 2 / n_right
        else:
            counts = np.cumsum(onehot[order], axis=0)[cuts]
            left = n_left - (counts * counts).sum(axis=1) / n_left
            rcounts = onehot.sum(axis=0)[None, :] - counts
            right = n_right - (rcounts * rcounts).sum(axis=1) / n_right
        gains = parent - left - right
        k = int(np.argmax(gains))  # first max: lowest threshold wins ties
        if best is None or gains[k] > best[2] + 1e-12:
            thr = (xs[cuts[k]] + xs[cuts[k] + 1]) / 2.0
            best = (j, thr, float(gains[k]))
    return best


def fit_cart(X, y, max_depth: int, mode: str = "regression",
             min_samples_split: int = 2) -> CartTree:
    """Greedy CART with decision stumps; stops at max_depth or pure nodes."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("fit_cart: need a nonempty 2-d sample matrix")
    if mode not in ("regression", "classification"):
        raise ValueError(f"unknown mode: {mode!r}")

    def build(idx, depth):
        ys = y[idx]
        if depth == 0 or idx.size < min_samples_split or np.all(ys == ys[0]):
            return CartLeaf(_leaf_value(ys, mode), idx.size)
        split = best_split(X[idx], ys, mode)
        if split is None or split[2] <= 1e-12:
            return CartLeaf(_leaf_value(ys, mode), idx.size)
        j, thr, _ = split
        right = X[idx, j] >= thr
        return CartNode(j, thr, build(idx[~right], depth - 1),
                        build(idx[right], depth - 1))

    return CartTree(build(np.arange(X.shape[0]), max_depth), mode)


# -- baseline constructors -----------------------------------------------------------


def local_baseline(user, max_depth, mode="regression") -> CartTree:
    return fit_cart(user.X, user.y, max_depth, mode)


def global_baseline(all_users, max_depth, mode="regression") -> CartTree:
    X = np.concatenate([u.X for u in all_users], axis=0)
    y = np.concatenate([u.y for u in all_users])
    return fit_cart(X, y, max_depth, mode)


def rating_matrix(users: dict, n_items: int = None):
    """Dense user x item matrix of ratings (0 where unrated)."""
    ids = sorted(users)
    if n_items is None:
        n_items = max(int(u.item_ids.max()) for u in users.values()) + 1
    mat = np.zeros((len(ids), n_items))
    for row, uid in enumerate(ids):
        u = users[uid]
        mat[row, u.item_ids] = u.y
    return ids, mat


def user_similarities(users: dict):
    """Cosine similarity over mean-centered rating vectors (rated items only)."""
    ids, mat = rating_matrix(users)
    rated = mat != 0
    sums = mat.sum(axis=1)
    counts = rated.sum(axis=1)
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    centered = np.where(rated, mat - means[:, None], 0.0)
    norms = np.linalg.norm(centered, axis=1)
    norms[norms == 0] = 1.0
    sim = (centered @ centered.T) / np.outer(norms, norms)
    return ids, sim


def knn_baseline(user_id, users: dict, k: int, max_depth, mode="regression",
                 similarities=None) -> CartTree:
    """CART fitted on the user's samples plus those of the k-1 most similar
    users (k=1 reduces to the local tree; k = user count to the global one)."""
    ids, sim = user_similarities(users) if similarities is None else similarities
    if k > len(ids):
        import logging
        logging.getLogger(__name__).warning(
            "knn_baseline: k=%d clamped to %d users", k, len(ids))
        k = len(ids)
    row = ids.index(user_id)
    # Highest similarity first; the user itself always ranks first (sim=1).
    order = np.argsort(-sim[row], kind="stable")
    chosen = [ids[i] for i in order[:k]]
    if user_id not in chosen:
        chosen[-1] = user_id
    X = np.concatenate([users[u].X for u in chosen], axis=0)
    y = np.concatenate([users[u].y for u in chosen])
    return fit_cart(X, y, max_depth, mode)
