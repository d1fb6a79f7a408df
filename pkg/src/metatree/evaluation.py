"""Metrics and model studies: accuracy evaluation, robustness to training-set
perturbation, cold-start behavior, contrarian users, parameter sensitivity."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baselines import fit_cart
from .networks import MetaModel
from .training import apply_variant
from .tree import grow_tree, hard_route, soft_predict, sparsify

logger = logging.getLogger(__name__)


def rmse_mae(predictions, targets):
    """Batch RMSE/MAE."""
    err = np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return float(np.sqrt((err * err).mean())), float(np.abs(err).mean())


class RunningMetrics:
    """Streaming RMSE/MAE accumulator (second code path for cross-checking)."""

    def __init__(self):
        self.sq_sum = 0.0
        self.abs_sum = 0.0
        self.count = 0

    def update(self, predictions, targets):
        err = np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
        self.sq_sum += float((err * err).sum())
        self.abs_sum += float(np.abs(err).sum())
        self.count += err.size

    @property
    def rmse(self):
        return float(np.sqrt(self.sq_sum / self.count))

    @property
    def mae(self):
        return float(self.abs_sum / self.count)


@dataclass
class MetricReport:
    rmse: float
    mae: float
    routing: str
    sparsified: bool
    n_users: int
    n_ratings: int
    n_skipped_users: int = 0
    per_user: list = field(default_factory=list)  # (user_id, rmse, mae, n)


def build_user_tree(model: MetaModel, user, variant: str = "none",
                    sparsified: bool = True):
    behavior = apply_variant(variant)
    tree = grow_tree(model, user.X, user.y, options=behavior.grow)
    if sparsified and not behavior.skip_sparsify_at_eval:
        tree = sparsify(tree)
    return tree


def predict_with_tree(tree, X, routing: str):
    if routing == "soft":
        return soft_predict(tree, X).data
    if routing == "hard":
        return np.array([hard_route(tree, x)[0] for x in np.asarray(X)])
    raise ValueError(f"unknown routing: {routing!r}")


def evaluate(model: MetaModel, dataset, routing: str = "soft",
             sparsified: bool = True, variant: str = "none",
             workers: int = 1) -> MetricReport:
    """Build each test user's tree from their training ratings and score the
    user's test ratings."""
    test_ids = sorted(dataset.test_users)
    skipped = 0
    jobs = []
    for uid in test_ids:
        if uid not in dataset.train_users:
            skipped += 1
            continue
        jobs.append(uid)

    def score(uid):
        tree = build_user_tree(model, dataset.train_users[uid], variant, sparsified)
        test = dataset.test_users[uid]
        pred = predict_with_tree(tree, test.X, routing)
        err = pred - test.y
        return (uid, float(np.sqrt((err * err).mean())), float(np.abs(err).mean()),
                len(test.y), float((err * err).sum()), float(np.abs(err).sum()))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score, jobs))
    else:
        results = [score(uid) for uid in jobs]

    sq_sum = sum(r[4] for r in results)
    abs_sum = sum(r[5] for r in results)
    n = sum(r[3] for r in results)
    return MetricReport(
        rmse=float(np.sqrt(sq_sum / n)), mae=float(abs_sum / n),
        routing=routing, sparsified=sparsified,
        n_users=len(results), n_ratings=n, n_skipped_users=skipped,
        per_user=[(r[0], r[1], r[2], r[3]) for r in results])


# -- robustness to training-set perturbation --------------------------------------


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def meta_feature_path(model, X, y, variant="none"):
    """Preorder stump-feature list of the sparsified meta tree."""
    tree = sparsify(grow_tree(model, X, y, options=apply_variant(variant).grow))
    return [node.stump.feature for node in _preorder(tree.root)]


def _preorder(root):
    from .tree import DecisionNode
    out = []

    def walk(node):
        if isinstance(node, DecisionNode):
            out.append(node)
            walk(node.left)
            walk(node.right)
    walk(root)
    return out


def robustness_study(model: MetaModel, users: dict, removal_fractions,
                     repeats: int = 10, seed: int = 0, local_depth: int = 3,
                     out_path=None, max_users: int = None):
    """Feature stability of per-user trees under training-set subsampling.

    For each removal fraction: exact structural match rate (features and
    order), feature-set equality rate, and mean Jaccard index versus the tree
    built from the full set, for both the meta tree and the local CART tree."""
    rng = np.random.default_rng(seed)
    ids = sorted(users)
    if max_users is not None:
        ids = ids[:max_users]

    reference = {}
    for uid in ids:
        u = users[uid]
        reference[uid] = {
            "meta": meta_feature_path(model, u.X, u.y),
            "local": fit_cart(u.X, u.y, local_depth).stump_features(),
        }

    rows = []
    for fraction in removal_fractions:
        tallies = {s: {"exact": 0, "set": 0, "jaccard": 0.0, "n": 0}
                   for s in ("meta", "local")}
        for uid in ids:
            u = users[uid]
            n = u.X.shape[0]
            keep = max(1, int(round((1.0 - fraction) * n)))
            n_rep = 1 if fraction == 0 else repeats
            for _ in range(n_rep):
                idx = np.arange(n) if fraction == 0 else \
                    rng.choice(n, size=keep, replace=False)
                paths = {
                    "meta": meta_feature_path(model, u.X[idx], u.y[idx]),
                    "local": fit_cart(u.X[idx], u.y[idx], local_depth).stump_features(),
                }
                for system in ("meta", "local"):
                    ref = reference[uid][system]
                    got = paths[system]
                    t = tallies[system]
                    t["exact"] += int(got == ref)
                    t["set"] += int(set(got) == set(ref))
                    t["jaccard"] += jaccard(got, ref)
                    t["n"] += 1
        for system in ("meta", "local"):
            t = tallies[system]
            rows.append({"system": system, "removal_fraction": fraction,
                         "exact_match_rate": t["exact"] / t["n"],
                         "feature_set_match_rate": t["set"] / t["n"],
                         "mean_jaccard": t["jaccard"] / t["n"]})
    _write_csv(out_path, rows)
    return rows


# -- cold start ----------------------------------------------------------------------


COLDSTART_BINS = ((0, 20), (20, 40), (40, 80), (80, 160), (160, float("inf")))


def coldstart_study(model: MetaModel, dataset, bins=COLDSTART_BINS,
                    variant: str = "none", out_path=None):
    """Per training-set-size bin: fraction of sparsified trees whose stumps all
    test the item average-rating feature, plus bin RMSE on test ratings."""
    avg_idx = dataset.feature_names.index("avg_rating")
    stats = {b: {"users": 0, "avg_only": 0, "sq": 0.0, "n": 0} for b in bins}
    for uid, user in sorted(dataset.train_users.items()):
        size = user.X.shape[0]
        b = next((b for b in bins if b[0] <= size < b[1]), None)
        if b is None:
            continue
        feats = meta_feature_path(model, user.X, user.y, variant)
        stats[b]["users"] += 1
        stats[b]["avg_only"] += int(len(feats) > 0 and all(f == avg_idx for f in feats))
        if uid in dataset.test_users:
            tree = build_user_tree(model, user, variant, sparsified=True)
            test = dataset.test_users[uid]
            err = predict_with_tree(tree, test.X, "soft") - test.y
            stats[b]["sq"] += float((err * err).sum())
            stats[b]["n"] += len(test.y)
    rows = []
    for b in bins:
        s = stats[b]
        rows.append({
            "bin_lo": b[0], "bin_hi": b[1], "n_users": s["users"],
            "avg_rating_only_fraction": s["avg_only"] / s["users"] if s["users"] else float("nan"),
            "rmse": float(np.sqrt(s["sq"] / s["n"])) if s["n"] else float("nan"),
        })
    _write_csv(out_path, rows)
    return rows


# -- contrarian users -----------------------------------------------------------------


CORRELATION_BINS = (-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0)


def contrarian_study(model: MetaModel, dataset, variant: str = "none",
                     out_path=None, bins_path=None):
    """Correlation of each user's ratings with the item average rating, plus
    meta-tree RMSE binned by that correlation."""
    avg_idx = dataset.feature_names.index("avg_rating")
    per_user = []
    for uid, user in sorted(dataset.train_users.items()):
        avg_ratings = user.X[:, avg_idx]
        if np.std(avg_ratings) == 0 or np.std(user.y) == 0 or len(user.y) < 2:
            corr = float("nan")
        else:
            corr = float(np.corrcoef(user.y, avg_ratings)[0, 1])
        row = {"user_id": uid, "correlation": corr, "n_train": len(user.y),
               "test_rmse": float("nan"), "n_test": 0}
        if uid in dataset.test_users:
            tree = build_user_tree(model, user, variant, sparsified=True)
            test = dataset.test_users[uid]
            err = predict_with_tree(tree, test.X, "soft") - test.y
            row["test_rmse"] = float(np.sqrt((err * err).mean()))
            row["n_test"] = len(test.y)
            row["_sq"] = float((err * err).sum())
        per_user.append(row)

    bin_rows = []
    edges = CORRELATION_BINS
    for lo, hi in zip(edges[:-1], edges[1:]):
        members = [r for r in per_user
                   if not np.isnan(r["correlation"]) and lo <= r["correlation"] < hi
                   and r["n_test"] > 0]
        sq = sum(r["_sq"] for r in members)
        n = sum(r["n_test"] for r in members)
        bin_rows.append({"corr_lo": lo, "corr_hi": hi, "n_users": len(members),
                         "rmse": float(np.sqrt(sq / n)) if n else float("nan")})
    for r in per_user:
        r.pop("_sq", None)
    _write_csv(out_path, per_user)
    _write_csv(bins_path, bin_rows)
    return per_user, bin_rows


# -- parameter sensitivity -------------------------------------------------------------


def sensitivity_sweep(param: str, values, users, dataset, base_config,
                      train_config, out_path=None):
    """Train one model per parameter value (same seed) and report test RMSE."""
    from dataclasses import replace
    from .training import train

    if param not in ("d_h", "depth"):
        raise ValueError(f"unknown sweep parameter: {param!r}")
    rows = []
    for value in values:
        if param == "d_h":
            config = replace(base_config, d_h=int(value))
        else:
            config = replace(base_config, max_depth=int(value))
        model = MetaModel(config, np.random.default_rng(train_config.seed))
        train(users, model, train_config)
        soft = evaluate(model, dataset, routing="soft", sparsified=True)
        hard = evaluate(model, dataset, routing="hard", sparsified=True)
        rows.append({"param": param, "value": value,
                     "rmse_soft_sparse": soft.rmse, "rmse_hard_sparse": hard.rmse,
                     "mae_soft_sparse": soft.mae})
        logger.info("sweep %s=%s: soft=%.4f hard=%.4f", param, value,
                    soft.rmse, hard.rmse)
        _write_csv(out_path, rows)  # resumable: rewritten after each value
    return rows


def _write_csv(path, rows):
    if path is None or not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
