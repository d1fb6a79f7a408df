"""Dataset ingestion: MovieLens 100K and a generic ratings+item-features path.

Item feature vectors combine the item's metadata with two statistics computed
strictly on the training ratings (average rating, rating count). Continuous
features are min-max scaled by training-set extrema and deliberately NOT
clamped at test time, so stump thresholds keep their meaning on out-of-range
values. Scaling constants are kept with the dataset for denormalized display.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

ML100K_GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]


@dataclass
class UserSet:
    user_id: int
    X: np.ndarray
    y: np.ndarray
    item_ids: np.ndarray = None


@dataclass
class FeatureScaler:
    """Per-feature affine scaling record: scaled = (raw - lo) / (hi - lo)."""
    kind: str                # "flag" | "minmax"
    lo: float = 0.0
    hi: float = 1.0

    def scale(self, raw: float) -> float:
        if self.kind == "flag":
            return raw
        if self.hi == self.lo:
            return 0.5  # degenerate training extrema
        return (raw - self.lo) / (self.hi - self.lo)

    def unscale(self, value: float) -> float:
        if self.kind == "flag" or self.hi == self.lo:
            return value
        return value * (self.hi - self.lo) + self.lo


@dataclass
class RatingsDataset:
    train_users: dict        # user_id -> UserSet
    test_users: dict
    feature_names: list
    scalers: list            # one FeatureScaler per feature
    output_range: tuple
    d_x: int = field(init=False)

    def __post_init__(self):
        self.d_x = len(self.feature_names)

    def denormalize(self, feature_index: int, value: float) -> float:
        return self.scalers[feature_index].unscale(value)

    def feature_manifest(self) -> dict:
        return {
            "feature_names": self.feature_names,
            "output_range": list(self.output_range),
            "scalers": [{"kind": s.kind, "lo": s.lo, "hi": s.hi} for s in self.scalers],
        }

    def save_feature_manifest(self, path):
        with open(path, "w") as fh:
            json.dump(self.feature_manifest(), fh, indent=2)


def _parse_ratings_file(path):
    """Tab-separated (user, item, rating, timestamp) rows."""
    rows = []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, "
                                 f"got {len(parts)}")
            try:
                rows.append((int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return rows


def _parse_items_file(path):
    """Pipe-separated u.item rows: id|title|release date|...|19 genre flags."""
    items = {}
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("|")
            if len(parts) != 24:
                raise ValueError(f"{path}:{lineno}: expected 24 pipe-separated fields, "
                                 f"got {len(parts)}")
            item_id = int(parts[0])
            date = parts[2]
            year = int(date.split("-")[-1]) if date else None
            flags = [int(v) for v in parts[5:24]]
            if any(v not in (0, 1) for v in flags):
                raise ValueError(f"{path}:{lineno}: genre flags must be 0/1")
            items[item_id] = {"title": parts[1], "year": year, "flags": flags}
    return items


def load_movielens_100k(data_dir) -> RatingsDataset:
    """Load the canonical u1.base/u1.test split plus u.item metadata."""
    import os
    base = os.path.join(data_dir, "u1.base")
    test = os.path.join(data_dir, "u1.test")
    item_path = os.path.join(data_dir, "u.item")
    for p in (base, test, item_path):
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing dataset file: {p}")

    train_rows = _parse_ratings_file(base)
    test_rows = _parse_ratings_file(test)
    items = _parse_items_file(item_path)

    # Item statistics from training ratings only.
    rating_sum, rating_count = {}, {}
    for user, item, rating, _ in train_rows:
        rating_sum[item] = rating_sum.get(item, 0.0) + rating
        rating_count[item] = rating_count.get(item, 0) + 1
    global_mean = sum(rating_sum.values()) / max(sum(rating_count.values()), 1)

    years = [items[i]["year"] for i in rating_count if items[i]["year"] is not None]
    year_scaler = FeatureScaler("minmax", float(min(years)), float(max(years)))
    count_scaler = FeatureScaler("minmax", 0.0, float(max(rating_count.values())))
    rating_scaler = FeatureScaler("minmax", 1.0, 5.0)

    feature_names = [f"genre_{g}" for g in ML100K_GENRES] + ["year", "avg_rating",
                                                             "rating_count"]
    scalers = [FeatureScaler("flag") for _ in ML100K_GENRES] + [
        year_scaler, rating_scaler, count_scaler]

    features = {}
    for item_id, meta in items.items():
        avg = rating_sum[item_id] / rating_count[item_id] \
            if item_id in rating_count else global_mean
        count = rating_count.get(item_id, 0)
        year = meta["year"]
        x = np.array(meta["flags"]
                     + [0.5 if year is None else year_scaler.scale(year),
                        rating_scaler.scale(avg),
                        count_scaler.scale(count)], dtype=np.float64)
        features[item_id] = x

    def build_users(rows):
        per_user = {}
        for user, item, rating, _ in rows:
            per_user.setdefault(user, []).append((item, rating))
        out = {}
        for user, pairs in per_user.items():
            item_ids = np.array([p[0] for p in pairs])
            X = np.stack([features[i] for i in item_ids])
            y = np.array([p[1] for p in pairs], dtype=np.float64)
            out[user] = UserSet(user, X, y, item_ids)
        return out

    train_users = build_users(train_rows)
    test_users = build_users(test_rows)
    orphans = [u for u in test_users if u not in train_users]
    if orphans:
        logger.warning("dropping %d test users with no training ratings", len(orphans))
        for u in orphans:
            del test_users[u]

    return RatingsDataset(train_users, test_users, feature_names, scalers, (1.0, 5.0))


@dataclass
class SplitSpec:
    """How load_generic assigns ratings to train/test."""
    kind: str = "random"     # "random" (test_fraction + seed) or "column"
    test_fraction: float = 0.1
    seed: int = 0
    column: str = "split"    # for kind="column": values "train" / "test"


def load_generic(ratings_csv, items_csv, split: SplitSpec,
                 output_range=(1.0, 5.0), add_train_stats: bool = True) -> RatingsDataset:
    """Generic ingestion.

    ratings_csv columns: user_id, item_id, rating [, split].
    items_csv columns: item_id followed by numeric feature columns (flags and
    already-meaningful numerics; min-max scaling is applied per column from
    training items). With `add_train_stats`, train-set average rating and
    rating count are appended as extra features.
    """
    lo, hi = float(output_range[0]), float(output_range[1])

    with open(items_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        raw_names = [c for c in reader.fieldnames if c != "item_id"]
        if "item_id" not in reader.fieldnames:
            raise ValueError(f"{items_csv}: missing item_id column")
        raw_items = {}
        for rowno, row in enumerate(reader, start=2):
            try:
                raw_items[int(row["item_id"])] = np.array(
                    [float(row[c]) for c in raw_names], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{items_csv}: row {rowno}: {exc}") from None

    ratings = []
    with open(ratings_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        for col in ("user_id", "item_id", "rating"):
            if col not in reader.fieldnames:
                raise ValueError(f"{ratings_csv}: missing column {col}")
        if split.kind == "column" and split.column not in reader.fieldnames:
            raise ValueError(f"{ratings_csv}: missing split column {split.column}")
        for rowno, row in enumerate(reader, start=2):
            rating = float(row["rating"])
            if not lo <= rating <= hi:
                raise ValueError(f"{ratings_csv}: row {rowno}: rating {rating} outside "
                                 f"declared range [{lo}, {hi}]")
            item = int(row["item_id"])
            if item not in raw_items:
                raise ValueError(f"{ratings_csv}: row {rowno}: unknown item {item}")
            tag = row.get(split.column) if split.kind == "column" else None
            ratings.append((row["user_id"], item, rating, tag))

    if split.kind == "random":
        rng = np.random.default_rng(split.seed)
        is_test = rng.random(len(ratings)) < split.test_fraction
    elif split.kind == "column":
        is_test = np.array([r[3] == "test" for r in ratings])
    else:
        raise ValueError(f"unknown split kind: {split.kind!r}")

    train_rows = [r for r, t in zip(ratings, is_test) if not t]
    test_rows = [r for r, t in zip(ratings, is_test) if t]

    rating_sum, rating_count = {}, {}
    for user, item, rating, _ in train_rows:
        rating_sum[item] = rating_sum.get(item, 0.0) + rating
        rating_count[item] = rating_count.get(item, 0) + 1
    global_mean = (sum(rating_sum.values()) / max(sum(rating_count.values()), 1)
                   if rating_count else (lo + hi) / 2)

    train_items = sorted(rating_count)
    scalers = []
    for j, name in enumerate(raw_names):
        col = np.array([raw_items[i][j] for i in train_items]) if train_items \
            else np.zeros(1)
        vals = set(np.unique(col))
        if vals <= {0.0, 1.0}:
            scalers.append(FeatureScaler("flag"))
        else:
            scalers.append(FeatureScaler("minmax", float(col.min()), float(col.max())))
    feature_names = list(raw_names)
    if add_train_stats:
        feature_names += ["avg_rating", "rating_count"]
        scalers += [FeatureScaler("minmax", lo, hi),
                    FeatureScaler("minmax", 0.0,
                                  float(max(rating_count.values())) if rating_count else 1.0)]

    features = {}
    for item_id, raw in raw_items.items():
        x = [s.scale(v) for s, v in zip(scalers, raw)]
        if add_train_stats:
            avg = rating_sum[item_id] / rating_count[item_id] \
                if item_id in rating_count else global_mean
            x += [scalers[len(raw_names)].scale(avg),
                  scalers[len(raw_names) + 1].scale(rating_count.get(item_id, 0))]
        features[item_id] = np.array(x, dtype=np.float64)

    def build_users(rows):
        per_user = {}
        for user, item, rating, _ in rows:
            per_user.setdefault(user, []).append((item, rating))
        return {user: UserSet(user,
                              np.stack([features[i] for i, _ in pairs]),
                              np.array([r for _, r in pairs], dtype=np.float64),
                              np.array([i for i, _ in pairs]))
                for user, pairs in per_user.items()}

    train_users = build_users(train_rows)
    test_users = {u: s for u, s in build_users(test_rows).items() if u in train_users}
    return RatingsDataset(train_users, test_users, feature_names, scalers, (lo, hi))
