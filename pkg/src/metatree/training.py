"""Outer training loop: per-user build/loss splits, soft-routing loss with a
sparsity penalty, Adam updates, and the ablation variants."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Adam, Tensor, concat
from .networks import MetaModel
from .tree import (GrowOptions, grow_tree, soft_predict, sparsify, tree_sparsity,
                   node_sparsity)

logger = logging.getLogger(__name__)

VARIANTS = (
    "none",
    "semi_sparse_eval",      # 1: evaluate without the sparsification step
    "no_sparsity_loss",      # 2: sparsity weight forced to 0
    "mean_leaf",             # 3: leaf value = mean target over the node's samples
    "drop_global_r",         # 4: rule/leaf networks see only the node embedding
    "fixed_beta",            # 5: beta fixed to 1
    "fixed_beta_signed_w",   # 6: beta fixed to 1, w head linear (signed weights)
    "onehot_w_st",           # 7: one-hot w in forward, straight-through backward
    "hard_route_st_loss",    # 8: hard routing indicators in the loss, ST backward
    "loss_includes_build_set",  # 9: loss measured on build + loss sets
)


@dataclass
class VariantBehavior:
    grow: GrowOptions = field(default_factory=GrowOptions)
    zero_sparsity_weight: bool = False
    hard_st_loss: bool = False
    include_build_in_loss: bool = False
    skip_sparsify_at_eval: bool = False


def apply_variant(variant: str) -> VariantBehavior:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant: {variant!r} (expected one of {VARIANTS})")
    b = VariantBehavior()
    if variant == "semi_sparse_eval":
        b.skip_sparsify_at_eval = True
    elif variant == "no_sparsity_loss":
        b.zero_sparsity_weight = True
    elif variant == "mean_leaf":
        b.grow.mean_leaf = True
    elif variant == "drop_global_r":
        b.grow.drop_global_r = True
    elif variant == "fixed_beta":
        b.grow.fixed_beta = True
    elif variant == "fixed_beta_signed_w":
        b.grow.fixed_beta = True
        b.grow.signed_w = True
    elif variant == "onehot_w_st":
        b.grow.onehot_st = True
    elif variant == "hard_route_st_loss":
        b.hard_st_loss = True
    elif variant == "loss_includes_build_set":
        b.include_build_in_loss = True
    return b


@dataclass
class TrainConfig:
    sparsity_weight: float = 0.1
    learning_rate: float = 3e-4
    batch_size: int = 32
    epochs: int = 200
    split_fraction: float = 0.8
    loss_kind: str = "squared"  # or "logistic"
    variant: str = "none"
    seed: int = 0
    patience: int = 10
    val_fraction: float = 0.1
    # The sparsity weight ramps in linearly over this many optimizer steps.
    # Applying the full penalty from step one saturates the rule softmax (and
    # with it the routing gates) before the data term has picked out useful
    # features, which is a dead state: once every sample soft-routes to a
    # single leaf, all routing gradients vanish identically.
    sparsity_warmup_steps: int = 500
    # Gate-temperature annealing: when > 0, the routing-gate margins in the
    # training loss are scaled by min(1, step / gate_warmup_steps). Softened
    # gates early in training keep every leaf and rule in play jointly, which
    # lets the optimizer discover split hierarchies (e.g. a root feature that
    # is only informative through its children) instead of freezing into the
    # greedy one-feature-at-a-time solution. The scale reaches 1, so the final
    # objective is unchanged.
    gate_warmup_steps: int = 0

    # Optional extra delay before the sparsity ramp starts (used by schedules
    # that need the data term fully in charge first, e.g. curriculum phases).
    sparsity_delay_steps: int = 0

    def effective_sparsity_weight(self, step: int) -> float:
        if self.sparsity_warmup_steps <= 0:
            return self.sparsity_weight
        # The penalty ramp waits for any gate anneal / curriculum delay to
        # finish: while data gradients are damped the penalty would win
        # outright, collapsing every rule before structure exists.
        step = step - max(self.gate_warmup_steps, self.sparsity_delay_steps)
        return self.sparsity_weight * min(1.0, max(0.0, step) / self.sparsity_warmup_steps)

    # Gates start at a quarter of their generated sharpness rather than fully
    # flat: at scale zero all leaves see identical sample sets, the tree is
    # perfectly symmetric, and routing gradients vanish.
    gate_scale_floor: float = 0.25

    def effective_gate_scale(self, step: int) -> float:
        if self.gate_warmup_steps <= 0 or step is None:
            return 1.0
        ramp = min(1.0, step / self.gate_warmup_steps)
        return self.gate_scale_floor + (1.0 - self.gate_scale_floor) * ramp

    def __post_init__(self):
        if self.sparsity_weight < 0:
            raise ValueError("sparsity_weight must be >= 0")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must be in (0, 1)")
        if self.loss_kind not in ("squared", "logistic"):
            raise ValueError(f"unknown loss_kind: {self.loss_kind!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant: {self.variant!r}")


@dataclass
class TaskBatch:
    """One outer-loop step's worth of users, each as (X build, y build,
    X loss, y loss)."""
    users: list
    batch_id: int = 0


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)  # dicts: epoch, train_loss, val_rmse, val_mae
    best_epoch: int = -1
    best_val_rmse: float = float("inf")
    wall_clock: float = 0.0

    def record(self, epoch, train_loss, val_rmse, val_mae):
        self.rows.append({"epoch": epoch, "train_loss": train_loss,
                          "val_rmse": val_rmse, "val_mae": val_mae})
        if val_rmse < self.best_val_rmse:
            self.best_val_rmse = val_rmse
            self.best_epoch = epoch
            return True
        return False

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss",
                                                    "val_rmse", "val_mae"])
            writer.writeheader()
            writer.writerows(self.rows)


def batch_loss(batch: TaskBatch, model: MetaModel, cfg: TrainConfig,
               step: int = None):
    """Total loss for one batch: data term plus weighted sparsity penalty,
    normalized by the number of loss samples. Returns (loss tensor, stats).
    When `step` is given the penalty weight follows the warmup schedule."""
    if not batch.users:
        raise ValueError("batch_loss: empty batch")
    behavior = apply_variant(cfg.variant)
    if behavior.zero_sparsity_weight:
        lam = 0.0
    elif step is None:
        lam = cfg.sparsity_weight
    else:
        lam = cfg.effective_sparsity_weight(step)

    # One embedder call for all build samples in the batch, then per-user slices.
    xs = [np.asarray(u[0], dtype=np.float64) for u in batch.users]
    ys = [np.asarray(u[1], dtype=np.float64) for u in batch.users]
    all_emb = model.embed(np.concatenate(xs, axis=0), np.concatenate(ys))
    offsets = np.cumsum([0] + [x.shape[0] for x in xs])

    data_term = None
    penalty_term = None
    n_loss_total = 0
    n_inner_nodes = 0
    sparsity_sum = 0.0
    for (Xb, yb, Xl, yl), lo, hi in zip(batch.users, offsets[:-1], offsets[1:]):
        emb = all_emb[lo:hi]
        tree = grow_tree(model, Xb, yb, embeddings=emb, options=behavior.grow)
        if behavior.include_build_in_loss:
            Xl = np.concatenate([np.asarray(Xb), np.asarray(Xl)], axis=0)
            yl = np.concatenate([np.asarray(yb), np.asarray(yl)])
        pred = soft_predict(tree, Xl, hard_st=behavior.hard_st_loss,
                            gate_scale=cfg.effective_gate_scale(step))
        target = np.asarray(yl, dtype=np.float64)
        if cfg.loss_kind == "squared":
            user_loss = (pred - target).square().sum()
        else:
            eps = 1e-12
            user_loss = -((pred + eps).log() * target
                          + (1.0 - pred + eps).log() * (1.0 - target)).sum()
        data_term = user_loss if data_term is None else data_term + user_loss
        n_loss_total += target.shape[0]
        if lam > 0:
            pen = tree_sparsity(tree)
            penalty_term = pen if penalty_term is None else penalty_term + pen
        for node in tree.inner_nodes():
            n_inner_nodes += 1
            sparsity_sum += node_sparsity(node.w.data)

    total = data_term
    if penalty_term is not None:
        total = total + penalty_term * lam
    total = total * (1.0 / n_loss_total)
    stats = {
        "data_loss": float(data_term.data) / n_loss_total,
        "total_loss": float(total.data),
        "n_loss_samples": n_loss_total,
        "mean_node_sparsity": sparsity_sum / n_inner_nodes if n_inner_nodes else 0.0,
    }
    return total, stats


def split_user(X, y, split_fraction: float, rng: np.random.Generator):
    """Random build/loss split; both sides are guaranteed nonempty (n >= 2)."""
    n = X.shape[0]
    if n < 2:
        raise ValueError("cannot split a user with fewer than 2 samples")
    n_build = int(round(split_fraction * n))
    n_build = min(n - 1, max(1, n_build))
    perm = rng.permutation(n)
    build, loss = perm[:n_build], perm[n_build:]
    return (X[build], y[build], X[loss], y[loss])


def _predict_user(model, Xb, yb, Xq, behavior: VariantBehavior, routing: str = "soft"):
    """Grow (and by default sparsify) a tree on (Xb, yb), predict rows of Xq."""
    tree = grow_tree(model, Xb, yb, options=behavior.grow)
    if not behavior.skip_sparsify_at_eval:
        tree = sparsify(tree)
    if routing == "soft":
        return soft_predict(tree, Xq).data
    from .tree import hard_route
    return np.array([hard_route(tree, x)[0] for x in np.asarray(Xq)])


def train(users, model: MetaModel, cfg: TrainConfig, log_path=None) -> TrainReport:
    """Meta-train on a list of UserSet-like objects (each with .X and .y).

    Users are split into train/validation (whole users); each epoch resamples
    every training user's build/loss split, sweeps user batches, and takes one
    Adam step per batch. The best-validation checkpoint is restored at the end.
    """
    rng = np.random.default_rng(cfg.seed)
    behavior = apply_variant(cfg.variant)

    usable = [u for u in users if u.X.shape[0] >= 2]
    if len(usable) < len(users):
        logger.warning("excluded %d users with < 2 samples", len(users) - len(usable))
    if not usable:
        raise ValueError("no trainable users")

    order = rng.permutation(len(usable))
    n_val = int(round(cfg.val_fraction * len(usable)))
    val_users = [usable[i] for i in order[:n_val]]
    train_users = [usable[i] for i in order[n_val:]]

    # Fixed validation splits, independent of epoch order.
    val_rng = np.random.default_rng(cfg.seed + 1)
    val_splits = [split_user(u.X, u.y, cfg.split_fraction, val_rng) for u in val_users]

    optimizer = Adam(model.parameters(), learning_rate=cfg.learning_rate)
    global_step = 0
    report = TrainReport()
    best_state = model.state_copy()
    epochs_since_best = 0
    start = time.time()

    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(train_users))
        epoch_loss = 0.0
        epoch_samples = 0
        for batch_id, lo in enumerate(range(0, len(perm), cfg.batch_size)):
            chunk = perm[lo:lo + cfg.batch_size]
            tasks = [split_user(train_users[i].X, train_users[i].y,
                                cfg.split_fraction, rng) for i in chunk]
            global_step += 1
            loss, stats = batch_loss(TaskBatch(tasks, batch_id), model, cfg,
                                     step=global_step)
            autodiff.backward(loss)
            optimizer.step()
            epoch_loss += stats["data_loss"] * stats["n_loss_samples"]
            epoch_samples += stats["n_loss_samples"]

        val_rmse, val_mae = _validate(model, val_splits, behavior)
        improved = report.record(epoch, epoch_loss / max(epoch_samples, 1),
                                 val_rmse, val_mae)
        if improved:
            best_state = model.state_copy()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        logger.info("epoch %d: train_loss=%.5f val_rmse=%.5f val_mae=%.5f%s",
                    epoch, report.rows[-1]["train_loss"], val_rmse, val_mae,
                    " *" if improved else "")
        if epochs_since_best > cfg.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, report.best_epoch)
            break

    model.load_state(best_state)
    report.wall_clock = time.time() - start
    if log_path is not None:
        report.to_csv(log_path)
    return report


def _validate(model, val_splits, behavior: VariantBehavior):
    if not val_splits:
        return float("nan"), float("nan")
    sq_sum = abs_sum = count = 0.0
    for Xb, yb, Xl, yl in val_splits:
        pred = _predict_user(model, Xb, yb, Xl, behavior, routing="soft")
        err = pred - yl
        sq_sum += float((err * err).sum())
        abs_sum += float(np.abs(err).sum())
        count += yl.shape[0]
    return float(np.sqrt(sq_sum / count)), float(abs_sum / count)
