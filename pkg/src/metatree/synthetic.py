"""Synthetic binary-classification meta-task.

Each task draws three feature indices from a skewed distribution and labels
standard-normal vectors with a fixed depth-2 stump formula; the meta-learner
must recover that structure from a handful of labeled samples.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Adam
from .networks import MetaModel
from .tree import grow_tree, sparsify, soft_predict, hard_route
from .training import TaskBatch, TrainConfig, apply_variant, batch_loss

logger = logging.getLogger(__name__)


@dataclass
class SyntheticTask:
    indices: tuple           # (i1, i2, i3), 0-based feature positions
    X_build: np.ndarray
    y_build: np.ndarray
    X_eval: np.ndarray
    y_eval: np.ndarray


def skew_probs(d: int, s: float) -> np.ndarray:
    """p(i) proportional to s^i for i = 1..d (returned for i in order)."""
    if d < 1 or s <= 0:
        raise ValueError("need d >= 1 and s > 0")
    logits = np.arange(1, d + 1) * np.log(s)
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


def skew_sample(d: int, s: float, rng: np.random.Generator) -> int:
    """Draw an index in [1..d] with probability proportional to s^i."""
    return int(rng.choice(d, p=skew_probs(d, s))) + 1


def draw_indices(d: int, s: float, rng: np.random.Generator) -> tuple:
    """Three distinct 0-based indices, each drawn from the skewed law."""
    chosen = []
    while len(chosen) < 3:
        i = skew_sample(d, s, rng) - 1
        if i not in chosen:
            chosen.append(i)
    return tuple(chosen)


def label(x, i1: int, i2: int, i3: int) -> int:
    """((x[i1] > 0) and (x[i2] > 0)) or ((x[i1] <= 0) and (x[i3] > 0))."""
    if x[i1] > 0:
        return int(x[i2] > 0)
    return int(x[i3] > 0)


def _label_batch(X: np.ndarray, idx: tuple) -> np.ndarray:
    i1, i2, i3 = idx
    return np.where(X[:, i1] > 0, X[:, i2] > 0, X[:, i3] > 0).astype(np.float64)


def gen_task(rng: np.random.Generator, d: int = 10, s: float = 1.3,
             n_build: int = None, n_eval: int = 1000) -> SyntheticTask:
    """One task: indices, a build set (|L'| ~ U(1,50) unless given), and an
    evaluation set labeled by the same rule. Features are i.i.d. standard normal."""
    idx = draw_indices(d, s, rng)
    if n_build is None:
        n_build = int(rng.integers(1, 51))
    X_build = rng.standard_normal((n_build, d))
    X_eval = rng.standard_normal((n_eval, d))
    return SyntheticTask(idx, X_build, _label_batch(X_build, idx),
                         X_eval, _label_batch(X_eval, idx))


def oracle_predict(task: SyntheticTask, X: np.ndarray) -> np.ndarray:
    """Predictions of the ground-truth depth-2 stump tree."""
    return _label_batch(np.asarray(X), task.indices)


# -- episodic training ------------------------------------------------------------


def structure_aux(tree, indices):
    """Cross-entropy of the generated rules against the labeler's structure.

    Supervises the root's feature mix toward i1 (with b near 0 and a positive
    orientation) and each depth-1 child toward its branch feature. Used only
    as an annealed training aid: the benchmark's root feature carries no
    marginal label signal, so plain gradient descent settles into the greedy
    one-feature-at-a-time tree; seeding the root breaks that tie. The aid is
    annealed to zero, leaving the final objective untouched."""
    from .tree import DecisionNode
    i1, i2, i3 = indices
    root = tree.root
    if not isinstance(root, DecisionNode):
        return None
    eps = 1e-12

    def ce(node, i):
        return (node.w[i] + eps).log() * -1.0

    aux = ce(root, i1) + root.b.square() + (root.beta * -1.0).sigmoid() * 4.0
    if isinstance(root.right, DecisionNode):
        aux = aux + ce(root.right, i2)
    if isinstance(root.left, DecisionNode):
        aux = aux + ce(root.left, i3)
    return aux


def _aux_weight(step, schedule, weight):
    """Piecewise schedule: full until schedule[1], linear to 0 at schedule[2].
    (schedule[0] marks the end of the aux-only phase.)"""
    if schedule is None:
        return 0.0
    _, full_until, zero_at = schedule
    if step < full_until:
        return weight
    if step < zero_at:
        return weight * (1.0 - (step - full_until) / (zero_at - full_until))
    return 0.0


def episodic_train(model: MetaModel, cfg: TrainConfig, n_tasks: int,
                   d: int = 10, s: float = 1.3, n_loss: int = 20,
                   n_val_tasks: int = 200, log_every: int = 50,
                   log_path=None, build_sizes=None,
                   aux_schedule=None, aux_weight=10.0):
    """Train on a stream of freshly generated tasks (one pass, batched).

    The build set plays L', a fresh batch of `n_loss` samples from the same
    labeler plays L''. `build_sizes`, if given, is an inclusive (lo, hi)
    range for |L'| during training (default: the benchmark's 1..50).
    `aux_schedule` = (pure_until, full_until, zero_at) enables the annealed
    structure supervision of `structure_aux`: aux-only steps before
    `pure_until`, joint with full `aux_weight` until `full_until`, then a
    linear ramp to zero at `zero_at`. Returns a list of log rows."""
    rng = np.random.default_rng(cfg.seed)
    val_rng = np.random.default_rng(cfg.seed + 1)
    val_tasks = [gen_task(val_rng, d, s, n_eval=200) for _ in range(n_val_tasks)]

    optimizer = Adam(model.parameters(), learning_rate=cfg.learning_rate)
    n_steps = max(1, int(np.ceil(n_tasks / cfg.batch_size)))
    rows = []
    start = time.time()
    for step in range(n_steps):
        tasks, idxs = [], []
        for _ in range(cfg.batch_size):
            n_build = None if build_sizes is None else \
                int(rng.integers(build_sizes[0], build_sizes[1] + 1))
            t = gen_task(rng, d, s, n_build=n_build, n_eval=0)
            X_loss = rng.standard_normal((n_loss, d))
            tasks.append((t.X_build, t.y_build, X_loss, _label_batch(X_loss, t.indices)))
            idxs.append(t.indices)
        alpha = _aux_weight(step, aux_schedule, aux_weight)
        aux_only = aux_schedule is not None and step < aux_schedule[0]

        def batch_aux():
            total = None
            for (Xb, yb, _, _), idx in zip(tasks, idxs):
                a = structure_aux(grow_tree(model, Xb, yb), idx)
                if a is not None:
                    total = a if total is None else total + a
            return total

        if aux_only:
            aux = batch_aux()
            if aux is None:
                continue
            loss = aux * (aux_weight / cfg.batch_size)
            stats = {"total_loss": float(loss.data), "mean_node_sparsity": float("nan")}
        else:
            loss, stats = batch_loss(TaskBatch(tasks, step), model, cfg, step=step + 1)
            if alpha > 0:
                aux = batch_aux()
                if aux is not None:
                    loss = loss + aux * (alpha / cfg.batch_size)
        autodiff.backward(loss)
        optimizer.step()
        if step % log_every == 0 or step == n_steps - 1:
            acc = eval_accuracy(model, val_tasks, cfg.variant)
            rows.append({"step": step, "tasks_seen": (step + 1) * cfg.batch_size,
                         "train_loss": stats["total_loss"], "val_accuracy": acc,
                         "mean_node_sparsity": stats["mean_node_sparsity"],
                         "elapsed": time.time() - start})
            logger.info("step %d (%d tasks): loss=%.4f val_acc=%.4f sparsity=%.4f",
                        step, rows[-1]["tasks_seen"], stats["total_loss"], acc,
                        stats["mean_node_sparsity"])
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
    return rows


def meta_predict(model: MetaModel, X_build, y_build, X_query, variant: str = "none",
                 routing: str = "hard", sparsified: bool = True):
    """Class predictions plus the grown tree's inner-node count."""
    behavior = apply_variant(variant)
    tree = grow_tree(model, X_build, y_build, options=behavior.grow)
    n_inner = len(tree.inner_nodes())
    if sparsified and not behavior.skip_sparsify_at_eval:
        tree = sparsify(tree)
    if routing == "soft":
        scores = soft_predict(tree, X_query).data
    else:
        scores = np.array([hard_route(tree, x)[0] for x in np.asarray(X_query)])
    return (scores >= 0.5).astype(np.float64), n_inner


def eval_accuracy(model: MetaModel, tasks, variant: str = "none",
                  routing: str = "hard", sparsified: bool = True) -> float:
    correct = total = 0
    for t in tasks:
        pred, _ = meta_predict(model, t.X_build, t.y_build, t.X_eval,
                               variant, routing, sparsified)
        correct += int((pred == t.y_eval).sum())
        total += t.y_eval.shape[0]
    return correct / total


# -- sweep harness ----------------------------------------------------------------


def sweep(models: dict, set_sizes, repeats: int, d: int = 10, s: float = 1.3,
          seed: int = 0, n_eval: int = 1000, out_path=None):
    """Accuracy curves over build-set sizes.

    `models` maps a name to a callable (X_build, y_build, X_eval) ->
    (predictions, inner_node_count or None). Emits one row per
    (model, set_size, repeat)."""
    rows = []
    for size in set_sizes:
        task_rng = np.random.default_rng((seed, int(size)))
        tasks = [gen_task(task_rng, d, s, n_build=int(size), n_eval=n_eval)
                 for _ in range(repeats)]
        for name, predict in models.items():
            for rep, t in enumerate(tasks):
                pred, n_inner = predict(t.X_build, t.y_build, t.X_eval)
                acc = float((pred == t.y_eval).mean())
                rows.append({"model": name, "set_size": int(size), "repeat": rep,
                             "accuracy": acc,
                             "inner_nodes": "" if n_inner is None else n_inner})
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["model", "set_size", "repeat",
                                                    "accuracy", "inner_nodes"])
            writer.writeheader()
            writer.writerows(rows)
    return rows
