"""Per-user decision trees: growth, routing, sparsification, and export.

A tree is grown depth-first from a user's sample set by querying the learned
rule/leaf networks at every node. Inner nodes carry an oblique rule
(w, b, beta) with w on the simplex; sparsification replaces each rule by the
decision stump on the dominant feature. Soft routing multiplies sigmoid gate
probabilities along each root-to-leaf path and is differentiable end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .networks import MetaModel


@dataclass
class Stump:
    """Single-feature rule: route right iff x[feature] >= threshold (geq=True)
    or x[feature] < threshold (geq=False)."""
    feature: int
    threshold: float
    geq: bool

    def goes_right(self, x) -> bool:
        if self.geq:
            return x[self.feature] >= self.threshold
        return x[self.feature] < self.threshold

    def condition(self, feature_names, denormalize=None) -> str:
        name = feature_names[self.feature] if feature_names else f"x[{self.feature}]"
        thr = self.threshold
        if denormalize is not None:
            thr = denormalize(self.feature, thr)
        return f"{name} {'>=' if self.geq else '<'} {thr:.4g}"


class DecisionNode:
    __slots__ = ("w", "b", "beta", "left", "right", "stump", "n_samples")

    def __init__(self, w: Tensor, b: Tensor, beta: Tensor, left, right, n_samples=None):
        self.w = w
        self.b = b
        self.beta = beta
        self.left = left
        self.right = right
        self.stump = None
        self.n_samples = n_samples

    def goes_right(self, x) -> bool:
        if self.stump is not None:
            return self.stump.goes_right(x)
        beta = float(self.beta.data)
        margin = beta * (float(self.w.data @ x) - float(self.b.data))
        return margin >= 0.0


class Leaf:
    __slots__ = ("value", "n_samples")

    def __init__(self, value: Tensor, n_samples=None):
        self.value = value
        self.n_samples = n_samples


@dataclass
class GrowOptions:
    """Behavioral switches used by the ablation variants."""
    drop_global_r: bool = False
    fixed_beta: bool = False
    signed_w: bool = False
    onehot_st: bool = False
    mean_leaf: bool = False


class MetaTree:
    def __init__(self, root, depth_limit: int, dynamic: bool, d_x: int):
        self.root = root
        self.depth_limit = depth_limit
        self.dynamic = dynamic
        self.d_x = d_x

    def inner_nodes(self):
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, DecisionNode):
                out.append(node)
                stack.extend([node.right, node.left])
        return out

    def leaves(self):
        out = []
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, DecisionNode):
                stack.extend([node.right, node.left])
            else:
                out.append(node)
        return out

    def depth(self) -> int:
        def _d(node):
            if isinstance(node, Leaf):
                return 0
            return 1 + max(_d(node.left), _d(node.right))
        return _d(self.root)


def grow_tree(model: MetaModel, X, y, *, indices=None, depth_budget=None,
              options: GrowOptions = None, embeddings: Tensor = None,
              set_embedding: Tensor = None) -> MetaTree:
    """Grow a tree for one user's sample set (X rows, y targets).

    Samples are embedded once; each node pools the embeddings of the samples
    that reach it and asks the rule network for a split. The index partition
    uses the hard predicate beta*(w.x) >= beta*b (ties go right) and is
    treated as a constant of the forward pass; gradients flow only through
    the pooled embeddings, rules, and leaf values.
    """
    opts = options or GrowOptions()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("grow_tree: need a nonempty 2-d sample matrix")
    n = X.shape[0]
    if indices is None:
        indices = np.arange(n)
    else:
        indices = np.asarray(indices, dtype=np.intp)
    if indices.size == 0:
        raise ValueError("grow_tree: empty index set")

    if embeddings is None:
        embeddings = model.embed(X, y)
    if set_embedding is None:
        set_embedding = MetaModel.pool(embeddings)
    r = Tensor(np.zeros(model.config.d_h)) if opts.drop_global_r else set_embedding
    depth_limit = model.config.max_depth if depth_budget is None else depth_budget
    dynamic = model.config.dynamic

    def make_leaf(I):
        if opts.mean_leaf:
            return Leaf(Tensor(y[I].mean()), n_samples=I.size)
        r_I = embeddings.subset_mean_rows(I)
        return Leaf(model.leaf_value(r, r_I), n_samples=I.size)

    def grow(I, budget):
        if budget == 0:
            return make_leaf(I)
        r_I = embeddings.subset_mean_rows(I)
        w, b, beta = model.rule_params(r, r_I, signed_w=opts.signed_w,
                                       onehot_st=opts.onehot_st)
        if opts.fixed_beta:
            beta = Tensor(1.0)
        margins = float(beta.data) * (X[I] @ w.data - float(b.data))
        right = margins >= 0.0
        I_l, I_r = I[~right], I[right]
        assert I_l.size + I_r.size == I.size
        if dynamic and (I_l.size == 0 or I_r.size == 0):
            return make_leaf(I)
        if not dynamic and I_l.size == 0:
            I_l = I  # complete tree: children still need a pooled embedding
        if not dynamic and I_r.size == 0:
            I_r = I
        node = DecisionNode(w, b, beta,
                            grow(I_l, budget - 1), grow(I_r, budget - 1),
                            n_samples=I.size)
        return node

    return MetaTree(grow(indices, depth_limit), depth_limit, dynamic, model.config.d_x)


# -- routing --------------------------------------------------------------------


def hard_route(tree: MetaTree, x):
    """Deterministic descent; returns (leaf value, list of path records)."""
    x = np.asarray(x, dtype=np.float64)
    path = []
    node = tree.root
    while isinstance(node, DecisionNode):
        right = node.goes_right(x)
        path.append({"node": node, "went_right": bool(right)})
        node = node.right if right else node.left
    return float(node.value.data), path


def _route_rule(node: DecisionNode):
    """(w, b, beta) tensors used for soft routing, honoring a stump if set."""
    if node.stump is None:
        return node.w, node.b, node.beta
    # Equivalent one-hot rule: gate sigma(beta*w[i]*(x[i] - b/w[i])) matches the
    # linear gate in the fully sparse limit and the stump predicate in sign.
    s = node.stump
    onehot = np.zeros(node.w.shape)
    onehot[s.feature] = 1.0
    wi = float(node.w.data[s.feature]) if node.w.data[s.feature] != 0 else 1.0
    return Tensor(onehot), Tensor(s.threshold), node.beta * wi


def soft_assign(tree: MetaTree, X, hard_st: bool = False,
                gate_scale: float = 1.0):
    """Per-leaf assignment probabilities for every row of X.

    Returns a list of (leaf, probability tensor of shape (n,)). With
    `hard_st` the forward pass uses 0/1 routing indicators while the backward
    pass keeps the sigmoid gradients (straight-through). `gate_scale` < 1
    softens every gate (a temperature used for annealed training; 1 is the
    exact objective).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    Xt = Tensor(X)
    ones = Tensor(np.ones(X.shape[0]))
    out = []

    def descend(node, prob):
        if isinstance(node, Leaf):
            out.append((node, prob))
            return
        w, b, beta = _route_rule(node)
        margin = (Xt @ w - b) * beta
        if gate_scale != 1.0:
            margin = margin * gate_scale
        gate = margin.st_step() if hard_st else margin.sigmoid()
        descend(node.right, prob * gate)
        descend(node.left, prob * (1.0 - gate))

    descend(tree.root, ones)
    return out


def soft_predict(tree: MetaTree, X, hard_st: bool = False,
                 gate_scale: float = 1.0) -> Tensor:
    """Expected leaf value under the soft assignment, per row of X."""
    assignment = soft_assign(tree, X, hard_st=hard_st, gate_scale=gate_scale)
    pred = None
    for leaf, prob in assignment:
        term = prob * leaf.value
        pred = term if pred is None else pred + term
    return pred


# -- sparsification ------------------------------------------------------------


def make_stump(w: np.ndarray, b: float, beta: float) -> Stump:
    """Stump on the dominant feature: x[i] >= b/w[i] when beta > 0, < otherwise.
    beta == 0 is treated as positive so the result is deterministic."""
    i = int(np.argmax(w))
    return Stump(feature=i, threshold=float(b) / float(w[i]), geq=beta >= 0.0)


def sparsify(tree: MetaTree) -> MetaTree:
    """Replace every linear rule by its decision stump; leaf values and the
    original (w, b, beta) are retained for audit."""

    def convert(node):
        if isinstance(node, Leaf):
            return node
        new = DecisionNode(node.w, node.b, node.beta,
                           convert(node.left), convert(node.right),
                           n_samples=node.n_samples)
        if node.stump is not None:
            new.stump = Stump(node.stump.feature, node.stump.threshold, node.stump.geq)
        else:
            new.stump = make_stump(node.w.data, float(node.b.data), float(node.beta.data))
        return new

    return MetaTree(convert(tree.root), tree.depth_limit, tree.dynamic, tree.d_x)


# -- sparsity penalty ------------------------------------------------------------


def node_sparsity(w) -> float:
    """Off-diagonal L1 mass of the outer product w w^T.

    Equals (sum |w_i|)^2 - sum w_i^2, which reduces to 1 - sum w_i^2 for
    simplex w. Zero iff w is one-hot."""
    w = np.asarray(w, dtype=np.float64)
    return float(np.abs(w).sum() ** 2 - (w * w).sum())


def node_sparsity_tensor(w: Tensor) -> Tensor:
    return w.abs().sum().square() - (w * w).sum()


def tree_sparsity(tree: MetaTree) -> Tensor:
    """Mean node sparsity over inner nodes (zero tensor for a bare leaf)."""
    nodes = tree.inner_nodes()
    if not nodes:
        return Tensor(0.0)
    total = None
    for node in nodes:
        term = node_sparsity_tensor(node.w)
        total = term if total is None else total + term
    return total * (1.0 / len(nodes))


# -- export / explanation ---------------------------------------------------------


def _rule_text(node: DecisionNode, feature_names, denormalize=None) -> str:
    if node.stump is not None:
        return node.stump.condition(feature_names, denormalize)
    w = node.w.data
    top = np.argsort(w)[::-1][:3]
    parts = " + ".join(f"{w[i]:.3f}*{feature_names[i] if feature_names else f'x[{i}]'}"
                       for i in top if w[i] != 0)
    op = ">=" if float(node.beta.data) >= 0 else "<"
    return f"{parts} {op} {float(node.b.data):.4g}"


def tree_to_text(tree: MetaTree, feature_names=None, denormalize=None) -> str:
    lines = []

    def walk(node, indent):
        pad = "  " * indent
        if isinstance(node, Leaf):
            lines.append(f"{pad}-> {float(node.value.data):.4f}")
            return
        lines.append(f"{pad}if {_rule_text(node, feature_names, denormalize)}:")
        walk(node.right, indent + 1)
        lines.append(f"{pad}else:")
        walk(node.left, indent + 1)

    walk(tree.root, 0)
    return "\n".join(lines)


def tree_to_dict(tree: MetaTree, feature_names=None) -> dict:
    def walk(node):
        if isinstance(node, Leaf):
            return {"leaf": True, "value": float(node.value.data)}
        d = {
            "leaf": False,
            "w": [float(v) for v in node.w.data],
            "b": float(node.b.data),
            "beta": float(node.beta.data),
            "left": walk(node.left),
            "right": walk(node.right),
        }
        if node.stump is not None:
            d["feature"] = node.stump.feature
            if feature_names:
                d["feature_name"] = feature_names[node.stump.feature]
            d["threshold"] = node.stump.threshold
            d["direction"] = ">=" if node.stump.geq else "<"
        return d
    return {"depth_limit": tree.depth_limit, "dynamic": tree.dynamic,
            "d_x": tree.d_x, "root": walk(tree.root)}


def tree_to_json(tree: MetaTree, feature_names=None) -> str:
    return json.dumps(tree_to_dict(tree, feature_names), indent=2)


def tree_to_dot(tree: MetaTree, feature_names=None, denormalize=None) -> str:
    lines = ["digraph metatree {", '  node [shape=box];']
    counter = [0]

    def walk(node):
        my_id = counter[0]
        counter[0] += 1
        if isinstance(node, Leaf):
            lines.append(f'  n{my_id} [label="{float(node.value.data):.3f}", shape=ellipse];')
            return my_id
        label = _rule_text(node, feature_names, denormalize).replace('"', r'\"')
        lines.append(f'  n{my_id} [label="{label}"];')
        left_id = walk(node.left)
        right_id = walk(node.right)
        lines.append(f'  n{my_id} -> n{left_id} [label="no"];')
        lines.append(f'  n{my_id} -> n{right_id} [label="yes"];')
        return my_id

    walk(tree.root)
    lines.append("}")
    return "\n".join(lines)


def explain(tree: MetaTree, x, feature_names, denormalize=None) -> dict:
    """Ordered decision path for one sample, ending in the predicted value."""
    x = np.asarray(x, dtype=np.float64)
    if feature_names is not None and len(feature_names) != tree.d_x:
        raise ValueError(f"explain: {len(feature_names)} feature names for d_x={tree.d_x}")
    value, path = hard_route(tree, x)
    conditions = []
    for step in path:
        text = _rule_text(step["node"], feature_names, denormalize)
        conditions.append({"condition": text, "satisfied": step["went_right"]})
    return {"conditions": conditions, "prediction": value}
