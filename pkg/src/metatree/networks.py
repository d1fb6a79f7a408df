"""The three learned functions behind per-user trees.

- embedder: maps one (features, target) pair to an embedding vector
- rule generator: maps (set embedding, node embedding) to a decision rule (w, b, beta)
- leaf generator: maps (set embedding, node embedding) to a leaf value

The embedder is a 4-layer MLP (ReLU between layers, linear final layer) of
width `d_h`. Rule and leaf generators are 2-layer MLPs with hidden sizes 20
and 50 respectively. The rule head applies a softmax over the first `d_x`
outputs so the weight vector lives on the simplex; the leaf head applies a
sigmoid and is linearly rescaled to the target range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor, concat

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class ModelConfig:
    d_x: int
    d_h: int = 512
    d_y: int = 1
    max_depth: int = 3
    dynamic: bool = False
    sparsity_weight: float = 0.1
    output_range: tuple = (1.0, 5.0)
    f_hidden: int = 20
    g_hidden: int = 50

    def __post_init__(self):
        self.output_range = tuple(float(v) for v in self.output_range)
        if self.d_x < 1 or self.d_h < 1:
            raise ValueError("d_x and d_h must be positive")


def _affine_init(rng: np.random.Generator, fan_in: int, fan_out: int,
                 scale: float = 1.0):
    # Uniform He-style fan-in scaling keeps ReLU activations well-scaled at d_h=512.
    limit = scale * np.sqrt(6.0 / fan_in)
    w = Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(np.zeros(fan_out), requires_grad=True)
    return w, b


class MetaModel:
    """Parameter bundle for the embedder/rule/leaf networks."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.h_layers = []
        widths = [c.d_x + c.d_y] + [c.d_h] * 4
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self.h_layers.append(_affine_init(rng, fan_in, fan_out))
        # The output layers of f and g start small so rules begin near-uniform
        # with b, beta ~ 0 and leaves near mid-range: splits stay soft and
        # balanced while the embedder finds its footing, instead of saturating
        # the routing gates before any fit signal exists.
        self.f_layers = [
            _affine_init(rng, 2 * c.d_h, c.f_hidden),
            _affine_init(rng, c.f_hidden, c.d_x + 2, scale=0.01),
        ]
        self.g_layers = [
            _affine_init(rng, 2 * c.d_h, c.g_hidden),
            _affine_init(rng, c.g_hidden, 1, scale=0.01),
        ]

    # -- parameter access ------------------------------------------------------

    def parameters(self):
        params = []
        for w, b in self.h_layers + self.f_layers + self.g_layers:
            params.extend([w, b])
        return params

    def named_parameters(self):
        named = {}
        for net, layers in (("h", self.h_layers), ("f", self.f_layers), ("g", self.g_layers)):
            for i, (w, b) in enumerate(layers):
                named[f"{net}.{i}.weight"] = w
                named[f"{net}.{i}.bias"] = b
        return named

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward passes ----------------------------------------------------------

    def embed(self, x, y) -> Tensor:
        """Embed samples; accepts a single (x, y) pair or stacked 2-d batches."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if y.ndim == 0:
            y = y[None, None]
        elif y.ndim == 1:
            y = y[:, None]
        if x.shape[1] != self.config.d_x:
            raise ValueError(f"embed: expected d_x={self.config.d_x}, got {x.shape[1]}")
        if y.shape[1] != self.config.d_y or y.shape[0] != x.shape[0]:
            raise ValueError(f"embed: target shape {y.shape} does not match inputs {x.shape}")
        out = Tensor(np.concatenate([x, y], axis=1))
        last = len(self.h_layers) - 1
        for i, (w, b) in enumerate(self.h_layers):
            out = out @ w + b
            if i < last:  # final layer stays linear so embeddings can be negative
                out = out.relu()
        return out[0] if single else out

    @staticmethod
    def pool(embeddings: Tensor) -> Tensor:
        """Mean-pool a nonempty batch of embeddings (rows)."""
        if embeddings.data.ndim != 2 or embeddings.data.shape[0] == 0:
            raise ValueError("pool: need a nonempty 2-d batch of embeddings")
        return embeddings.mean_rows()

    def _mlp2(self, layers, r: Tensor, r_node: Tensor) -> Tensor:
        out = concat([r, r_node])
        (w0, b0), (w1, b1) = layers
        out = (out @ w0 + b0).relu()
        return out @ w1 + b1

    def rule_params(self, r: Tensor, r_node: Tensor, *, signed_w: bool = False,
                    onehot_st: bool = False):
        """Decision-rule parameters (w, b, beta) for a node.

        `signed_w` skips the softmax head (ablation); `onehot_st` hardens w to
        a one-hot vector in the forward pass with a straight-through backward.
        """
        raw = self._mlp2(self.f_layers, r, r_node)
        d_x = self.config.d_x
        w = raw[:d_x] if signed_w else raw[:d_x].softmax()
        if onehot_st:
            w = w.st_onehot()
        b = raw[d_x]
        beta = raw[d_x + 1]
        return w, b, beta

    def leaf_value(self, r: Tensor, r_node: Tensor) -> Tensor:
        """Leaf value: sigmoid output linearly scaled into the target range."""
        y_min, y_max = self.config.output_range
        raw = self._mlp2(self.g_layers, r, r_node)
        return raw[0].sigmoid() * (y_max - y_min) + y_min

    # -- introspection / persistence ------------------------------------------------

    def describe(self) -> str:
        lines = [f"MetaModel(d_x={self.config.d_x}, d_h={self.config.d_h}, "
                 f"d_y={self.config.d_y}, max_depth={self.config.max_depth}, "
                 f"dynamic={self.config.dynamic}, sparsity_weight={self.config.sparsity_weight}, "
                 f"output_range={self.config.output_range})"]
        for name, p in self.named_parameters().items():
            lines.append(f"  {name}: {p.shape}")
        return "\n".join(lines)

    def save(self, path):
        arrays = {name: p.data for name, p in self.named_parameters().items()}
        meta = dict(asdict(self.config))
        meta["schema_version"] = CHECKPOINT_SCHEMA_VERSION
        arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "MetaModel":
        with np.load(path) as archive:
            meta = json.loads(archive["__meta__"].tobytes().decode())
            version = meta.pop("schema_version", None)
            if version != CHECKPOINT_SCHEMA_VERSION:
                raise ValueError(f"unsupported checkpoint schema version: {version}")
            config = ModelConfig(**meta)
            model = cls(config, np.random.default_rng(0))
            for name, p in model.named_parameters().items():
                stored = archive[name]
                if stored.shape != p.data.shape:
                    raise ValueError(f"checkpoint shape mismatch for {name}: "
                                     f"{stored.shape} vs {p.data.shape}")
                p.data = stored.astype(np.float64)
        return model

    def state_copy(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state(self, state):
        for name, p in self.named_parameters().items():
            p.data = state[name].copy()
