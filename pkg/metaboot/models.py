from __future__ import annotations

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .base import NumericError

_LOGGER = logging.getLogger("models")

ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("none", "sigmoid", "softmax")

CHECKPOINT_FORMAT = "metaboot-params"
CHECKPOINT_VERSION = 1
META_FLOOR = 1e-8


@dataclass(frozen=True)
class MLPSpec:
    """Fully connected network shape.

    input_dim:         features per example
    hidden_layers:     number of hidden layers (0 = single affine map)
    hidden_width:      units per hidden layer
    output_dim:        outputs per example
    activation:        hidden nonlinearity
    output_activation: applied to the final affine output
    """
    input_dim: int
    hidden_layers: int
    hidden_width: int
    output_dim: int
    activation: str = "relu"
    output_activation: str = "none"

    def __post_init__(self) -> None:
        for name in ("input_dim", "hidden_width", "output_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"MLPSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_layers < 0:
            raise ValueError(f"MLPSpec.hidden_layers must be >= 0, got {self.hidden_layers}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"MLPSpec.activation must be one of {ACTIVATIONS}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"MLPSpec.output_activation must be one of {OUTPUT_ACTIVATIONS}")

    def layer_dims(self) -> List[Tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def param_count(self) -> int:
        return int(np.sum([i * o + o for i, o in self.layer_dims()]))

    def param_names(self, prefix: str) -> List[str]:
        names: List[str] = []
        for i in range(len(self.layer_dims())):
            names += [f"{prefix}/W{i}", f"{prefix}/b{i}"]
        return names


def init_mlp_arrays(spec: MLPSpec, rng: np.random.Generator) -> List[np.ndarray]:
    """Glorot-uniform weights, zero biases, as [W0, b0, W1, b1, ...]."""
    params: List[np.ndarray] = []
    for fan_in, fan_out in spec.layer_dims():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def as_leaves(spec: MLPSpec, arrays: Sequence[np.ndarray], prefix: str,
              requires_grad: bool = True, graph: Optional[ad.Graph] = None) -> List[Node]:
    graph = graph or ad.current_graph()
    return [graph.leaf(name, arr, requires_grad) for name, arr in zip(spec.param_names(prefix), arrays)]


def init_mlp(spec: MLPSpec, rng: np.random.Generator, prefix: str = "mlp") -> List[Node]:
    return as_leaves(spec, init_mlp_arrays(spec, rng), prefix)


def _hidden(spec: MLPSpec, h: Node) -> Node:
    return ad.relu(h) if spec.activation == "relu" else ad.tanh(h)


def mlp_forward(spec: MLPSpec, params: Sequence[Node], x: Union[Node, np.ndarray]) -> Node:
    """Batched forward pass; ``x`` is (B, input_dim)."""
    h = ad.as_node(x, params[0].graph)
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ValueError(f"expected input of shape (B, {spec.input_dim}), got {h.shape}")
    n_layers = len(spec.layer_dims())
    for i in range(n_layers):
        h = ad.matmul(h, params[2 * i]) + params[2 * i + 1]
        if i < n_layers - 1:
            h = _hidden(spec, h)
    if spec.output_activation == "sigmoid":
        h = ad.sigmoid(h)
    elif spec.output_activation == "softmax":
        h = ad.softmax(h)
    return h


def _batched(obs: Union[Node, np.ndarray]) -> Tuple[Union[Node, np.ndarray], bool]:
    shape = obs.shape
    if len(shape) == 1:
        if isinstance(obs, Node):
            return ad.reshape(obs, (1, shape[0])), True
        return np.asarray(obs, dtype=np.float64)[None, :], True
    return obs, False


def policy_logits(spec: MLPSpec, x: Sequence[Node], obs: Union[Node, np.ndarray]) -> Node:
    batch, single = _batched(obs)
    logits = mlp_forward(spec, x, batch)
    if not np.all(np.isfinite(logits.value)):
        raise NumericError("policy_forward", f"logits contain NaN/inf (shape {logits.shape})")
    return ad.reshape(logits, (spec.output_dim,)) if single else logits


def policy_forward(spec: MLPSpec, x: Sequence[Node], obs: Union[Node, np.ndarray]) -> Node:
    """Action distribution (softmax over the last axis)."""
    return ad.softmax(policy_logits(spec, x, obs))


def policy_log_probs(spec: MLPSpec, x: Sequence[Node], obs: Union[Node, np.ndarray]) -> Node:
    return ad.log_softmax(policy_logits(spec, x, obs))


def value_forward(spec: MLPSpec, z: Sequence[Node], obs: Union[Node, np.ndarray]) -> Node:
    batch, single = _batched(obs)
    out = mlp_forward(spec, z, batch)
    return ad.reshape(out, () if single else (out.shape[0],))


def q_forward(spec: MLPSpec, x: Sequence[Node], obs: Union[Node, np.ndarray]) -> Node:
    batch, single = _batched(obs)
    out = mlp_forward(spec, x, batch)
    return ad.reshape(out, (spec.output_dim,)) if single else out


def meta_forward(spec: MLPSpec, w: Sequence[Node], stats: Union["MetaStats", np.ndarray]) -> Node:
    """Hyperparameter in (0, 1) from the statistics window."""
    vec = stats.vector() if isinstance(stats, MetaStats) else np.asarray(stats, dtype=np.float64)
    if vec.shape != (spec.input_dim,):
        raise ValueError(f"meta_forward: stats length {vec.shape} does not match input_dim {spec.input_dim}")
    out = mlp_forward(spec, w, vec[None, :])
    if spec.output_activation != "sigmoid":
        out = ad.sigmoid(out)
    # a saturated sigmoid rounds to exactly 0 or 1
    out = 0.5 + (1.0 - 2.0 * META_FLOOR) * (out - 0.5)
    return ad.reshape(out, ())


# numpy fast paths used for acting; no graph is built

def mlp_np(spec: MLPSpec, params: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n_layers = len(spec.layer_dims())
    for i in range(n_layers):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0) if spec.activation == "relu" else np.tanh(h)
    return h


def softmax_np(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def policy_probs_np(spec: MLPSpec, params: Sequence[np.ndarray], obs: np.ndarray) -> np.ndarray:
    logits = mlp_np(spec, params, obs)
    if not np.all(np.isfinite(logits)):
        raise NumericError("policy_forward", "logits contain NaN/inf")
    probs = softmax_np(logits)
    return probs[0] if np.ndim(obs) == 1 else probs


def q_values_np(spec: MLPSpec, params: Sequence[np.ndarray], obs: np.ndarray) -> np.ndarray:
    q = mlp_np(spec, params, obs)
    return q[0] if np.ndim(obs) == 1 else q


def value_np(spec: MLPSpec, params: Sequence[np.ndarray], obs: np.ndarray) -> np.ndarray:
    v = mlp_np(spec, params, obs)[:, 0]
    return v[0] if np.ndim(obs) == 1 else v


def meta_np(spec: MLPSpec, params: Sequence[np.ndarray], stats: Union["MetaStats", np.ndarray]) -> float:
    vec = stats.vector() if isinstance(stats, MetaStats) else np.asarray(stats, dtype=np.float64)
    out = mlp_np(spec, params, vec)[0, 0]
    s = 0.5 * (1.0 + np.tanh(0.5 * out))
    return float(0.5 + (1.0 - 2.0 * META_FLOOR) * (s - 0.5))


class MetaStats:
    """Fixed-length window of recent learning statistics, oldest first.

    Starts as all zeros until enough history has been pushed.
    """

    def __init__(self, length: int, values: Optional[np.ndarray] = None) -> None:
        if length < 1:
            raise ValueError("MetaStats length must be >= 1")
        self.window = np.zeros(length) if values is None else np.array(values, dtype=np.float64)
        if self.window.shape != (length,):
            raise ValueError(f"MetaStats values must have shape ({length},)")

    def __len__(self) -> int:
        return self.window.shape[0]

    def push(self, value: float) -> None:
        if not np.isfinite(value):
            raise NumericError("MetaStats.push", f"statistic {value!r}")
        self.window = np.append(self.window[1:], float(value))

    def extend(self, values: Sequence[float]) -> None:
        for v in values:
            self.push(v)

    def vector(self) -> np.ndarray:
        return self.window.copy()

    def copy(self) -> "MetaStats":
        return MetaStats(len(self), self.window)


def save_params(path: Union[str, Path], named: Mapping[str, np.ndarray],
                header: Optional[Mapping[str, Any]] = None) -> Path:
    """Write named tensors as versioned JSON (row-major values).

    ``header`` keys (the run's ``config`` and code ``version``) are stored
    alongside the tensors.
    """
    path = Path(path)
    doc = {
        **(header or {}),
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "tensors": [
            {"name": name, "shape": list(np.shape(arr)), "values": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in named.items()
        ],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True))
    _LOGGER.debug("Saved %d tensors to %s", len(named), path)
    return path


def load_params(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('format_version')}")
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for t in doc["tensors"]:
        out[t["name"]] = np.asarray(t["values"], dtype=np.float64).reshape(t["shape"])
    return out


def named_params(spec: MLPSpec, arrays: Sequence[np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return dict(zip(spec.param_names(prefix), arrays))
