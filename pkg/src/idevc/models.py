"""Encoders, decoder and the Gaussian variational approximator.

All four components are small fully-connected networks: the style and
content encoders and the decoder are 2-hidden-layer tanh MLPs, and the
approximator is a pair of two-layer networks producing the mean and raw
variance of a diagonal Gaussian over style embeddings given a content
embedding.  The variance is ``softplus(raw) + floor`` so cross-pair log
densities stay finite.

Parameters live in plain numpy arrays; training wraps them as tape
leaves via the ``*_leaves`` helpers and runs the ``*_forward`` node
builders.  The array-level entry points (``encode_style`` etc.) are
pure numpy and agree with the node builders exactly.

Checkpoints use a text format: header line ``IDEVC-CKPT v1``, then one
``[param <name> <rows> <cols>]`` section per parameter followed by a
matrix body in the shared text format.  Parameter names encode the layer
index and activation tag, so a bundle round-trips bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import DimensionError, ValidationError

ACTIVATIONS = ("tanh", "softplus", "identity")


def _np_act(tag: str, x: np.ndarray) -> np.ndarray:
    if tag == "tanh":
        return np.tanh(x)
    if tag == "softplus":
        return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    if tag == "identity":
        return x
    raise ValidationError(f"unknown activation tag {tag!r}")


def _node_act(tag: str, x: nc.Node) -> nc.Node:
    if tag == "tanh":
        return nc.tanh(x)
    if tag == "softplus":
        return nc.softplus(x)
    if tag == "identity":
        return x
    raise ValidationError(f"unknown activation tag {tag!r}")


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (1, fan_out)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation tag {self.activation!r}")
        if self.bias.shape != (1, self.weight.shape[1]):
            raise DimensionError(
                f"layer bias {self.bias.shape} does not match weight {self.weight.shape}"
            )


@dataclass
class MLPParams:
    layers: list[Layer]

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]


@dataclass
class GaussianApproxParams:
    """Diagonal Gaussian q(s | c) with network mean and floored variance."""

    mean_net: MLPParams
    var_net: MLPParams
    variance_floor: float = 1e-4


@dataclass
class Dims:
    input_dim: int
    style_dim: int
    content_dim: int


@dataclass
class ModelBundle:
    style_encoder: MLPParams
    content_encoder: MLPParams
    decoder: MLPParams
    approximator: GaussianApproxParams
    dims: Dims = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.dims is None:
            self.dims = Dims(
                self.style_encoder.in_dim,
                self.style_encoder.out_dim,
                self.content_encoder.out_dim,
            )
        if self.decoder.in_dim != self.dims.style_dim + self.dims.content_dim:
            raise DimensionError(
                f"decoder input dim {self.decoder.in_dim} != "
                f"style {self.dims.style_dim} + content {self.dims.content_dim}"
            )


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_mlp(sizes: list[int], activations: list[str], rng: np.random.Generator) -> MLPParams:
    """Weights uniform in [-a, a] with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    if len(activations) != len(sizes) - 1:
        raise ValidationError("init_mlp: one activation tag per layer required")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        if fan_in < 1 or fan_out < 1:
            raise ValidationError(f"init_mlp: non-positive layer dims {fan_in}x{fan_out}")
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-a, a, size=(fan_in, fan_out))
        layers.append(Layer(weight, np.zeros((1, fan_out)), act))
    return MLPParams(layers)


def init_bundle(
    dims: Dims,
    seed: int,
    hidden_width: int = 64,
    approx_hidden: int = 64,
    variance_floor: float = 1e-4,
) -> ModelBundle:
    """Seed-reproducible bundle; same seed gives bit-identical parameters."""
    for label, v in (
        ("input_dim", dims.input_dim),
        ("style_dim", dims.style_dim),
        ("content_dim", dims.content_dim),
        ("hidden_width", hidden_width),
        ("approx_hidden", approx_hidden),
    ):
        if v < 1:
            raise ValidationError(f"init_bundle: {label} must be positive, got {v}")
    if variance_floor <= 0:
        raise ValidationError("init_bundle: variance_floor must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    hidden = ["tanh", "tanh", "identity"]
    style = init_mlp([dims.input_dim, hidden_width, hidden_width, dims.style_dim], hidden, rng)
    content = init_mlp([dims.input_dim, hidden_width, hidden_width, dims.content_dim], hidden, rng)
    decoder = init_mlp(
        [dims.style_dim + dims.content_dim, hidden_width, hidden_width, dims.input_dim],
        hidden,
        rng,
    )
    # Approximator uses the same initialization scheme as the encoders.
    mean_net = init_mlp([dims.content_dim, approx_hidden, dims.style_dim], ["tanh", "identity"], rng)
    var_net = init_mlp([dims.content_dim, approx_hidden, dims.style_dim], ["tanh", "identity"], rng)
    approx = GaussianApproxParams(mean_net, var_net, variance_floor)
    return ModelBundle(style, content, decoder, approx, dims)


# ---------------------------------------------------------------------------
# Array-level forward passes (pure numpy, deterministic)
# ---------------------------------------------------------------------------


def mlp_apply(params: MLPParams, x: np.ndarray) -> np.ndarray:
    out = np.asarray(x, dtype=np.float64)
    if out.ndim == 1:
        out = out.reshape(1, -1)
    if out.shape[1] != params.in_dim:
        raise DimensionError(f"mlp_apply: input dim {out.shape[1]} != expected {params.in_dim}")
    for layer in params.layers:
        out = _np_act(layer.activation, out @ layer.weight + layer.bias)
    return out


def encode_style(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    return mlp_apply(bundle.style_encoder, x)


def encode_content(bundle: ModelBundle, x: np.ndarray) -> np.ndarray:
    return mlp_apply(bundle.content_encoder, x)


def decode(bundle: ModelBundle, s: np.ndarray, c: np.ndarray) -> np.ndarray:
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if s.shape[1] != bundle.dims.style_dim or c.shape[1] != bundle.dims.content_dim:
        raise DimensionError(
            f"decode: got style {s.shape}, content {c.shape} for dims "
            f"({bundle.dims.style_dim}, {bundle.dims.content_dim})"
        )
    return mlp_apply(bundle.decoder, np.hstack([s, c]))


def approx_params(q: GaussianApproxParams, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and floored variance of q(s | c), row per conditioning input."""
    mu = mlp_apply(q.mean_net, c)
    raw = mlp_apply(q.var_net, c)
    var = _np_act("softplus", raw) + q.variance_floor
    return mu, var


_LOG_2PI = float(np.log(2.0 * np.pi))


def approx_log_prob(q: GaussianApproxParams, s: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Per-pair diagonal Gaussian log density log q(s_i | c_i), shape (n,)."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    mu, var = approx_params(q, c)
    if s.shape != mu.shape:
        raise DimensionError(f"approx_log_prob: style {s.shape} vs mean {mu.shape}")
    diff = s - mu
    return -0.5 * (s.shape[1] * _LOG_2PI + np.log(var).sum(axis=1) + (diff * diff / var).sum(axis=1))


# ---------------------------------------------------------------------------
# Node-level forward passes (for training)
# ---------------------------------------------------------------------------


@dataclass
class LayerNodes:
    weight: nc.Node
    bias: nc.Node
    activation: str


def mlp_leaves(params: MLPParams, prefix: str, trainable: bool = True) -> list[LayerNodes]:
    make = nc.leaf if trainable else nc.constant
    nodes = []
    for i, layer in enumerate(params.layers):
        if trainable:
            w = make(f"{prefix}.{i}.w", layer.weight)
            b = make(f"{prefix}.{i}.b", layer.bias)
        else:
            w = make(layer.weight, name=f"{prefix}.{i}.w")
            b = make(layer.bias, name=f"{prefix}.{i}.b")
        nodes.append(LayerNodes(w, b, layer.activation))
    return nodes


def mlp_forward(layers: list[LayerNodes], x: nc.Node) -> nc.Node:
    out = x
    for layer in layers:
        out = _node_act(layer.activation, nc.add(nc.matmul(out, layer.weight), layer.bias))
    return out


def approx_leaves(q: GaussianApproxParams, trainable: bool = True) -> dict:
    return {
        "mean": mlp_leaves(q.mean_net, "approx_mean", trainable),
        "var": mlp_leaves(q.var_net, "approx_var", trainable),
        "floor": q.variance_floor,
    }


def approx_forward(nodes: dict, c: nc.Node) -> tuple[nc.Node, nc.Node]:
    """(mu, var) nodes for q(s | c); var includes the softplus floor."""
    mu = mlp_forward(nodes["mean"], c)
    raw = mlp_forward(nodes["var"], c)
    floor = nc.constant(np.full((1, raw.value.shape[1]), nodes["floor"]), name="var_floor")
    var = nc.add(nc.softplus(raw), floor)
    return mu, var


def collect_leaves(layer_nodes: list[LayerNodes]) -> list[nc.Node]:
    out = []
    for layer in layer_nodes:
        out.extend([layer.weight, layer.bias])
    return out


def sgd_update(layers: list[LayerNodes], params: MLPParams, lr: float) -> None:
    """Apply one plain gradient-descent step into the bundle arrays."""
    for node_layer, layer in zip(layers, params.layers):
        layer.weight -= lr * node_layer.weight.grad
        layer.bias -= lr * node_layer.bias.grad


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_HEADER = "IDEVC-CKPT v1"

_COMPONENTS = ("style_encoder", "content_encoder", "decoder", "approx_mean", "approx_var")


def named_params(bundle: ModelBundle) -> dict[str, np.ndarray]:
    """Flat name -> array view of every parameter in the bundle."""
    nets = {
        "style_encoder": bundle.style_encoder,
        "content_encoder": bundle.content_encoder,
        "decoder": bundle.decoder,
        "approx_mean": bundle.approximator.mean_net,
        "approx_var": bundle.approximator.var_net,
    }
    out: dict[str, np.ndarray] = {}
    for comp, net in nets.items():
        for i, layer in enumerate(net.layers):
            out[f"{comp}.{i}.{layer.activation}.w"] = layer.weight
            out[f"{comp}.{i}.{layer.activation}.b"] = layer.bias
    return out


def save_bundle(path, bundle: ModelBundle) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CKPT_HEADER + "\n")
        floor = np.array([[bundle.approximator.variance_floor]])
        fh.write("[param approximator.variance_floor 1 1]\n")
        fh.write(nc.format_matrix(floor))
        for name, arr in named_params(bundle).items():
            fh.write(f"[param {name} {arr.shape[0]} {arr.shape[1]}]\n")
            fh.write(nc.format_matrix(arr))


def load_bundle(path) -> ModelBundle:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = text.split("\n")
    if not lines or lines[0].strip() != CKPT_HEADER:
        raise ValidationError(f"checkpoint {path}: missing header {CKPT_HEADER!r}")
    params: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        if not (line.startswith("[param ") and line.endswith("]")):
            raise ValidationError(f"checkpoint {path}: unexpected line {line!r}")
        fields = line[1:-1].split()
        if len(fields) != 4:
            raise ValidationError(f"checkpoint {path}: bad section header {line!r}")
        _, name, rows, cols = fields
        rows, cols = int(rows), int(cols)
        body = "\n".join(lines[i + 1 : i + 2 + rows])
        arr = nc.parse_matrix(body)
        if arr.shape != (rows, cols):
            raise ValidationError(
                f"checkpoint {path}: section {name} body {arr.shape} != header {(rows, cols)}"
            )
        params[name] = arr
        i += 2 + rows

    floor = params.pop("approximator.variance_floor", None)
    if floor is None:
        raise ValidationError(f"checkpoint {path}: missing approximator.variance_floor")

    def build(comp: str) -> MLPParams:
        layers = []
        for j in range(64):  # layer indices are small by construction
            found = [k for k in params if k.startswith(f"{comp}.{j}.") and k.endswith(".w")]
            if not found:
                break
            act = found[0].split(".")[2]
            w = params[f"{comp}.{j}.{act}.w"]
            b = params[f"{comp}.{j}.{act}.b"]
            layers.append(Layer(w, b, act))
        if not layers:
            raise ValidationError(f"checkpoint {path}: no layers for component {comp}")
        return MLPParams(layers)

    nets = {comp: build(comp) for comp in _COMPONENTS}
    approx = GaussianApproxParams(nets["approx_mean"], nets["approx_var"], float(floor[0, 0]))
    return ModelBundle(nets["style_encoder"], nets["content_encoder"], nets["decoder"], approx)


def copy_bundle(bundle: ModelBundle) -> ModelBundle:
    def copy_mlp(net: MLPParams) -> MLPParams:
        return MLPParams([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in net.layers])

    approx = GaussianApproxParams(
        copy_mlp(bundle.approximator.mean_net),
        copy_mlp(bundle.approximator.var_net),
        bundle.approximator.variance_floor,
    )
    return ModelBundle(
        copy_mlp(bundle.style_encoder),
        copy_mlp(bundle.content_encoder),
        copy_mlp(bundle.decoder),
        approx,
        Dims(bundle.dims.input_dim, bundle.dims.style_dim, bundle.dims.content_dim),
    )


def bundle_checksum(bundle: ModelBundle) -> dict[str, bytes]:
    """Exact byte snapshots per component, for parameter-isolation checks."""
    grouped: dict[str, list[bytes]] = {}
    for name, arr in named_params(bundle).items():
        grouped.setdefault(name.split(".")[0], []).append(arr.tobytes())
    return {comp: b"".join(parts) for comp, parts in grouped.items()}
