"""
Multi-vehicle trajectory prediction network.

Each vehicle's input [x/scale, y/scale, heading, one_hot(intention)] goes
through a per-vehicle MLP encoder, then through message-passing layers

    h_k' = relu(W_s h_k + W_o * sum_{p != k} h_p)

with no nonlinearity on the last one, whose 2T outputs are the T future
(x, y) points in the normalized intersection frame.

Forward and backward are plain numpy; the backward pass is exact and hand
written so the trainer never needs a graph framework for gradients.
"""

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from util.configuration import ConfigError, from_dict, to_dict
from util.intention_type import ONE_HOT_ORDER
from util.scene import INPUT_DIM, Scene, Trajectory

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MTPNET01"
CHECKPOINT_VERSION = 1
ARCH_NAME = "mtp-mlp-mp"


class NetworkShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    encoder_sizes: Tuple[int, ...] = (64, 64)
    # hidden widths of the message-passing stack; a final layer to 2T is appended
    aggregator_sizes: Tuple[int, ...] = (64, 64)
    horizon: int = 30
    scale: float = 50.0
    dt: float = 0.2
    aggregation: str = "sum"
    disable_aggregation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "encoder_sizes", tuple(int(s) for s in self.encoder_sizes))
        object.__setattr__(self, "aggregator_sizes", tuple(int(s) for s in self.aggregator_sizes))
        if not self.encoder_sizes:
            raise NetworkShapeError("encoder needs at least one layer")
        if any(s < 1 for s in self.encoder_sizes + self.aggregator_sizes):
            raise NetworkShapeError(f"hidden sizes must be >= 1, got {self.encoder_sizes} / {self.aggregator_sizes}")
        if self.horizon < 1:
            raise NetworkShapeError(f"horizon must be >= 1, got {self.horizon}")
        if not self.scale > 0 or not self.dt > 0:
            raise NetworkShapeError("scale and dt must be positive")
        if self.aggregation not in ("sum", "mean"):
            raise NetworkShapeError(f"aggregation must be 'sum' or 'mean', got {self.aggregation!r}")

    @property
    def output_dim(self) -> int:
        return 2 * self.horizon

    def encoder_dims(self) -> List[Tuple[int, int]]:
        dims = (INPUT_DIM,) + self.encoder_sizes
        return list(zip(dims[1:], dims[:-1]))

    def aggregator_dims(self) -> List[Tuple[int, int]]:
        dims = (self.encoder_sizes[-1],) + self.aggregator_sizes + (self.output_dim,)
        return list(zip(dims[1:], dims[:-1]))


@dataclass
class DenseLayer:
    W: np.ndarray
    b: np.ndarray


@dataclass
class AggLayer:
    W_s: np.ndarray
    W_o: np.ndarray


@dataclass
class SceneActivations:
    """Everything backward needs from one forward call, in canonical (id-sorted) order."""
    order: np.ndarray
    adjacency: np.ndarray
    encoder_inputs: List[np.ndarray] = field(default_factory=list)
    encoder_pre: List[np.ndarray] = field(default_factory=list)
    agg_inputs: List[np.ndarray] = field(default_factory=list)
    agg_messages: List[np.ndarray] = field(default_factory=list)
    agg_pre: List[np.ndarray] = field(default_factory=list)


class MtpNetwork:

    def __init__(self, config: NetworkConfig, encoder: List[DenseLayer], aggregator: List[AggLayer]):
        self.config = config
        self.encoder = encoder
        self.aggregator = aggregator
        self._check_shapes()

    @property
    def horizon(self) -> int:
        return self.config.horizon

    def _check_shapes(self):
        if len(self.encoder) != len(self.config.encoder_dims()):
            raise NetworkShapeError(f"expected {len(self.config.encoder_dims())} encoder layers, got {len(self.encoder)}")
        if len(self.aggregator) != len(self.config.aggregator_dims()):
            raise NetworkShapeError(
                f"expected {len(self.config.aggregator_dims())} aggregation layers, got {len(self.aggregator)}")
        for i, (layer, (out_dim, in_dim)) in enumerate(zip(self.encoder, self.config.encoder_dims())):
            if layer.W.shape != (out_dim, in_dim) or layer.b.shape != (out_dim,):
                raise NetworkShapeError(f"encoder layer {i}: got W{layer.W.shape} b{layer.b.shape}, "
                                        f"expected W{(out_dim, in_dim)} b{(out_dim,)}")
        for i, (layer, (out_dim, in_dim)) in enumerate(zip(self.aggregator, self.config.aggregator_dims())):
            if layer.W_s.shape != (out_dim, in_dim) or layer.W_o.shape != (out_dim, in_dim):
                raise NetworkShapeError(f"aggregation layer {i}: got W_s{layer.W_s.shape} W_o{layer.W_o.shape}, "
                                        f"expected {(out_dim, in_dim)}")

    def parameters(self) -> List[np.ndarray]:
        """Parameter arrays in declared layer order (W, b per encoder layer, then W_s, W_o)."""
        params = []
        for layer in self.encoder:
            params += [layer.W, layer.b]
        for layer in self.aggregator:
            params += [layer.W_s, layer.W_o]
        return params

    def parameter_names(self) -> List[str]:
        names = []
        for i in range(len(self.encoder)):
            names += [f"encoder.{i}.W", f"encoder.{i}.b"]
        for i in range(len(self.aggregator)):
            names += [f"aggregator.{i}.W_s", f"aggregator.{i}.W_o"]
        return names

    def copy(self) -> "MtpNetwork":
        return MtpNetwork(
            self.config,
            [DenseLayer(l.W.copy(), l.b.copy()) for l in self.encoder],
            [AggLayer(l.W_s.copy(), l.W_o.copy()) for l in self.aggregator],
        )

    def with_config(self, **changes) -> "MtpNetwork":
        """Same parameters under a changed config (e.g. toggling disable_aggregation)."""
        net = self.copy()
        net.config = replace(self.config, **changes)
        net._check_shapes()
        return net

    def predict(self, scene: Scene, world=None) -> np.ndarray:
        predictions, _ = forward(self, scene)
        return predictions

    def predict_trajectories(self, scene: Scene) -> List[Trajectory]:
        return [Trajectory(p, self.config.dt) for p in self.predict(scene)]


def init_network(config: NetworkConfig, seed: int) -> MtpNetwork:
    """Fan-in scaled uniform weights, zero biases. Same (config, seed) gives identical arrays."""
    rng = np.random.default_rng(int(seed) & (2 ** 64 - 1))

    def draw(out_dim, in_dim):
        bound = np.sqrt(6.0 / in_dim)
        return rng.uniform(-bound, bound, size=(out_dim, in_dim))

    encoder = [DenseLayer(draw(o, i), np.zeros(o)) for o, i in config.encoder_dims()]
    aggregator = []
    for o, i in config.aggregator_dims():
        W_s = draw(o, i)
        W_o = draw(o, i)
        aggregator.append(AggLayer(W_s, W_o))
    return MtpNetwork(config, encoder, aggregator)


def _relu(z):
    return np.maximum(z, 0.0)


def forward(net: MtpNetwork, scene: Scene) -> Tuple[np.ndarray, SceneActivations]:
    """Predict every vehicle's future.

    Returns:
        predictions: (N, T, 2) in meters, in the scene's vehicle order.
        acts: activations for `backward`.
    """
    cfg = net.config
    features = scene.features(cfg.scale)
    if features.ndim != 2 or features.shape[1] != INPUT_DIM:
        raise NetworkShapeError(f"expected (N, {INPUT_DIM}) inputs, got {features.shape}")
    n = features.shape[0]
    order = np.argsort(np.asarray(scene.ids), kind="stable")

    if cfg.disable_aggregation:
        adjacency = np.zeros((n, n))
    else:
        adjacency = np.ones((n, n)) - np.eye(n)
        if cfg.aggregation == "mean":
            adjacency /= max(n - 1, 1)
    acts = SceneActivations(order=order, adjacency=adjacency)

    h = features[order]
    for layer in net.encoder:
        acts.encoder_inputs.append(h)
        z = h @ layer.W.T + layer.b
        acts.encoder_pre.append(z)
        h = _relu(z)

    last = len(net.aggregator) - 1
    for i, layer in enumerate(net.aggregator):
        m = adjacency @ h
        acts.agg_inputs.append(h)
        acts.agg_messages.append(m)
        z = h @ layer.W_s.T + m @ layer.W_o.T
        acts.agg_pre.append(z)
        h = z if i == last else _relu(z)

    canonical = h.reshape(n, cfg.horizon, 2) * cfg.scale
    predictions = np.empty_like(canonical)
    predictions[order] = canonical
    return predictions, acts


def backward(net: MtpNetwork, acts: SceneActivations, grad_predictions) -> List[np.ndarray]:
    """Exact gradients of a scalar loss, aligned with `net.parameters()`.

    `grad_predictions` is dLoss/dpredictions, (N, T, 2), in the scene's vehicle order.
    """
    cfg = net.config
    grad_predictions = np.asarray(grad_predictions, dtype=np.float64)
    n = acts.order.shape[0]
    if grad_predictions.shape != (n, cfg.horizon, 2):
        raise NetworkShapeError(f"gradient shape {grad_predictions.shape} does not match predictions "
                                f"{(n, cfg.horizon, 2)}")
    if len(acts.encoder_inputs) != len(net.encoder) or len(acts.agg_inputs) != len(net.aggregator):
        raise NetworkShapeError("activations were not produced by this network")

    g = grad_predictions[acts.order].reshape(n, cfg.output_dim) * cfg.scale

    agg_grads = []
    last = len(net.aggregator) - 1
    for i in range(last, -1, -1):
        layer = net.aggregator[i]
        if i != last:
            g = g * (acts.agg_pre[i] > 0)
        dW_s = g.T @ acts.agg_inputs[i]
        dW_o = g.T @ acts.agg_messages[i]
        agg_grads.append((dW_s, dW_o))
        # the message term feeds every other vehicle's input
        g = g @ layer.W_s + acts.adjacency.T @ (g @ layer.W_o)

    enc_grads = []
    for i in range(len(net.encoder) - 1, -1, -1):
        layer = net.encoder[i]
        g = g * (acts.encoder_pre[i] > 0)
        enc_grads.append((g.T @ acts.encoder_inputs[i], g.sum(axis=0)))
        g = g @ layer.W

    grads = []
    for dW, db in reversed(enc_grads):
        grads += [dW, db]
    for dW_s, dW_o in reversed(agg_grads):
        grads += [dW_s, dW_o]
    return grads


# ---------------------------------------------------------------- checkpoints

def save_params(net: MtpNetwork, path: Union[str, Path], metadata: Optional[Dict] = None) -> None:
    """Write MTPNET01 | uint32 header length | JSON header | little-endian float64 parameters."""
    params = net.parameters()
    header = {
        "version": CHECKPOINT_VERSION,
        "arch": ARCH_NAME,
        "config": to_dict(net.config),
        "horizon": net.config.horizon,
        "scale": net.config.scale,
        "dt": net.config.dt,
        "ordering": list(ONE_HOT_ORDER),
        "shapes": [list(p.shape) for p in params],
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    tmp.replace(path)


def read_checkpoint_header(path: Union[str, Path]) -> Tuple[Dict, bytes]:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist") from None
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an {CHECKPOINT_MAGIC.decode()} checkpoint (bad magic bytes)")
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + 4:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    (header_len,) = struct.unpack("<I", data[offset:offset + 4])
    offset += 4
    if len(data) < offset + header_len:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint header: {e}") from None
    return header, data[offset + header_len:]


def load_params(path: Union[str, Path], expected_horizon: Optional[int] = None) -> Tuple[MtpNetwork, Dict]:
    """Load a checkpoint written by `save_params`. Returns (network, metadata)."""
    header, payload = read_checkpoint_header(path)
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: checkpoint header is not a JSON object")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}")
    if header.get("arch") != ARCH_NAME:
        raise CheckpointError(f"{path}: unknown architecture {header.get('arch')!r}")
    ordering = header.get("ordering")
    if not isinstance(ordering, list) or tuple(ordering) != ONE_HOT_ORDER:
        raise CheckpointError(f"{path}: intention ordering {header.get('ordering')} != {list(ONE_HOT_ORDER)}")
    try:
        config = from_dict(NetworkConfig, header["config"], "checkpoint.config")
    except (ConfigError, NetworkShapeError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: bad architecture in header: {e}") from None
    if expected_horizon is not None and config.horizon != expected_horizon:
        raise CheckpointError(f"{path}: checkpoint horizon T={config.horizon} but T={expected_horizon} "
                              f"was requested")

    try:
        shapes = [tuple(int(d) for d in s) for s in header["shapes"]]
        expected = sum(int(np.prod(s)) for s in shapes) * 8
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed parameter shapes in header: {e!r}") from None
    n_layers = len(config.encoder_dims()) + len(config.aggregator_dims())
    if len(shapes) != 2 * n_layers:
        raise CheckpointError(f"{path}: {len(shapes)} parameter arrays for {n_layers} layers")
    if len(payload) != expected:
        raise CheckpointError(f"{path}: truncated parameter block ({len(payload)} of {expected} bytes)")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    arrays, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(values[offset:offset + size].reshape(shape).copy())
        offset += size

    n_enc = len(config.encoder_dims())
    encoder = [DenseLayer(arrays[2 * i], arrays[2 * i + 1]) for i in range(n_enc)]
    rest = arrays[2 * n_enc:]
    aggregator = [AggLayer(rest[2 * i], rest[2 * i + 1]) for i in range(len(rest) // 2)]
    try:
        net = MtpNetwork(config, encoder, aggregator)
    except NetworkShapeError as e:
        raise CheckpointError(f"{path}: {e}") from None
    logger.info(f"Loaded checkpoint {path} (T={config.horizon}, aggregation="
                f"{'off' if config.disable_aggregation else config.aggregation})")
    return net, header.get("metadata", {})
